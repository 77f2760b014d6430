"""Tests for heatmap smoothing, single-image scoring, and batch evaluation."""

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from grdnet.config import RunConfig
from grdnet.dataset import DatasetIndex, IndexEntry, load_dataset
from grdnet.inference import (AnomalyResult, batch_infer, infer, smooth,
                              write_result, write_scores_csv)
from grdnet.networks import build_bundle


SMALL = RunConfig(resolution=16, channels=3, base_width=8, latent_dim=128,
                  unet_base_width=8, unet_depth=2)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(7)
    return build_bundle(SMALL).eval()


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    rng = np.random.default_rng(3)

    def put(rel, arr):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)

    for i in range(2):
        put(f"train/good/{i:03d}.png",
            rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        put(f"test/good/{i:03d}.png",
            rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        put(f"test/scratch/{i:03d}.png",
            rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:9, 4:9] = 255
        put(f"ground_truth/scratch/{i:03d}_mask.png", mask)
    return root


class TestSmooth:
    def test_constant_field_unchanged(self):
        heat = np.full((30, 30), 0.37, dtype=np.float32)
        out = smooth(heat, 5)
        assert np.allclose(out, 0.37, atol=1e-6)

    def test_interior_spike_spreads_to_inverse_area(self):
        heat = np.zeros((64, 64), dtype=np.float32)
        heat[32, 32] = 1.0
        out = smooth(heat, 21)
        want = np.float32(1.0) / np.float32(441.0)
        footprint = out[22:43, 22:43]
        assert np.all(footprint == want)
        outside = out.copy()
        outside[22:43, 22:43] = 0.0
        assert np.all(outside == 0.0)

    def test_interior_spike_mass_preserved(self):
        heat = np.zeros((64, 64), dtype=np.float32)
        heat[31, 33] = 1.0
        out = smooth(heat, 21)
        assert abs(out.sum() - 1.0) < 1e-5

    def test_never_exceeds_input_max(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            heat = rng.uniform(size=(25, 31)).astype(np.float32)
            for k in (1, 3, 7, 21):
                assert smooth(heat, k).max() <= heat.max() + 1e-6

    def test_kernel_one_is_identity_copy(self):
        heat = np.random.default_rng(0).uniform(size=(8, 8)).astype(np.float32)
        out = smooth(heat, 1)
        assert np.array_equal(out, heat)
        out[0, 0] = 99.0
        assert heat[0, 0] != 99.0

    def test_rectangular_input_keeps_shape(self):
        heat = np.zeros((12, 40), dtype=np.float32)
        assert smooth(heat, 5).shape == (12, 40)

    @pytest.mark.parametrize("kernel", [0, -3, 2, 8])
    def test_rejects_non_odd_kernels(self, kernel):
        with pytest.raises(ValueError):
            smooth(np.zeros((16, 16), dtype=np.float32), kernel)

    def test_rejects_kernel_larger_than_image(self):
        with pytest.raises(ValueError):
            smooth(np.zeros((10, 50), dtype=np.float32), 11)


class TestInfer:
    def _image(self, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(size=(16, 16, 3)).astype(np.float32)

    def test_result_shapes_and_ranges(self, bundle):
        res = infer(bundle, self._image(), smooth_kernel=5)
        assert isinstance(res, AnomalyResult)
        assert res.reconstruction.shape == (16, 16, 3)
        assert res.heat_raw.shape == (16, 16)
        assert res.heat_smooth.shape == (16, 16)
        assert res.localization.shape == (16, 16)
        assert 0.0 <= res.reconstruction.min() and res.reconstruction.max() <= 1.0
        assert 0.0 <= res.heat_raw.min() and res.heat_raw.max() <= 1.0
        assert set(np.unique(res.localization)) <= {0.0, 1.0}

    def test_score_is_heatmap_max(self, bundle):
        res = infer(bundle, self._image(1), smooth_kernel=5)
        assert res.score == float(res.heat_smooth.max())

    def test_score_restricted_to_roi(self, bundle):
        image = self._image(2)
        roi = np.zeros((16, 16), dtype=np.float32)
        roi[:4, :4] = 1.0
        res = infer(bundle, image, roi=roi, smooth_kernel=5,
                    score_within_roi=True)
        assert res.score == float(res.heat_smooth[:4, :4].max())
        full = infer(bundle, image, roi=roi, smooth_kernel=5,
                     score_within_roi=False)
        assert res.score <= full.score

    def test_empty_roi_scores_zero(self, bundle):
        roi = np.zeros((16, 16), dtype=np.float32)
        res = infer(bundle, self._image(3), roi=roi, smooth_kernel=5,
                    score_within_roi=True)
        assert res.score == 0.0
        assert res.localization.sum() == 0.0

    def test_higher_tau_shrinks_localization(self, bundle):
        image = self._image(4)
        lo = infer(bundle, image, tau=0.01, smooth_kernel=5).localization
        hi = infer(bundle, image, tau=0.9, smooth_kernel=5).localization
        assert np.all(hi <= lo)

    def test_localization_zero_outside_roi(self, bundle):
        roi = np.zeros((16, 16), dtype=np.float32)
        roi[8:, 8:] = 1.0
        res = infer(bundle, self._image(5), roi=roi, tau=0.0, smooth_kernel=5)
        assert np.all(res.localization[:8, :] == 0.0)
        assert np.all(res.localization[:, :8] == 0.0)

    def test_deterministic(self, bundle):
        image = self._image(6)
        a = infer(bundle, image, smooth_kernel=5)
        b = infer(bundle, image, smooth_kernel=5)
        assert np.array_equal(a.heat_smooth, b.heat_smooth)
        assert np.array_equal(a.reconstruction, b.reconstruction)
        assert a.score == b.score


class TestBatchInfer:
    def test_record_per_entry_in_order(self, bundle, data_root):
        index = load_dataset(data_root, "test", 16, 3)
        records = batch_infer(bundle, index, smooth_kernel=5)
        assert len(records) == len(index.entries)
        assert [r.image_id for r in records] == [e.image_path for e in index.entries]
        assert [r.label for r in records] == [0, 0, 1, 1]

    def test_good_entries_have_no_ground_truth(self, bundle, data_root):
        index = load_dataset(data_root, "test", 16, 3)
        records = batch_infer(bundle, index, smooth_kernel=5)
        for rec in records:
            assert rec.error is None
            assert rec.heat_smooth is not None
            assert (rec.gt_mask is not None) == (rec.label == 1)
            if rec.gt_mask is not None:
                assert rec.gt_mask.sum() > 0

    def test_unreadable_entry_becomes_failed_record(self, bundle, data_root):
        index = load_dataset(data_root, "test", 16, 3)
        broken = IndexEntry(image_path=str(data_root / "missing.png"),
                            roi_path=None, mask_path=None,
                            label="scratch", split="test")
        patched = DatasetIndex(entries=index.entries + [broken], split="test",
                               resolution=16, channels=3)
        records = batch_infer(bundle, patched, smooth_kernel=5)
        assert len(records) == 5
        bad = records[-1]
        assert bad.error is not None
        assert np.isnan(bad.score)
        assert all(r.error is None for r in records[:-1])

    def test_deterministic_scores(self, bundle, data_root):
        index = load_dataset(data_root, "test", 16, 3)
        first = [r.score for r in batch_infer(bundle, index, smooth_kernel=5)]
        second = [r.score for r in batch_infer(bundle, index, smooth_kernel=5)]
        assert first == second


class TestWriteResult:
    def _result(self):
        rng = np.random.default_rng(8)
        heat = rng.uniform(size=(16, 16)).astype(np.float32)
        return AnomalyResult(
            reconstruction=rng.uniform(size=(16, 16, 3)).astype(np.float32),
            heat_raw=heat, heat_smooth=heat, score=float(heat.max()),
            localization=(heat > 0.5).astype(np.float32))

    def test_writes_heatmap_and_localization(self, tmp_path):
        written = write_result(self._result(), tmp_path, "img0")
        assert [p.name for p in written] == ["img0_heatmap.png",
                                             "img0_localization.png"]
        for path in written:
            assert path.exists()

    def test_heatmap_pixels_match_quantized_heat(self, tmp_path):
        result = self._result()
        heat_path = write_result(result, tmp_path, "q")[0]
        stored = np.asarray(Image.open(heat_path))
        want = np.clip(result.heat_smooth * 255.0, 0.0, 255.0).astype(np.uint8)
        assert np.array_equal(stored, want)

    def test_overlay_adds_third_file(self, tmp_path):
        written = write_result(self._result(), tmp_path, "o", overlay=True)
        assert written[-1].name == "o_overlay.png"
        rgb = np.asarray(Image.open(written[-1]))
        assert rgb.shape == (16, 16, 3)


class TestWriteScoresCsv:
    def test_rows_in_order_with_failures_blank(self, tmp_path):
        from grdnet.evaluation import EvalRecord

        records = [
            EvalRecord(image_id="a.png", label=0, score=0.25, class_name="good"),
            EvalRecord(image_id="b.png", label=1, score=float("nan"),
                       class_name="hole", error="boom"),
        ]
        path = tmp_path / "scores.csv"
        write_scores_csv(records, path)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "image,class,label,score,error"
        assert lines[1] == "a.png,good,0,0.250000,"
        assert lines[2] == "b.png,hole,1,,boom"
