"""Tests for the three-phase training step, plateau decay, and checkpoints."""

import math
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from grdnet.config import RunConfig, replace
from grdnet.losses import LossWeights, weights_from_config
from grdnet.networks import build_bundle
from grdnet.trainer import (Batch, FitResult, TrainState, fit,
                            load_checkpoint, make_optimizers, save_checkpoint,
                            train_step, update_lr, validate)


TINY = RunConfig(resolution=16, channels=3, base_width=8, latent_channels=8,
                 latent_dim=64, unet_base_width=8, unet_depth=2, batch_size=2,
                 lr0=1e-3, seed=5, deterministic=True)


def make_batch(n=2, seed=4):
    """Fixed clean/corrupted pair: a uniform texture with a pasted square."""
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0.2, 0.8, size=(n, 3, 16, 16)).astype(np.float32)
    corrupted = clean.copy()
    corrupted[:, :, 5:11, 5:11] = rng.uniform(size=(n, 3, 6, 6)).astype(np.float32)
    mask = np.zeros((n, 1, 16, 16), dtype=np.float32)
    mask[:, :, 5:11, 5:11] = 1.0
    roi = np.ones((n, 1, 16, 16), dtype=np.float32)
    return Batch(*(torch.from_numpy(a) for a in (clean, corrupted, mask, roi)))


def fresh_setup(lr=1e-3, seed=0):
    torch.manual_seed(seed)
    bundle = build_bundle(TINY)
    return bundle, make_optimizers(bundle, lr), weights_from_config(TINY)


class TestUpdateLr:
    def test_improvement_resets_counter_and_best(self):
        state = TrainState(lr=1e-4, best_metric=1.0, epochs_since_improvement=2)
        out = update_lr(state, 0.9)
        assert out.best_metric == 0.9
        assert out.epochs_since_improvement == 0
        assert out.lr == 1e-4
        assert out.decay_events == 0

    def test_sub_threshold_improvement_counts_as_stale(self):
        state = TrainState(lr=1e-4, best_metric=1.0)
        out = update_lr(state, 1.0 - 5e-5, min_delta=1e-4)
        assert out.epochs_since_improvement == 1
        assert out.best_metric == 1.0

    def test_decay_fires_after_patience_stale_epochs(self):
        state = TrainState(lr=1e-4, best_metric=0.5)
        for i in range(2):
            state = update_lr(state, 0.5, alpha=0.1, patience=3)
            assert state.lr == 1e-4, f"decayed too early at stale epoch {i + 1}"
        state = update_lr(state, 0.5, alpha=0.1, patience=3)
        want = 1e-4 * math.exp(-0.1)
        assert abs(state.lr - want) / want < 1e-12
        assert state.decay_events == 1
        assert state.epochs_since_improvement == 0

    def test_three_plateaus_compound_exponentially(self):
        state = TrainState(lr=1e-4, best_metric=0.5)
        for _ in range(9):
            state = update_lr(state, 0.5, alpha=0.1, patience=3)
        want = 1e-4 * math.exp(-0.3)
        assert abs(state.lr - want) / want < 1e-12
        assert state.decay_events == 3

    def test_improvement_after_decay_keeps_new_lr(self):
        state = TrainState(lr=1e-4, best_metric=0.5)
        for _ in range(3):
            state = update_lr(state, 0.5, alpha=0.1, patience=3)
        decayed = state.lr
        state = update_lr(state, 0.2, alpha=0.1, patience=3)
        assert state.lr == decayed
        assert state.best_metric == 0.2


class TestMakeOptimizers:
    def test_adam_momentum_pair(self):
        bundle, opts, _ = fresh_setup()
        for opt in opts.all():
            assert opt.param_groups[0]["betas"] == (0.5, 0.999)

    def test_generator_optimizer_covers_both_encoders(self):
        bundle, opts, _ = fresh_setup()
        want = (len(list(bundle.generator.parameters()))
                + len(list(bundle.encoder2.parameters())))
        assert len(opts.generator.param_groups[0]["params"]) == want

    def test_set_lr_reaches_every_group(self):
        _, opts, _ = fresh_setup()
        opts.set_lr(3e-5)
        for opt in opts.all():
            assert all(g["lr"] == 3e-5 for g in opt.param_groups)


class TestTrainStep:
    def test_report_is_finite_and_additive(self):
        bundle, opts, weights = fresh_setup()
        report, d_loss = train_step(bundle, opts, make_batch(), weights)
        for value in (report.adv, report.con, report.enc, report.gan_total,
                      report.focal, report.total, d_loss):
            assert math.isfinite(value)
        assert report.total == report.gan_total + report.focal

    def test_weighted_sum_uses_configured_weights(self):
        bundle, opts, _ = fresh_setup()
        weights = LossWeights(l1_weight=1.0, ssim_weight=1.0, adv_weight=2.0,
                              context_weight=3.0, latent_weight=5.0,
                              focal_gamma=2.0, overlap_weight=0.5)
        report, _ = train_step(bundle, opts, make_batch(), weights)
        want = 2.0 * report.adv + 3.0 * report.con + 5.0 * report.enc
        assert report.gan_total == want

    def test_every_network_updates(self):
        bundle, opts, weights = fresh_setup()
        before = {name: [p.clone() for p in m.parameters()]
                  for name, m in zip(("gen", "enc2", "disc", "seg"),
                                     bundle.modules())}
        train_step(bundle, opts, make_batch(), weights)
        for name, m in zip(("gen", "enc2", "disc", "seg"), bundle.modules()):
            changed = any(not torch.equal(old, new)
                          for old, new in zip(before[name], m.parameters()))
            assert changed, f"{name} parameters did not move"

    def test_discriminator_grads_reenabled(self):
        bundle, opts, weights = fresh_setup()
        train_step(bundle, opts, make_batch(), weights)
        assert all(p.requires_grad for p in bundle.discriminator.parameters())

    def test_overfits_fixed_batch(self):
        bundle, opts, weights = fresh_setup()
        batch = make_batch()
        first = train_step(bundle, opts, batch, weights)[0].total
        last = first
        for _ in range(199):
            last = train_step(bundle, opts, batch, weights)[0].total
        assert last < first / 8.0, f"total went {first:.3f} -> {last:.3f}"

    def test_deterministic_given_same_init(self):
        runs = []
        for _ in range(2):
            bundle, opts, weights = fresh_setup(seed=3)
            batch = make_batch()
            runs.append([train_step(bundle, opts, batch, weights)[0].total
                         for _ in range(3)])
        assert runs[0] == runs[1]


class TestValidate:
    def test_never_touches_parameters(self):
        bundle, _, weights = fresh_setup()
        before = [p.clone() for m in bundle.modules() for p in m.parameters()]
        validate(bundle, [make_batch()], weights, ablation_case=2)
        after = [p for m in bundle.modules() for p in m.parameters()]
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_weighted_mean_over_uneven_batches(self):
        bundle, _, weights = fresh_setup()
        b2, b1 = make_batch(2, seed=4), make_batch(1, seed=9)
        alone2 = validate(bundle, [b2], weights, 2)
        alone1 = validate(bundle, [b1], weights, 2)
        both = validate(bundle, [b2, b1], weights, 2)
        for key in both:
            want = (2 * alone2[key] + 1 * alone1[key]) / 3
            assert abs(both[key] - want) < 1e-9

    def test_empty_batch_list_is_nan(self):
        bundle, _, weights = fresh_setup()
        out = validate(bundle, [], weights, 2)
        assert all(math.isnan(v) for v in out.values())

    def test_leaves_bundle_in_train_mode(self):
        bundle, _, weights = fresh_setup()
        validate(bundle, [make_batch()], weights, 2)
        assert all(m.training for m in bundle.modules())


class TestCheckpoint:
    def test_parameters_round_trip_bitwise(self, tmp_path):
        bundle, opts, weights = fresh_setup(seed=1)
        train_step(bundle, opts, make_batch(), weights)
        state = TrainState(lr=3e-5, epoch=7, best_metric=0.25,
                           epochs_since_improvement=2, decay_events=4)
        path = save_checkpoint(tmp_path / "ckpt", bundle, opts, state, TINY)

        other, other_opts, _ = fresh_setup(seed=99)
        loaded = load_checkpoint(path, other, TINY, other_opts)
        assert loaded == state
        for m_old, m_new in zip(bundle.modules(), other.modules()):
            for (k, a), (k2, b) in zip(m_old.state_dict().items(),
                                       m_new.state_dict().items()):
                assert k == k2 and torch.equal(a, b), f"mismatch at {k}"

    def test_optimizer_momentum_restored(self, tmp_path):
        bundle, opts, weights = fresh_setup(seed=1)
        for _ in range(3):
            train_step(bundle, opts, make_batch(), weights)
        path = save_checkpoint(tmp_path / "ckpt", bundle, opts,
                               TrainState(lr=1e-3), TINY)
        other, other_opts, _ = fresh_setup(seed=99)
        load_checkpoint(path, other, TINY, other_opts)
        old = opts.generator.state_dict()["state"]
        new = other_opts.generator.state_dict()["state"]
        assert old.keys() == new.keys() and len(old) > 0
        for idx in old:
            assert torch.equal(old[idx]["exp_avg"], new[idx]["exp_avg"])

    def test_rejects_architecture_mismatch(self, tmp_path):
        bundle, opts, _ = fresh_setup()
        path = save_checkpoint(tmp_path / "ckpt", bundle, opts,
                               TrainState(lr=1e-3), TINY)
        wider = replace(TINY, base_width=16)
        other = build_bundle(wider)
        with pytest.raises(RuntimeError, match="config hash"):
            load_checkpoint(path, other, wider)

    def test_rejects_unknown_format_version(self, tmp_path):
        path = tmp_path / "bad"
        torch.save({"format_version": 99}, path)
        bundle, _, _ = fresh_setup()
        with pytest.raises(RuntimeError, match="format version"):
            load_checkpoint(path, bundle, TINY)

    def test_missing_file_is_reported(self, tmp_path):
        bundle, _, _ = fresh_setup()
        with pytest.raises(RuntimeError, match="cannot read checkpoint"):
            load_checkpoint(tmp_path / "absent", bundle, TINY)


@pytest.fixture(scope="module")
def train_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_tree")
    rng = np.random.default_rng(12)
    good = root / "train" / "good"
    good.mkdir(parents=True)
    for i in range(6):
        arr = rng.integers(40, 216, (16, 16, 3), dtype=np.uint8)
        Image.fromarray(arr).save(good / f"{i:03d}.png")
    return root


def fit_config(train_root, out_dir, **changes):
    cfg = replace(TINY, data_root=str(train_root), out_dir=str(out_dir),
                  epochs=2, val_fraction=0.2, augment=True)
    return replace(cfg, **changes) if changes else cfg


def read_history(out_dir):
    lines = (Path(out_dir) / "history.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


class TestFit:
    def test_writes_snapshot_history_and_checkpoints(self, train_root, tmp_path):
        out = tmp_path / "run"
        result = fit(fit_config(train_root, out))
        assert (out / "config.snapshot").exists()
        assert result.last_path.exists()
        assert result.best_path is not None and result.best_path.exists()
        rows = read_history(out)
        assert len(rows) == 2 == len(result.history)
        assert [r["epoch"] for r in rows] == ["0", "1"]
        for row in result.history:
            assert all(math.isfinite(row[k]) for k in
                       ("adv", "con", "enc", "focal", "total", "val_total"))

    def test_zero_epochs_saves_initial_state_only(self, train_root, tmp_path):
        out = tmp_path / "zero"
        result = fit(fit_config(train_root, out, epochs=0))
        assert result.history == []
        assert result.best_path is None
        assert result.last_path.exists()
        assert read_history(out) == []

    def test_runs_repeat_exactly(self, train_root, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        fit(fit_config(train_root, out_a))
        fit(fit_config(train_root, out_b))
        text_a = (out_a / "history.csv").read_text()
        assert text_a == (out_b / "history.csv").read_text()

        cfg = fit_config(train_root, out_a)
        pairs = (build_bundle(cfg), build_bundle(cfg))
        load_checkpoint(out_a / "ckpt_last", pairs[0], cfg)
        load_checkpoint(out_b / "ckpt_last", pairs[1], cfg)
        for m_a, m_b in zip(pairs[0].modules(), pairs[1].modules()):
            for a, b in zip(m_a.state_dict().values(), m_b.state_dict().values()):
                assert torch.equal(a, b)

    def test_resume_matches_uninterrupted_run(self, train_root, tmp_path):
        out_full, out_part = tmp_path / "full", tmp_path / "part"
        fit(fit_config(train_root, out_full, epochs=4))
        fit(fit_config(train_root, out_part, epochs=2))
        resumed = fit(fit_config(train_root, out_part, epochs=4),
                      resume_from=out_part / "ckpt_last")
        assert [r["epoch"] for r in resumed.history] == [2, 3]
        assert ((out_full / "history.csv").read_text()
                == (out_part / "history.csv").read_text())

        cfg = fit_config(train_root, out_full)
        pair = (build_bundle(cfg), build_bundle(cfg))
        full_state = load_checkpoint(out_full / "ckpt_last", pair[0], cfg)
        part_state = load_checkpoint(out_part / "ckpt_last", pair[1], cfg)
        assert full_state == part_state
        for m_a, m_b in zip(pair[0].modules(), pair[1].modules()):
            for a, b in zip(m_a.state_dict().values(), m_b.state_dict().values()):
                assert torch.equal(a, b)

    def test_constant_metric_decays_lr_each_stale_epoch(self, train_root, tmp_path):
        # min_delta too large to ever register improvement after the first
        # epoch; with patience 1 the rate then shrinks by exp(-alpha) per epoch
        out = tmp_path / "decay"
        cfg = fit_config(train_root, out, epochs=4, min_delta=1e9, patience=1)
        fit(cfg)
        rows = read_history(out)
        for k, row in enumerate(rows):
            want = cfg.lr0 * math.exp(-cfg.lr_alpha * k)
            got = float(row["lr"])
            assert abs(got - want) / want < 1e-6, f"epoch {k}: {got} != {want}"

    def test_no_validation_split_falls_back_to_train_means(self, train_root,
                                                           tmp_path):
        out = tmp_path / "noval"
        fit(fit_config(train_root, out, epochs=1, val_fraction=0.0))
        row = read_history(out)[0]
        assert abs(float(row["total"]) - float(row["val_total"])) < 1e-6
