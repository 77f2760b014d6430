"""Inference: reconstruct, segment, smooth, score, localize.

The anomaly heatmap is the segmenter's anomaly-class probability over the
(input, reconstruction) stack. It is smoothed with a mean filter so the
image-level score (its maximum) reflects a neighborhood rather than a
single pixel, then thresholded and gated by the ROI for localization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetIndex, load_entry
from .evaluation import EvalRecord
from .networks import NetworkBundle, forward_pipeline


@dataclass
class AnomalyResult:
    reconstruction: np.ndarray    # H x W x C float32 in [0, 1]
    heat_raw: np.ndarray          # H x W float32 in [0, 1]
    heat_smooth: np.ndarray       # H x W float32 in [0, 1]
    score: float
    localization: np.ndarray      # H x W float32 in {0, 1}


def smooth(heat: np.ndarray, kernel: int = 21) -> np.ndarray:
    """Mean-filter a heatmap with an odd square kernel, reflect padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"smoothing kernel must be a positive odd integer, got {kernel}")
    h, w = heat.shape
    if kernel > min(h, w):
        raise ValueError(f"kernel {kernel} exceeds heatmap size {h}x{w}")
    if kernel == 1:
        return heat.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float32))[None, None]
    pad = kernel // 2
    t = F.pad(t, (pad, pad, pad, pad), mode="reflect")
    out = F.avg_pool2d(t, kernel, stride=1)
    return out[0, 0].numpy()


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]


def infer(bundle: NetworkBundle, image: np.ndarray,
          roi: np.ndarray | None = None, tau: float = 0.5,
          smooth_kernel: int = 21, score_within_roi: bool = False) -> AnomalyResult:
    """Run the full pipeline on one image.

    The score is the maximum of the smoothed heatmap over the whole frame
    (or over the ROI when ``score_within_roi`` is set); the localization
    mask is the smoothed heatmap thresholded at ``tau`` and intersected
    with the ROI.
    """
    for m in bundle.modules():
        m.eval()
    x = _to_tensor(image.astype(np.float32, copy=False))
    with torch.no_grad():
        recon, _, _, heat = forward_pipeline(bundle, x)
    recon_np = recon[0].numpy().transpose(1, 2, 0)
    heat_raw = heat[0, 0].numpy()
    heat_smooth = smooth(heat_raw, smooth_kernel)

    if roi is None:
        roi_arr = np.ones_like(heat_smooth)
    else:
        roi_arr = (np.asarray(roi) > 0.5).astype(np.float32)
    if score_within_roi:
        inside = heat_smooth[roi_arr > 0.5]
        score = float(inside.max()) if inside.size else 0.0
    else:
        score = float(heat_smooth.max())
    localization = ((heat_smooth > tau).astype(np.float32) * roi_arr)
    return AnomalyResult(recon_np, heat_raw, heat_smooth, score, localization)


def batch_infer(bundle: NetworkBundle, index: DatasetIndex, tau: float = 0.5,
                smooth_kernel: int = 21,
                score_within_roi: bool = False) -> list[EvalRecord]:
    """Evaluate every index entry; per-item failures become failed records."""
    records: list[EvalRecord] = []
    for entry in index.entries:
        label = 1 if entry.is_defect else 0
        try:
            image, roi, gt = load_entry(entry, index.resolution, index.channels)
            result = infer(bundle, image, roi, tau, smooth_kernel, score_within_roi)
            records.append(EvalRecord(
                image_id=entry.image_path, label=label, score=result.score,
                class_name=entry.label, heat_smooth=result.heat_smooth,
                gt_mask=gt if entry.mask_path is not None else None, roi=roi))
        except Exception as exc:  # keep going; the report shows the failure
            records.append(EvalRecord(image_id=entry.image_path, label=label,
                                      score=float("nan"), class_name=entry.label,
                                      error=str(exc)))
    return records


def _save_gray(path: Path, arr: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(arr * 255.0, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def write_result(result: AnomalyResult, out_dir: str | Path, stem: str,
                 overlay: bool = False) -> list[Path]:
    """Write heatmap and localization PNGs (optional overlay) for one image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    heat_path = out_dir / f"{stem}_heatmap.png"
    _save_gray(heat_path, result.heat_smooth)
    written.append(heat_path)
    loc_path = out_dir / f"{stem}_localization.png"
    _save_gray(loc_path, result.localization)
    written.append(loc_path)
    if overlay:
        from PIL import Image
        import matplotlib.cm as cm

        base = result.reconstruction
        if base.shape[2] == 1:
            base = np.repeat(base, 3, axis=2)
        colored = cm.jet(result.heat_smooth)[..., :3]
        blend = np.clip(0.6 * base + 0.4 * colored, 0.0, 1.0)
        overlay_path = out_dir / f"{stem}_overlay.png"
        Image.fromarray((blend * 255.0).astype(np.uint8)).save(overlay_path)
        written.append(overlay_path)
    return written


def write_scores_csv(records: list[EvalRecord], path: str | Path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "class", "label", "score", "error"])
        for rec in records:
            writer.writerow([rec.image_id, rec.class_name, rec.label,
                             "" if np.isnan(rec.score) else f"{rec.score:.6f}",
                             rec.error or ""])
