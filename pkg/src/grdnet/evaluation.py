"""Detection metrics and report emission.

Image-level AUROC ranks per-image anomaly scores against binary labels;
pixel-level AUROC pools every pixel of every test heatmap against the
ground-truth masks (defect-free images contribute all-zero masks). Both
use mid-rank tie handling, which matches pairwise comparison counting
with half credit for ties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. one-class AUROC)."""


@dataclass
class EvalRecord:
    """One evaluated test image."""

    image_id: str
    label: int                       # 0 good, 1 defective
    score: float
    class_name: str = "good"
    heat_smooth: np.ndarray | None = None
    gt_mask: np.ndarray | None = None
    roi: np.ndarray | None = None
    error: str | None = field(default=None)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via mid-ranks; ties get half credit."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"got {scores.size} scores but {labels.size} labels")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined: {n_pos} positive and {n_neg} negative samples")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(records: list[EvalRecord]) -> float:
    """Pooled pixel AUROC over all records carrying a smoothed heatmap.

    Records without a ground-truth mask count as entirely defect-free.
    """
    heats, masks = [], []
    for rec in records:
        if rec.error is not None:
            continue
        if rec.heat_smooth is None:
            raise ValueError(f"record {rec.image_id} has no heatmap")
        heats.append(np.asarray(rec.heat_smooth, dtype=np.float64).ravel())
        gt = rec.gt_mask
        if gt is None:
            gt = np.zeros_like(rec.heat_smooth)
        masks.append((np.asarray(gt) > 0.5).astype(np.int64).ravel())
    if not heats:
        raise UndefinedMetricError("no evaluable records")
    return auroc(np.concatenate(heats), np.concatenate(masks))


def accuracy(scores, labels, threshold: float) -> float:
    """Fraction of images classified correctly at score > threshold."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise ValueError("no scores given")
    predictions = (scores > threshold).astype(np.int64)
    return float((predictions == labels).mean())


def best_threshold(scores, labels) -> tuple[float, float]:
    """Exhaustive threshold search maximizing accuracy.

    Candidates are midpoints between adjacent distinct scores plus one
    candidate below the minimum and one above the maximum.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    uniq = np.unique(scores)
    candidates = [uniq[0] - 1.0, uniq[-1] + 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq[:-1], uniq[1:])]
    best = (candidates[0], -1.0)
    for theta in candidates:
        acc = accuracy(scores, labels, theta)
        if acc > best[1]:
            best = (theta, acc)
    return best


def _subset_metrics(records: list[EvalRecord]) -> dict:
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    row = {"n_images": len(records), "n_defects": int(labels.sum())}
    try:
        row["auroc_image"] = f"{auroc(scores, labels):.6f}"
    except UndefinedMetricError:
        row["auroc_image"] = "n/a"
    try:
        row["auroc_pixel"] = f"{pixel_auroc(records):.6f}"
    except (UndefinedMetricError, ValueError):
        row["auroc_pixel"] = "n/a"
    if len(set(labels.tolist())) > 1:
        _, acc = best_threshold(scores, labels)
        row["accuracy"] = f"{acc:.6f}"
    else:
        row["accuracy"] = "n/a"
    return row


def emit_report(records: list[EvalRecord], out_dir: str | Path,
                history_csv: str | Path | None = None,
                split: str = "test") -> list[Path]:
    """Write metrics.csv, a score histogram, and optional loss curves.

    Rows: one overall, then one per defect class (each pooled with the
    defect-free images). Failed records are counted but excluded from
    metrics. Output bytes are deterministic for identical inputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    ok = [r for r in records if r.error is None]
    failed = [r for r in records if r.error is not None]
    if not ok:
        raise ValueError("no successfully evaluated records to report")

    goods = [r for r in ok if r.label == 0]
    classes = sorted({r.class_name for r in ok if r.label == 1})

    metrics_path = out_dir / "metrics.csv"
    fields = ["split", "class", "auroc_image", "auroc_pixel", "accuracy",
              "n_images", "n_defects", "n_failed"]
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        overall = _subset_metrics(ok)
        overall.update(split=split, **{"class": "all", "n_failed": len(failed)})
        writer.writerow(overall)
        for cls in classes:
            subset = goods + [r for r in ok if r.class_name == cls and r.label == 1]
            row = _subset_metrics(subset)
            row.update(split=split, **{"class": cls, "n_failed": 0})
            writer.writerow(row)
    written.append(metrics_path)

    written.append(_plot_histogram(ok, out_dir / "score_histogram.png"))
    if history_csv is not None and Path(history_csv).is_file():
        curve = _plot_history(Path(history_csv), out_dir / "loss_curves.png")
        if curve is not None:
            written.append(curve)
    return written


def _savefig(fig, path: Path) -> Path:
    # strip timestamps so identical inputs give identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    import matplotlib.pyplot as plt
    plt.close(fig)
    return path


def _plot_histogram(records: list[EvalRecord], path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    good = [r.score for r in records if r.label == 0]
    bad = [r.score for r in records if r.label == 1]
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 41)
    if good:
        ax.hist(good, bins=bins, alpha=0.6, label="good", color="tab:green")
    if bad:
        ax.hist(bad, bins=bins, alpha=0.6, label="defective", color="tab:red")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    return _savefig(fig, path)


def _plot_history(history_csv: Path, path: Path) -> Path | None:
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    with open(history_csv, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("con", "focal", "total", "val_con", "val_focal", "val_total"):
        if key in rows[0]:
            style = "--" if key.startswith("val_") else "-"
            ax.plot(epochs, [float(r[key]) for r in rows], style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _savefig(fig, path)
