"""Command-line interface.

Subcommands: ``train``, ``eval``, ``infer``, ``synth-preview``. Every
config field is exposed as a ``--flag`` (value syntax identical to the
config file); precedence is defaults < --config file < flags. Exit codes:
0 success, 1 runtime failure, 2 bad usage or bad config.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .dataset import (DatasetError, attach_rois, load_dataset, load_image,
                      load_mask)
from .evaluation import emit_report
from .inference import batch_infer, infer, write_result, write_scores_csv
from .networks import build_bundle
from .synth import make_triplet
from .trainer import fit, load_checkpoint, synth_params_from_config

_FIELD_HELP = {
    "data_root": "dataset root containing train/ and test/",
    "roi_dir": "region-of-interest mask tree (default: <data_root>/roi if present)",
    "out_dir": "directory for checkpoints, logs, and reports",
    "resolution": "working resolution; images are resized to this square size",
    "epochs": "number of training epochs",
    "lr0": "initial learning rate",
    "lr_alpha": "learning-rate decay exponent applied on plateau",
    "patience": "epochs without improvement before a decay event",
    "ablation_case": "segmentation loss variant 1..4 (2 = ROI-gated focal)",
    "seed": "run seed (GRD_SEED env var applies when unset here and in the file)",
    "tau": "localization threshold on the smoothed heatmap",
    "smooth_kernel": "odd mean-filter kernel applied to the heatmap",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        default = f.default if f.default is not MISSING else None
        if isinstance(default, bool):
            default = "true" if default else "false"
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            metavar=f.type.upper() if isinstance(f.type, str) else "VALUE",
            default=argparse.SUPPRESS,
            help=_FIELD_HELP.get(f.name, f"config field (default: {default})"),
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {name[len("cfg_"):]: value
                 for name, value in vars(args).items()
                 if name.startswith("cfg_")}
    return parse_config(getattr(args, "config", None), overrides)


def _write_snapshot(cfg: RunConfig) -> None:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(serialize_config(cfg), encoding="utf-8")


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    result = fit(cfg, resume_from=args.resume)
    print(f"training done: last checkpoint {result.last_path}")
    if result.best_path is not None:
        print(f"best checkpoint {result.best_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    bundle = build_bundle(cfg)
    load_checkpoint(args.checkpoint, bundle, cfg)
    index = load_dataset(cfg.data_root, args.split, cfg.resolution, cfg.channels)
    roi_dir = cfg.roi_dir or (
        str(Path(cfg.data_root) / "roi")
        if (Path(cfg.data_root) / "roi").is_dir() else "")
    if roi_dir:
        index = attach_rois(index, roi_dir)
    records = batch_infer(bundle, index, cfg.tau, cfg.smooth_kernel,
                          cfg.score_within_roi)
    _write_snapshot(cfg)
    out_dir = Path(cfg.out_dir)
    history = args.history
    if history is None:
        sibling = Path(args.checkpoint).parent / "history.csv"
        history = str(sibling) if sibling.is_file() else None
    written = emit_report(records, out_dir, history_csv=history, split=args.split)
    write_scores_csv(records, out_dir / "scores.csv")
    for path in written:
        print(f"wrote {path}")
    print(f"wrote {out_dir / 'scores.csv'}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    bundle = build_bundle(cfg)
    load_checkpoint(args.checkpoint, bundle, cfg)
    image = load_image(args.image, cfg.resolution, cfg.channels)
    roi = load_mask(args.roi, cfg.resolution, strict=True) if args.roi else None
    result = infer(bundle, image, roi, cfg.tau, cfg.smooth_kernel,
                   cfg.score_within_roi)
    _write_snapshot(cfg)
    out_dir = Path(cfg.out_dir)
    stem = Path(args.image).stem
    written = write_result(result, out_dir, stem, overlay=args.overlay)
    with open(out_dir / f"{stem}_score.csv", "w", encoding="utf-8") as fh:
        fh.write("image,score\n")
        fh.write(f"{args.image},{result.score:.6f}\n")
    for path in written:
        print(f"wrote {path}")
    print(f"anomaly score: {result.score:.6f}")
    return 0


def _cmd_synth_preview(args: argparse.Namespace) -> int:
    from PIL import Image

    cfg = _config_from_args(args)
    res = cfg.resolution
    base = None
    if cfg.data_root:
        try:
            index = load_dataset(cfg.data_root, "train", res, cfg.channels)
            base = load_image(index.entries[0].image_path, res, cfg.channels)
        except DatasetError:
            base = None
    if base is None:
        # neutral ramp canvas so previews work without a dataset
        ramp = np.linspace(0.35, 0.65, res, dtype=np.float32)
        base = np.repeat(ramp[None, :, None], res, axis=0)
        base = np.repeat(base, cfg.channels, axis=2)
    roi = np.ones((res, res), dtype=np.float32)
    params = synth_params_from_config(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_snapshot(cfg)
    for i in range(args.n):
        triplet = make_triplet(base, roi, params, seed=cfg.seed + i)
        mask_rgb = np.repeat(triplet.mask[:, :, None], base.shape[2], axis=2)
        strip = np.concatenate((triplet.clean, triplet.corrupted, mask_rgb), axis=1)
        strip8 = (np.clip(strip, 0.0, 1.0) * 255.0).astype(np.uint8)
        if strip8.shape[2] == 1:
            strip8 = strip8[:, :, 0]
        path = out_dir / f"triplet_{i:03d}.png"
        Image.fromarray(strip8).save(path)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grdnet",
        description="Reconstructive-discriminative visual anomaly detection")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_train = sub.add_parser("train", help="train all networks on defect-free images")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p_eval.add_argument("--split", default="test", help="dataset split (default: test)")
    p_eval.add_argument("--history",
                        help="history.csv for loss curves (default: next to checkpoint)")
    p_eval.set_defaults(func=_cmd_eval)

    p_infer = sub.add_parser("infer", help="score one image and write heatmaps")
    _add_config_flags(p_infer)
    p_infer.add_argument("--checkpoint", required=True, help="checkpoint to load")
    p_infer.add_argument("--image", required=True, help="image file to score")
    p_infer.add_argument("--roi", help="optional region-of-interest mask file")
    p_infer.add_argument("--overlay", action="store_true",
                         help="also write a colored overlay image")
    p_infer.set_defaults(func=_cmd_infer)

    p_synth = sub.add_parser("synth-preview",
                             help="write example synthetic-defect triplets")
    _add_config_flags(p_synth)
    p_synth.add_argument("--n", type=int, default=4,
                         help="number of triplets to write (default: 4)")
    p_synth.set_defaults(func=_cmd_synth_preview)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
