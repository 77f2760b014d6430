"""Run configuration: defaults, file parsing, validation, serialization.

Config files are flat ``key = value`` text. Blank lines and ``#`` comments
are ignored. Precedence is defaults < file < explicit overrides. The
environment variable ``GRD_SEED`` fills in the seed only when neither the
file nor an override sets one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or out-of-range values."""


BOTTLENECK_CHOICES = ("conv", "dense")
PLATEAU_METRIC_CHOICES = ("val_adv", "val_con", "val_enc", "val_focal", "val_total")


@dataclass
class TrainConfig:
    # data
    data_root: str = ""
    roi_dir: str = ""  # empty -> <data_root>/roi when present, else all-ones ROIs
    out_dir: str = "runs/default"
    resolution: int = 256
    channels: int = 3
    val_fraction: float = 0.1
    augment: bool = True

    # optimization
    epochs: int = 200
    batch_size: int = 8
    lr0: float = 1e-4
    lr_alpha: float = 0.1
    patience: int = 3
    min_delta: float = 1e-4
    plateau_metric: str = "val_con"
    seed: int = 0
    deterministic: bool = False

    # architecture
    bottleneck: str = "conv"
    base_width: int = 32
    latent_channels: int = 32
    latent_dim: int = 2048
    unet_base_width: int = 32
    unet_depth: int = 4
    ablation_case: int = 2

    # loss weights
    l1_weight: float = 1.0
    ssim_weight: float = 1.0
    adv_weight: float = 1.0
    context_weight: float = 50.0
    latent_weight: float = 1.0
    focal_gamma: float = 2.0
    overlap_weight: float = 0.5

    # defect synthesis
    p_clean: float = 0.1
    opacity_min: float = 0.2
    opacity_max: float = 1.0
    threshold_q_low: float = 0.6
    threshold_q_high: float = 0.95
    period_exp_min: int = 1
    period_exp_max: int = 5
    octaves: int = 1


@dataclass
class RunConfig(TrainConfig):
    # inference / post-processing
    tau: float = 0.5
    smooth_kernel: int = 21
    score_within_roi: bool = False


_FIELDS = {f.name: f for f in fields(RunConfig)}

# Fields that change the shape of the networks. Checkpoints carry a hash of
# exactly these, so a saved model refuses to load into a different topology
# while remaining loadable across unrelated knob changes (epochs, paths, ...).
_ARCH_FIELDS = (
    "resolution",
    "channels",
    "bottleneck",
    "base_width",
    "latent_channels",
    "latent_dim",
    "unet_base_width",
    "unet_depth",
)


def _convert(key: str, raw: str):
    f = _FIELDS[key]
    text = raw.strip()
    if f.type in ("bool", bool):
        low = text.lower()
        if low == "true":
            return True
        if low == "false":
            return False
        raise ConfigError(f"config key '{key}' expects true/false, got '{raw}'")
    try:
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key '{key}' expects {f.type}, got '{raw}'") from None
    return text


def _check_range(cfg: RunConfig) -> None:
    def req(cond: bool, key: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"config key '{key}' out of range: {msg}")

    req(cfg.resolution >= 16, "resolution", "must be >= 16")
    req(cfg.channels in (1, 3), "channels", "must be 1 or 3")
    req(0.0 <= cfg.val_fraction < 1.0, "val_fraction", "must lie in [0, 1)")
    req(cfg.epochs >= 0, "epochs", "must be >= 0")
    req(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    req(cfg.lr0 > 0.0, "lr0", "must be > 0")
    req(cfg.lr_alpha > 0.0, "lr_alpha", "must be > 0")
    req(cfg.patience >= 1, "patience", "must be >= 1")
    req(cfg.min_delta >= 0.0, "min_delta", "must be >= 0")
    req(cfg.plateau_metric in PLATEAU_METRIC_CHOICES, "plateau_metric",
        f"must be one of {PLATEAU_METRIC_CHOICES}")
    req(cfg.bottleneck in BOTTLENECK_CHOICES, "bottleneck",
        f"must be one of {BOTTLENECK_CHOICES}")
    req(cfg.base_width >= 1, "base_width", "must be >= 1")
    req(cfg.latent_channels >= 1, "latent_channels", "must be >= 1")
    req(cfg.latent_dim >= 1, "latent_dim", "must be >= 1")
    req(cfg.unet_base_width >= 1, "unet_base_width", "must be >= 1")
    req(cfg.unet_depth >= 1, "unet_depth", "must be >= 1")
    req(cfg.ablation_case in (1, 2, 3, 4), "ablation_case", "must be 1..4")
    for key in ("l1_weight", "ssim_weight", "adv_weight", "context_weight",
                "latent_weight"):
        req(getattr(cfg, key) >= 0.0, key, "must be >= 0")
    req(cfg.focal_gamma >= 0.0, "focal_gamma", "must be >= 0")
    req(0.0 <= cfg.overlap_weight <= 1.0, "overlap_weight", "must lie in [0, 1]")
    req(0.0 <= cfg.p_clean <= 1.0, "p_clean", "must lie in [0, 1]")
    req(0.0 < cfg.opacity_min <= cfg.opacity_max <= 1.0, "opacity_min",
        "need 0 < opacity_min <= opacity_max <= 1")
    req(0.0 <= cfg.threshold_q_low < cfg.threshold_q_high <= 1.0, "threshold_q_low",
        "need 0 <= threshold_q_low < threshold_q_high <= 1")
    req(1 <= cfg.period_exp_min <= cfg.period_exp_max, "period_exp_min",
        "need 1 <= period_exp_min <= period_exp_max")
    req(1 <= cfg.octaves <= 4, "octaves", "must be 1..4")
    req(0.0 <= cfg.tau <= 1.0, "tau", "must lie in [0, 1]")
    req(cfg.smooth_kernel >= 1 and cfg.smooth_kernel % 2 == 1, "smooth_kernel",
        "must be a positive odd integer")


def parse_config(path: str | None = None,
                 overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, then overrides.

    ``overrides`` maps field names to raw string values (as given on a
    command line). Unknown keys, malformed values, and out-of-range values
    raise ConfigError naming the offending key.
    """
    values: dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(
                    f"{path}:{lineno}: expected 'key = value', got '{text}'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _convert(key, str(raw))
    if "seed" not in values and os.environ.get("GRD_SEED"):
        try:
            values["seed"] = int(os.environ["GRD_SEED"])
        except ValueError:
            raise ConfigError(
                f"GRD_SEED must be an integer, got '{os.environ['GRD_SEED']}'"
            ) from None
    cfg = RunConfig(**values)
    _check_range(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Render a config as flat key = value text; parsing it back is exact."""
    out = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        out.append(f"{f.name} = {text}")
    return "\n".join(out) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    """Hash of the architecture-shaping fields, for checkpoint validation."""
    blob = ";".join(f"{k}={getattr(cfg, k)}" for k in _ARCH_FIELDS)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def validate_config(cfg: RunConfig) -> RunConfig:
    """Re-run range checks on a config built in code rather than parsed."""
    _check_range(cfg)
    return cfg


def replace(cfg: RunConfig, **changes) -> RunConfig:
    cfg = dataclasses.replace(cfg, **changes)
    _check_range(cfg)
    return cfg
