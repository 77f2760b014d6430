"""Two-network training loop.

Each batch takes three isolated optimizer steps: the discriminator on real
vs reconstructed images, the generator plus second encoder on the weighted
reconstruction objective, and the segmenter on the ROI-aware focal
objective. The learning rate starts at ``lr0`` and multiplies by
``exp(-lr_alpha)`` whenever the validation metric fails to improve by
``min_delta`` for ``patience`` consecutive epochs.

All randomness (shuffling, augmentation angles, synthetic defects) derives
from the run seed through per-(epoch, item) seed sequences, so runs with
the same config reproduce exactly and resumed runs continue the same
streams.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash, serialize_config
from .dataset import (DatasetIndex, attach_rois, augment, load_dataset,
                      load_entry, split_train_val)
from .losses import (LossReport, LossWeights, contextual_loss,
                     discriminative_loss_variant, discriminator_loss,
                     encoder_loss, feature_match_loss, gan_loss,
                     weights_from_config)
from .networks import NetworkBundle, anomaly_probabilities, build_bundle
from .synth import SynthParams, make_triplet

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_metric: float = math.inf
    epochs_since_improvement: int = 0
    decay_events: int = 0


@dataclass
class Batch:
    clean: torch.Tensor       # B x C x H x W
    corrupted: torch.Tensor   # B x C x H x W
    mask: torch.Tensor        # B x 1 x H x W
    roi: torch.Tensor         # B x 1 x H x W


@dataclass
class Optimizers:
    generator: torch.optim.Adam
    discriminator: torch.optim.Adam
    segmenter: torch.optim.Adam

    def all(self):
        return (self.generator, self.discriminator, self.segmenter)

    def set_lr(self, lr: float) -> None:
        for opt in self.all():
            for group in opt.param_groups:
                group["lr"] = lr


@dataclass
class FitResult:
    best_path: Path | None
    last_path: Path
    history: list[dict]


def update_lr(state: TrainState, val_metric: float, alpha: float = 0.1,
              patience: int = 3, min_delta: float = 1e-4) -> TrainState:
    """Plateau step: decay lr by exp(-alpha) after ``patience`` stale epochs."""
    if state.best_metric - val_metric >= min_delta:
        return replace(state, best_metric=float(val_metric),
                       epochs_since_improvement=0)
    stale = state.epochs_since_improvement + 1
    if stale >= patience:
        return replace(state, lr=state.lr * math.exp(-alpha),
                       epochs_since_improvement=0,
                       decay_events=state.decay_events + 1)
    return replace(state, epochs_since_improvement=stale)


def make_optimizers(bundle: NetworkBundle, lr: float) -> Optimizers:
    betas = (0.5, 0.999)
    gen_params = list(bundle.generator.parameters()) + list(bundle.encoder2.parameters())
    return Optimizers(
        generator=torch.optim.Adam(gen_params, lr=lr, betas=betas),
        discriminator=torch.optim.Adam(bundle.discriminator.parameters(),
                                       lr=lr, betas=betas),
        segmenter=torch.optim.Adam(bundle.segmenter.parameters(), lr=lr, betas=betas),
    )


def _require_finite(value: float, name: str, where: str) -> None:
    if not math.isfinite(value):
        raise RuntimeError(f"non-finite {name} loss{where}")


def train_step(bundle: NetworkBundle, optimizers: Optimizers, batch: Batch,
               weights: LossWeights, ablation_case: int = 2,
               step_info: str = "") -> tuple[LossReport, float]:
    """One three-phase update; returns (loss report, discriminator loss)."""
    where = f" at {step_info}" if step_info else ""
    bundle.train()
    disc = bundle.discriminator

    recon, latent = bundle.generator(batch.corrupted)

    # phase 1: discriminator (reconstruction detached inside the loss)
    d_loss = discriminator_loss(disc, batch.clean, recon)
    _require_finite(d_loss.item(), "discriminator", where)
    optimizers.discriminator.zero_grad(set_to_none=True)
    d_loss.backward()
    optimizers.discriminator.step()

    # phase 2: generator + second encoder; discriminator weights frozen so
    # feature matching cannot push gradient into them
    for p in disc.parameters():
        p.requires_grad_(False)
    adv = feature_match_loss(disc, batch.clean, recon)
    con = contextual_loss(batch.clean, recon, weights.l1_weight, weights.ssim_weight)
    latent2 = bundle.encoder2(recon)
    enc = encoder_loss(latent, latent2)
    g_total = gan_loss(adv, con, enc, weights)
    _require_finite(g_total.item(), "generator", where)
    optimizers.generator.zero_grad(set_to_none=True)
    g_total.backward()
    optimizers.generator.step()
    for p in disc.parameters():
        p.requires_grad_(True)

    # phase 3: segmenter on (corrupted, reconstruction) with the
    # reconstruction treated as a constant input
    logits = bundle.segmenter(torch.cat((batch.corrupted, recon.detach()), dim=1))
    heat = anomaly_probabilities(logits)
    s_loss = discriminative_loss_variant(ablation_case, heat, batch.roi, batch.mask,
                                         weights.focal_gamma, weights.overlap_weight)
    _require_finite(s_loss.item(), "segmentation", where)
    optimizers.segmenter.zero_grad(set_to_none=True)
    s_loss.backward()
    optimizers.segmenter.step()

    adv_v, con_v, enc_v = adv.item(), con.item(), enc.item()
    gan_v = (weights.adv_weight * adv_v + weights.context_weight * con_v
             + weights.latent_weight * enc_v)
    focal_v = s_loss.item()
    report = LossReport(adv=adv_v, con=con_v, enc=enc_v, gan_total=gan_v,
                        focal=focal_v, total=gan_v + focal_v)
    return report, d_loss.item()


def _child_seed(*entropy: int) -> int:
    seq = np.random.SeedSequence(entropy=tuple(int(e) for e in entropy))
    return int(seq.generate_state(1)[0])


def _to_batch(triplets) -> Batch:
    clean = torch.from_numpy(np.stack([t.clean.transpose(2, 0, 1) for t in triplets]))
    corrupted = torch.from_numpy(
        np.stack([t.corrupted.transpose(2, 0, 1) for t in triplets]))
    mask = torch.from_numpy(np.stack([t.mask[None] for t in triplets]))
    roi = torch.from_numpy(np.stack([t.roi[None] for t in triplets]))
    return Batch(clean, corrupted, mask, roi)


def synth_params_from_config(cfg: TrainConfig) -> SynthParams:
    return SynthParams(
        period_exp_min=cfg.period_exp_min, period_exp_max=cfg.period_exp_max,
        threshold_q_low=cfg.threshold_q_low, threshold_q_high=cfg.threshold_q_high,
        opacity_min=cfg.opacity_min, opacity_max=cfg.opacity_max,
        p_clean=cfg.p_clean, octaves=cfg.octaves)


class _EntryCache:
    """Keeps decoded (image, roi, gt) arrays in memory up to a byte budget."""

    def __init__(self, index: DatasetIndex, budget_bytes: int = 512 << 20):
        self.index = index
        self.budget = budget_bytes
        self.used = 0
        self.store: dict[str, tuple] = {}

    def get(self, entry):
        hit = self.store.get(entry.image_path)
        if hit is not None:
            return hit
        data = load_entry(entry, self.index.resolution, self.index.channels)
        size = sum(a.nbytes for a in data)
        if self.used + size <= self.budget:
            self.store[entry.image_path] = data
            self.used += size
        return data


def validate(bundle: NetworkBundle, val_batches: list[Batch],
             weights: LossWeights, ablation_case: int) -> dict[str, float]:
    """Loss means over fixed validation batches; never updates anything."""
    bundle.eval()
    sums = {"val_adv": 0.0, "val_con": 0.0, "val_enc": 0.0,
            "val_focal": 0.0, "val_total": 0.0}
    count = 0
    with torch.no_grad():
        for batch in val_batches:
            n = batch.clean.shape[0]
            recon, latent = bundle.generator(batch.corrupted)
            adv = feature_match_loss(bundle.discriminator, batch.clean, recon).item()
            con = contextual_loss(batch.clean, recon, weights.l1_weight,
                                  weights.ssim_weight).item()
            enc = encoder_loss(latent, bundle.encoder2(recon)).item()
            logits = bundle.segmenter(torch.cat((batch.corrupted, recon), dim=1))
            focal = discriminative_loss_variant(
                ablation_case, anomaly_probabilities(logits), batch.roi, batch.mask,
                weights.focal_gamma, weights.overlap_weight).item()
            gan_v = (weights.adv_weight * adv + weights.context_weight * con
                     + weights.latent_weight * enc)
            sums["val_adv"] += adv * n
            sums["val_con"] += con * n
            sums["val_enc"] += enc * n
            sums["val_focal"] += focal * n
            sums["val_total"] += (gan_v + focal) * n
            count += n
    bundle.train()
    if count == 0:
        return {k: math.nan for k in sums}
    return {k: v / count for k, v in sums.items()}


def save_checkpoint(path: str | Path, bundle: NetworkBundle,
                    optimizers: Optimizers | None, state: TrainState,
                    cfg: TrainConfig) -> Path:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash(cfg),
        "config_text": serialize_config(cfg),
        "models": {
            "generator": bundle.generator.state_dict(),
            "encoder2": bundle.encoder2.state_dict(),
            "discriminator": bundle.discriminator.state_dict(),
            "segmenter": bundle.segmenter.state_dict(),
        },
        "optimizers": None if optimizers is None else {
            "generator": optimizers.generator.state_dict(),
            "discriminator": optimizers.discriminator.state_dict(),
            "segmenter": optimizers.segmenter.state_dict(),
        },
        "train_state": asdict(state),
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, bundle: NetworkBundle, cfg: TrainConfig,
                    optimizers: Optimizers | None = None,
                    restore_rng: bool = False) -> TrainState:
    """Restore parameters (and optionally optimizers/RNG); returns the state.

    Refuses checkpoints whose architecture hash differs from ``cfg``.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as exc:
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise RuntimeError(
            f"unsupported checkpoint format version {version!r} in {path}")
    expected = config_hash(cfg)
    found = payload.get("config_hash")
    if found != expected:
        raise RuntimeError(
            f"checkpoint config hash mismatch for {path}: checkpoint was built "
            f"with {found}, current config hashes to {expected}")
    bundle.generator.load_state_dict(payload["models"]["generator"])
    bundle.encoder2.load_state_dict(payload["models"]["encoder2"])
    bundle.discriminator.load_state_dict(payload["models"]["discriminator"])
    bundle.segmenter.load_state_dict(payload["models"]["segmenter"])
    if optimizers is not None and payload["optimizers"] is not None:
        optimizers.generator.load_state_dict(payload["optimizers"]["generator"])
        optimizers.discriminator.load_state_dict(payload["optimizers"]["discriminator"])
        optimizers.segmenter.load_state_dict(payload["optimizers"]["segmenter"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"])
    return TrainState(**payload["train_state"])


_HISTORY_FIELDS = ("epoch", "lr", "adv", "con", "enc", "focal", "total",
                   "val_adv", "val_con", "val_enc", "val_focal", "val_total")


def _append_history(path: Path, row: dict | None, new_file: bool) -> None:
    mode = "w" if new_file else "a"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        if new_file:
            fh.write(",".join(_HISTORY_FIELDS) + "\n")
        if row is not None:
            fh.write(",".join(_format_cell(row[k]) for k in _HISTORY_FIELDS) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{value:.8g}"


def fit(cfg: TrainConfig, resume_from: str | Path | None = None) -> FitResult:
    """Train per config; writes checkpoints, history, and a config snapshot.

    Returns paths to the best (lowest plateau metric) and last checkpoints
    plus the in-memory history rows for the epochs run by this call.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(serialize_config(cfg), encoding="utf-8")

    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)

    index = load_dataset(cfg.data_root, "train", cfg.resolution, cfg.channels)
    roi_dir = cfg.roi_dir
    if not roi_dir:
        default_roi = Path(cfg.data_root) / "roi"
        roi_dir = str(default_roi) if default_roi.is_dir() else ""
    if roi_dir:
        index = attach_rois(index, roi_dir)
    train_index, val_index = split_train_val(index, cfg.val_fraction, cfg.seed)

    bundle = build_bundle(cfg)
    optimizers = make_optimizers(bundle, cfg.lr0)
    state = TrainState(lr=cfg.lr0)
    if resume_from is not None:
        state = load_checkpoint(resume_from, bundle, cfg, optimizers,
                                restore_rng=True)
        optimizers.set_lr(state.lr)

    weights = weights_from_config(cfg)
    params = synth_params_from_config(cfg)
    cache = _EntryCache(train_index)

    # validation triplets are fixed for the whole run: one seed per item
    val_batches: list[Batch] = []
    if len(val_index):
        triplets = []
        for i, entry in enumerate(val_index.entries):
            image, roi, _ = load_entry(entry, cfg.resolution, cfg.channels)
            triplets.append(make_triplet(image, roi, params,
                                         _child_seed(cfg.seed, 1 << 20, i)))
        for lo in range(0, len(triplets), cfg.batch_size):
            val_batches.append(_to_batch(triplets[lo:lo + cfg.batch_size]))

    history_path = out_dir / "history.csv"
    last_path = out_dir / "ckpt_last"
    best_path = out_dir / "ckpt_best"
    new_history = resume_from is None or not history_path.exists()
    if new_history:
        _append_history(history_path, None, new_file=True)

    if cfg.epochs <= state.epoch:
        save_checkpoint(last_path, bundle, optimizers, state, cfg)
        return FitResult(best_path if best_path.exists() else None, last_path, [])

    history_rows: list[dict] = []
    best_saved = state.best_metric
    n_train = len(train_index.entries)
    for epoch in range(state.epoch, cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=(cfg.seed, 40, epoch))).permutation(n_train)
        sums = dict.fromkeys(("adv", "con", "enc", "focal", "total", "disc"), 0.0)
        steps = 0
        for step, lo in enumerate(range(0, n_train, cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            triplets = []
            for j in rows:
                entry = train_index.entries[int(j)]
                image, roi, gt = cache.get(entry)
                if cfg.augment:
                    image, roi, gt = augment(image, roi, gt,
                                             _child_seed(cfg.seed, 50, epoch, int(j)))
                triplets.append(make_triplet(image, roi, params,
                                             _child_seed(cfg.seed, 60, epoch, int(j))))
            batch = _to_batch(triplets)
            report, d_loss = train_step(bundle, optimizers, batch, weights,
                                        cfg.ablation_case,
                                        step_info=f"epoch {epoch} step {step}")
            sums["adv"] += report.adv
            sums["con"] += report.con
            sums["enc"] += report.enc
            sums["focal"] += report.focal
            sums["total"] += report.total
            sums["disc"] += d_loss
            steps += 1
        means = {k: v / steps for k, v in sums.items()}

        if val_batches:
            val_metrics = validate(bundle, val_batches, weights, cfg.ablation_case)
        else:
            gan_mean = means["total"] - means["focal"]
            val_metrics = {"val_adv": means["adv"], "val_con": means["con"],
                           "val_enc": means["enc"], "val_focal": means["focal"],
                           "val_total": gan_mean + means["focal"]}

        metric = val_metrics[cfg.plateau_metric]
        state = replace(state, epoch=epoch + 1)
        state = update_lr(state, metric, cfg.lr_alpha, cfg.patience, cfg.min_delta)
        optimizers.set_lr(state.lr)

        row = {"epoch": epoch, "lr": state.lr, "adv": means["adv"],
               "con": means["con"], "enc": means["enc"], "focal": means["focal"],
               "total": means["total"], **val_metrics}
        _append_history(history_path, row, new_file=False)
        history_rows.append(row)

        save_checkpoint(last_path, bundle, optimizers, state, cfg)
        if state.best_metric < best_saved:
            best_saved = state.best_metric
            save_checkpoint(best_path, bundle, optimizers, state, cfg)

    return FitResult(best_path if best_path.exists() else None,
                     last_path, history_rows)
