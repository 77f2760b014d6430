"""Training losses.

Reconstruction side: contextual (L1 + structural dissimilarity), feature
matching against the discriminator, latent consistency between the two
encoders, and their weighted sum. Segmentation side: focal loss on the
predicted anomaly probability, optionally restricted to a region of
interest by plain multiplication, plus an overlap penalty that discourages
predictions outside the ROI. Four selectable combinations of the
segmentation terms are exposed through ``discriminative_loss_variant``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    l1_weight: float = 1.0
    ssim_weight: float = 1.0
    adv_weight: float = 1.0
    context_weight: float = 50.0
    latent_weight: float = 1.0
    focal_gamma: float = 2.0
    overlap_weight: float = 0.5


@dataclass
class LossReport:
    """Scalar loss values for one step or one epoch (means over batches)."""

    adv: float
    con: float
    enc: float
    gan_total: float
    focal: float
    total: float


_WINDOW_CACHE: dict[tuple, torch.Tensor] = {}


def _gaussian_window(size: int, sigma: float, channels: int,
                     dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    key = (size, sigma, channels, dtype, str(device))
    win = _WINDOW_CACHE.get(key)
    if win is None:
        coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
        g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
        g = g / g.sum()
        win = (g[:, None] * g[None, :]).expand(channels, 1, size, size).contiguous()
        _WINDOW_CACHE[key] = win
    return win


def ssim(x: torch.Tensor, y: torch.Tensor,
         window_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean structural similarity over the valid window region.

    Gaussian-weighted local statistics, stability constants for unit data
    range. Symmetric in its arguments; ssim(x, x) == 1 exactly.
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if y.dim() == 3:
        y = y.unsqueeze(0)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-2] < window_size or x.shape[-1] < window_size:
        raise ValueError(
            f"inputs {tuple(x.shape[-2:])} smaller than SSIM window {window_size}")

    channels = x.shape[1]
    win = _gaussian_window(window_size, sigma, channels, x.dtype, x.device)
    # valid convolution: statistics only where the window fits entirely
    mu_x = F.conv2d(x, win, groups=channels)
    mu_y = F.conv2d(y, win, groups=channels)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_x = F.conv2d(x * x, win, groups=channels) - mu_xx
    sigma_y = F.conv2d(y * y, win, groups=channels) - mu_yy
    sigma_xy = F.conv2d(x * y, win, groups=channels) - mu_xy

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    ssim_map = ((2.0 * mu_xy + c1) * (2.0 * sigma_xy + c2)) / (
        (mu_xx + mu_yy + c1) * (sigma_x + sigma_y + c2))
    return ssim_map.mean()


def contextual_loss(clean: torch.Tensor, recon: torch.Tensor,
                    l1_weight: float = 1.0, ssim_weight: float = 1.0) -> torch.Tensor:
    """l1_weight * mean|x - x_hat| + ssim_weight * (1 - ssim(x, x_hat))."""
    return (l1_weight * F.l1_loss(recon, clean)
            + ssim_weight * (1.0 - ssim(clean, recon)))


def discriminator_loss(disc, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy pushing real scores to 1 and fake scores to 0.

    The fake batch is detached: this loss trains the discriminator only.
    """
    score_real = disc(real)[0].clamp(EPS, 1.0 - EPS)
    score_fake = disc(fake.detach())[0].clamp(EPS, 1.0 - EPS)
    return -(torch.log(score_real).mean() + torch.log(1.0 - score_fake).mean())


def feature_match_loss(disc, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Squared distance between discriminator features of real and fake.

    Real features are detached targets, so the generator is pulled toward
    feature statistics the discriminator currently considers real.
    """
    feat_real = disc(real)[1].detach()
    feat_fake = disc(fake)[1]
    return F.mse_loss(feat_fake, feat_real)


def adversarial_losses(disc, real: torch.Tensor,
                       fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator BCE loss, generator feature-matching loss)."""
    return discriminator_loss(disc, real, fake), feature_match_loss(disc, real, fake)


def encoder_loss(latent: torch.Tensor, latent_recon: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between the two latent codes."""
    return F.mse_loss(latent_recon, latent)


def gan_loss(adv, con, enc, weights: LossWeights):
    """Weighted sum of the three reconstruction-side terms."""
    return (weights.adv_weight * adv
            + weights.context_weight * con
            + weights.latent_weight * enc)


def focal_loss(prob: torch.Tensor, target: torch.Tensor,
               gamma: float = 2.0) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t) over all pixels.

    ``prob`` is the predicted anomaly probability; p_t is ``prob`` where the
    target is 1 and ``1 - prob`` where it is 0. Probabilities are clamped
    to [eps, 1 - eps] before the log. gamma = 0 reduces to cross-entropy.
    """
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(target.shape)}")
    p_t = torch.where(target > 0.5, prob, 1.0 - prob).clamp(EPS, 1.0 - EPS)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def intersect_roi(heat: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
    """Zero the heatmap outside the region of interest."""
    if heat.shape != roi.shape:
        raise ValueError(f"shape mismatch: {tuple(heat.shape)} vs {tuple(roi.shape)}")
    return heat * roi


def total_loss(gan_total, intersected: torch.Tensor, mask: torch.Tensor,
               gamma: float = 2.0):
    """Reconstruction objective plus focal loss on the ROI-gated heatmap."""
    return gan_total + focal_loss(intersected, mask, gamma)


def _per_sample_sums(t: torch.Tensor) -> torch.Tensor:
    # batched inputs reduce per sample; unbatched 2-D inputs give one sum
    if t.dim() <= 2:
        return t.sum().reshape(1)
    return t.reshape(t.shape[0], -1).sum(dim=1)


def overlap_loss(heat: torch.Tensor, roi: torch.Tensor,
                 weight: float = 0.5) -> torch.Tensor:
    """weight * (1 - |heat ∩ roi| / min(|heat|, |roi|)), averaged over batch.

    Masses are plain sums, so a soft heatmap contributes fractionally. Fully
    nested masses give 0, disjoint ones give ``weight``; either mass being
    zero degenerates to ``weight`` (the intersection is then zero too).
    """
    if heat.shape != roi.shape:
        raise ValueError(f"shape mismatch: {tuple(heat.shape)} vs {tuple(roi.shape)}")
    heat_mass = _per_sample_sums(heat)
    roi_mass = _per_sample_sums(roi)
    inter = _per_sample_sums(heat * roi)
    denom = torch.minimum(heat_mass, roi_mass).clamp_min(EPS)
    return (weight * (1.0 - inter / denom)).mean()


def discriminative_loss_variant(case: int, heat: torch.Tensor, roi: torch.Tensor,
                                mask: torch.Tensor, gamma: float = 2.0,
                                overlap_weight: float = 0.5) -> torch.Tensor:
    """Segmentation objective, selectable among four formulations.

    1: focal on the raw heatmap plus the overlap penalty against the ROI.
    2: focal on the ROI-gated heatmap (the default training objective).
    3: variant 2 plus the overlap penalty against the ROI.
    4: variant 2 plus the overlap penalty against the ROI complement.
    """
    if case == 1:
        return (focal_loss(heat, mask, gamma)
                + overlap_loss(heat, roi, overlap_weight))
    if case == 2:
        return focal_loss(intersect_roi(heat, roi), mask, gamma)
    if case == 3:
        return (focal_loss(intersect_roi(heat, roi), mask, gamma)
                + overlap_loss(heat, roi, overlap_weight))
    if case == 4:
        return (focal_loss(intersect_roi(heat, roi), mask, gamma)
                + overlap_loss(heat, 1.0 - roi, overlap_weight))
    raise ValueError(f"loss variant must be 1..4, got {case}")


def weights_from_config(cfg) -> LossWeights:
    return LossWeights(
        l1_weight=cfg.l1_weight,
        ssim_weight=cfg.ssim_weight,
        adv_weight=cfg.adv_weight,
        context_weight=cfg.context_weight,
        latent_weight=cfg.latent_weight,
        focal_gamma=cfg.focal_gamma,
        overlap_weight=cfg.overlap_weight,
    )
