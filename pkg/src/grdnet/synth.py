"""Synthetic defect generation.

Training never sees real defects. Each clean image is corrupted by pasting
colored gradient-noise blobs into it, which yields a supervised triplet
(clean image, corrupted image, defect mask) for free:

1. ``perlin_field`` draws a smooth lattice gradient-noise field.
2. ``binarize`` thresholds the field at a random quantile, giving blobs.
3. ``compose`` alpha-blends per-pixel random color into the blob region.

``make_triplet`` chains the three and adds the stochastic knobs (clean
probability, period choice, opacity range). Every function is a pure
function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthParams:
    """Knobs for triplet generation; defaults match the training recipe."""

    period_exp_min: int = 1
    period_exp_max: int = 5
    threshold_q_low: float = 0.6
    threshold_q_high: float = 0.95
    opacity_min: float = 0.2
    opacity_max: float = 1.0
    p_clean: float = 0.1
    octaves: int = 1


@dataclass
class TrainingTriplet:
    clean: np.ndarray       # H x W x C float32 in [0, 1]
    corrupted: np.ndarray   # H x W x C float32 in [0, 1]
    mask: np.ndarray        # H x W float32 in {0, 1}; 1 where pixels changed
    roi: np.ndarray         # H x W float32 in {0, 1}


def _fade(t: np.ndarray) -> np.ndarray:
    # quintic smoothstep: zero value and zero slope at both lattice ends
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_field(h: int, w: int, period_x: int, period_y: int, seed: int) -> np.ndarray:
    """Classic 2-D lattice gradient noise.

    ``period_x`` / ``period_y`` count lattice cells along the first / second
    axis and must divide ``h`` / ``w``. Unit gradient vectors with uniform
    random angles sit at the lattice nodes; values are fade-interpolated
    dot products scaled by sqrt(2), so the field lies in [-1, 1] and is
    exactly zero at every lattice node.
    """
    if h <= 0 or w <= 0:
        raise ValueError(f"field size must be positive, got {h}x{w}")
    if period_x <= 0 or h % period_x != 0:
        raise ValueError(f"period_x={period_x} must be a positive divisor of h={h}")
    if period_y <= 0 or w % period_y != 0:
        raise ValueError(f"period_y={period_y} must be a positive divisor of w={w}")

    d0 = h // period_x
    d1 = w // period_y
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(period_x + 1, period_y + 1))
    grads = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    # fractional offset of each pixel inside its lattice cell, in [0, 1)
    f0 = ((np.arange(h) % d0) / d0)[:, None]
    f1 = ((np.arange(w) % d1) / d1)[None, :]

    def corner(si: slice, sj: slice, o0: float, o1: float) -> np.ndarray:
        g = grads[si, sj]
        g = np.repeat(np.repeat(g, d0, axis=0), d1, axis=1)
        return g[..., 0] * (f0 - o0) + g[..., 1] * (f1 - o1)

    n00 = corner(slice(0, -1), slice(0, -1), 0.0, 0.0)
    n10 = corner(slice(1, None), slice(0, -1), 1.0, 0.0)
    n01 = corner(slice(0, -1), slice(1, None), 0.0, 1.0)
    n11 = corner(slice(1, None), slice(1, None), 1.0, 1.0)

    u = _fade(f0)
    v = _fade(f1)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return np.sqrt(2.0) * (nx0 + v * (nx1 - nx0))


def binarize(field: np.ndarray, seed: int,
             q_low: float = 0.6, q_high: float = 0.95) -> np.ndarray:
    """Threshold a noise field at a level drawn between two of its quantiles.

    The threshold is uniform in [quantile(q_low), quantile(q_high)] of the
    field's own values, so the blob area varies widely across seeds but
    never degenerates to all-ones.
    """
    if not 0.0 <= q_low < q_high <= 1.0:
        raise ValueError(f"need 0 <= q_low < q_high <= 1, got {q_low}, {q_high}")
    rng = np.random.default_rng(seed)
    lo = np.quantile(field, q_low)
    hi = np.quantile(field, q_high)
    t = rng.uniform(lo, hi)
    return (field > t).astype(np.float32)


def compose(image: np.ndarray, mask: np.ndarray, opacity: float, seed: int) -> np.ndarray:
    """Blend per-pixel uniform random color into the masked region.

    Inside the mask: (1 - opacity) * image + opacity * noise. Outside the
    mask the input pixels are returned bit-for-bit unchanged.
    """
    if not 0.0 < opacity <= 1.0:
        raise ValueError(f"opacity must lie in (0, 1], got {opacity}")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0.0, 1.0, size=image.shape).astype(image.dtype, copy=False)
    blend = np.clip((1.0 - opacity) * image + opacity * noise, 0.0, 1.0)
    blend = blend.astype(image.dtype, copy=False)
    inside = (mask > 0.5)[..., None] if image.ndim == 3 else mask > 0.5
    return np.where(inside, blend, image)


def _spawn(seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(int(seed),) + tuple(int(t) for t in tags))


def _octave_field(h: int, w: int, period_x: int, period_y: int,
                  octaves: int, seed: int) -> np.ndarray:
    """Sum up to ``octaves`` noise layers, each doubling the base period.

    Amplitudes halve per octave and the sum is renormalized, so the result
    stays in [-1, 1] and keeps the base lattice nodes at exactly zero (a
    finer lattice still contains every coarser node).
    """
    total = np.zeros((h, w))
    amp_sum = 0.0
    amp = 1.0
    for o in range(octaves):
        px, py = period_x << o, period_y << o
        if px > h or py > w or h % px or w % py:
            break
        child = int(_spawn(seed, 10, o).generate_state(1)[0])
        total += amp * perlin_field(h, w, px, py, child)
        amp_sum += amp
        amp *= 0.5
    return total / amp_sum


def make_triplet(image: np.ndarray, roi: np.ndarray,
                 params: SynthParams, seed: int) -> TrainingTriplet:
    """Produce a (clean, corrupted, mask) triplet for one training image.

    With probability ``p_clean`` the triplet is clean (corrupted == clean,
    empty mask). Otherwise lattice periods are drawn as powers of two from
    the configured exponent range (restricted to divisors of the image
    size), the field is thresholded, and color noise is blended in at a
    random opacity. A degenerate all-empty mask falls back to a clean
    triplet. Identical seeds give identical triplets.
    """
    h, w = image.shape[:2]
    image = image.astype(np.float32, copy=False)
    roi = roi.astype(np.float32, copy=False)
    rng = np.random.default_rng(_spawn(seed, 0))

    def clean() -> TrainingTriplet:
        return TrainingTriplet(
            clean=image,
            corrupted=image.copy(),
            mask=np.zeros((h, w), dtype=np.float32),
            roi=roi,
        )

    if rng.uniform() < params.p_clean:
        return clean()

    exps = range(params.period_exp_min, params.period_exp_max + 1)
    px_choices = [2 ** e for e in exps if 2 ** e <= h and h % (2 ** e) == 0]
    py_choices = [2 ** e for e in exps if 2 ** e <= w and w % (2 ** e) == 0]
    if not px_choices or not py_choices:
        raise ValueError(
            f"no power-of-two period in exponent range [{params.period_exp_min}, "
            f"{params.period_exp_max}] divides image size {h}x{w}")
    period_x = int(rng.choice(px_choices))
    period_y = int(rng.choice(py_choices))

    field_seed = int(_spawn(seed, 1).generate_state(1)[0])
    field = _octave_field(h, w, period_x, period_y, params.octaves, field_seed)
    mask = binarize(field, int(_spawn(seed, 2).generate_state(1)[0]),
                    params.threshold_q_low, params.threshold_q_high)
    if not mask.any():
        return clean()

    opacity = rng.uniform(params.opacity_min, params.opacity_max)
    corrupted = compose(image, mask, opacity, int(_spawn(seed, 3).generate_state(1)[0]))
    return TrainingTriplet(clean=image, corrupted=corrupted, mask=mask, roi=roi)
