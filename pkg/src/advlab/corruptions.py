"""Fifteen common-corruption families at five severities.

Every family is a pure function of ``(image, CorruptionSpec)``.  Stochastic
families draw from ``np.random.default_rng([seed, family_index, severity])``.
Images are channel-first floats in [0, 1]; outputs keep the shape and range.

Severity tables are sized for 16x16 images and are checked for monotone
distortion by the test suite rather than copied from any external benchmark.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FAMILIES = (
    "gaussian-noise", "shot-noise", "impulse-noise",
    "defocus-blur", "glass-blur", "motion-blur", "zoom-blur",
    "snow", "frost", "fog",
    "brightness", "contrast", "elastic-transform", "pixelate", "jpeg",
)
SEVERITIES = (1, 2, 3, 4, 5)

# per-family severity tables, index = severity - 1
GAUSSIAN_SIGMA = (0.04, 0.07, 0.10, 0.14, 0.20)
SHOT_PHOTONS = (120.0, 50.0, 25.0, 12.0, 6.0)
IMPULSE_AMOUNT = (0.02, 0.05, 0.09, 0.15, 0.24)
DEFOCUS_RADIUS = (1.0, 1.5, 2.0, 2.5, 3.0)
GLASS = ((0.5, 1, 1), (0.5, 1, 2), (0.5, 1, 4), (0.5, 2, 3), (0.5, 2, 5))  # (sigma, max shift, rounds)
MOTION_LENGTH = (3, 5, 7, 9, 11)
ZOOM = ((3, 1.10), (4, 1.20), (5, 1.30), (6, 1.45), (7, 1.60))  # (crops, max zoom)
SNOW = ((0.03, 0.04), (0.06, 0.08), (0.09, 0.12), (0.13, 0.16), (0.18, 0.20))  # (flake density, lift)
FROST = ((0.95, 0.25), (0.85, 0.40), (0.75, 0.50), (0.70, 0.60), (0.60, 0.70))  # (image weight, frost weight)
FOG = ((0.4, 2.0), (0.6, 2.0), (0.8, 1.7), (1.0, 1.5), (1.3, 1.4))  # (strength, plasma decay)
BRIGHTNESS_DELTA = (0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_FACTOR = (0.6, 0.45, 0.3, 0.18, 0.08)
ELASTIC = ((0.4, 1.5), (0.7, 1.5), (1.0, 1.5), (1.4, 1.5), (1.9, 1.5))  # (max displacement px, smoothing sigma)
PIXELATE_SIZE = (12, 8, 6, 4, 3)  # side length of the downsampled grid for 16-pixel images
JPEG_QUALITY = (40, 25, 15, 10, 5)


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CorruptionError(f"unknown corruption family {self.family!r}")
        if self.severity not in SEVERITIES:
            raise CorruptionError(f"severity must be in 1..5, got {self.severity!r}")

    @property
    def family_id(self) -> int:
        return FAMILIES.index(self.family)


def _rng(spec: CorruptionSpec) -> np.random.Generator:
    return np.random.default_rng([spec.seed, spec.family_id, spec.severity])


def _channels(x, fn):
    return np.stack([fn(c) for c in x])


# --------------------------------------------------------------------------
# noise


def _gaussian_noise(x, s, rng):
    return x + rng.normal(0.0, GAUSSIAN_SIGMA[s], x.shape)


def _shot_noise(x, s, rng):
    lam = SHOT_PHOTONS[s]
    return rng.poisson(x * lam) / lam


def _impulse_noise(x, s, rng):
    out = x.copy()
    u = rng.random(x.shape)
    amount = IMPULSE_AMOUNT[s]
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


# --------------------------------------------------------------------------
# blur


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return k / k.sum()


def _defocus_blur(x, s, rng):
    k = _disk_kernel(DEFOCUS_RADIUS[s])
    return _channels(x, lambda c: ndimage.gaussian_filter(ndimage.convolve(c, k, mode="reflect"), 0.5, mode="reflect"))


def _glass_blur(x, s, rng):
    sigma, shift, rounds = GLASS[s]
    out = _channels(x, lambda c: ndimage.gaussian_filter(c, sigma, mode="reflect"))
    _, h, w = out.shape
    for _ in range(rounds):
        for i in range(h - shift, shift - 1, -1):
            for j in range(w - shift, shift - 1, -1):
                di, dj = rng.integers(-shift, shift, size=2)
                ii, jj = i + di, j + dj
                out[:, i, j], out[:, ii, jj] = out[:, ii, jj].copy(), out[:, i, j].copy()
    return _channels(out, lambda c: ndimage.gaussian_filter(c, sigma, mode="reflect"))


def motion_kernel(length: int) -> np.ndarray:
    """Normalised ``length``-tap line along the 45-degree diagonal."""
    k = np.eye(length)[::-1]
    return k / k.sum()


def _motion_blur(x, s, rng):
    k = motion_kernel(MOTION_LENGTH[s])
    return _channels(x, lambda c: ndimage.convolve(c, k, mode="nearest"))


def _zoom_center(c: np.ndarray, z: float) -> np.ndarray:
    h, w = c.shape
    zoomed = ndimage.zoom(c, z, order=1, mode="nearest", grid_mode=True)
    top, left = (zoomed.shape[0] - h) // 2, (zoomed.shape[1] - w) // 2
    return zoomed[top:top + h, left:left + w]


def _zoom_blur(x, s, rng):
    k, zmax = ZOOM[s]
    acc = x.astype(np.float64).copy()
    for z in np.linspace(1.0, zmax, k)[1:]:
        acc += _channels(x, lambda c: _zoom_center(c, z))
    return acc / k


# --------------------------------------------------------------------------
# weather


def plasma(size: int, rng: np.random.Generator, decay: float = 2.0) -> np.ndarray:
    """Diamond-square fractal on a ``size`` x ``size`` torus, scaled to [0, 1].

    ``size`` must be a power of two.  Larger ``decay`` gives smoother maps.
    """
    if size < 2 or size & (size - 1):
        raise CorruptionError("plasma size must be a power of two >= 2")
    m = np.zeros((size, size))
    step, amp = size, 1.0
    while step >= 2:
        half = step // 2
        # diamond: centres of squares
        corners = m[0:size:step, 0:size:step]
        mean = (corners + np.roll(corners, -1, 0) + np.roll(corners, -1, 1) + np.roll(np.roll(corners, -1, 0), -1, 1)) / 4
        m[half:size:step, half:size:step] = mean + rng.uniform(-amp, amp, mean.shape)
        # square: edge midpoints
        for r0, c0 in ((0, half), (half, 0)):
            rows, cols = np.arange(r0, size, step), np.arange(c0, size, step)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            avg = (m[(rr - half) % size, cc] + m[(rr + half) % size, cc]
                   + m[rr, (cc - half) % size] + m[rr, (cc + half) % size]) / 4
            m[rr, cc] = avg + rng.uniform(-amp, amp, avg.shape)
        step, amp = half, amp / decay
    m -= m.min()
    return m / m.max() if m.max() > 0 else m


def _pow2(n: int) -> int:
    return 1 << max(1, (n - 1).bit_length())


def _fog(x, s, rng):
    strength, decay = FOG[s]
    _, h, w = x.shape
    p = plasma(_pow2(max(h, w)), rng, decay)[:h, :w]
    peak = x.max()
    return (x + strength * p) * peak / (peak + strength) if peak > 0 else x + strength * p


def _frost(x, s, rng):
    a, b = FROST[s]
    _, h, w = x.shape
    seeds = rng.random((h, w)) ** 6  # sparse bright crystal centres
    crystals = np.maximum(seeds, ndimage.grey_dilation(seeds, footprint=np.eye(3, dtype=bool)) * 0.8)
    crystals = np.maximum(crystals, ndimage.grey_dilation(seeds, footprint=np.eye(3, dtype=bool)[::-1]) * 0.8)
    crystals = crystals / max(crystals.max(), 1e-12)
    tint = np.array([0.85, 0.92, 1.0])[:, None, None]  # pale blue ice
    return a * x + b * tint * crystals


def _snow(x, s, rng):
    density, lift = SNOW[s]
    _, h, w = x.shape
    flakes = (rng.random((h, w)) < density).astype(np.float64)
    streaks = ndimage.convolve(flakes, motion_kernel(3) * 3, mode="constant")  # short diagonal streaks
    streaks = np.clip(streaks, 0.0, 1.0)
    base = x + lift
    return base * (1 - streaks) + streaks


# --------------------------------------------------------------------------
# digital


def _brightness(x, s, rng):
    return x + BRIGHTNESS_DELTA[s]


def _contrast(x, s, rng):
    m = x.mean()
    return (x - m) * CONTRAST_FACTOR[s] + m


def _elastic(x, s, rng):
    amp, sigma = ELASTIC[s]
    _, h, w = x.shape
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma, mode="reflect")
        fields.append(f * (amp / max(np.abs(f).max(), 1e-12)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + fields[0], xx + fields[1]]
    return _channels(x, lambda c: ndimage.map_coordinates(c, coords, order=1, mode="reflect"))


def area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row ``i`` averages input cells overlapping ``[i, i+1) * n_in / n_out``."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
    return a / a.sum(axis=1, keepdims=True)


def _pixelate(x, s, rng):
    _, h, w = x.shape
    nh = max(1, round(PIXELATE_SIZE[s] * h / 16))
    nw = max(1, round(PIXELATE_SIZE[s] * w / 16))
    small = np.einsum("ih,chw,jw->cij", area_matrix(nh, h), x, area_matrix(nw, w))
    ri = (np.arange(h) * nh) // h
    ci = (np.arange(w) * nw) // w
    return small[:, ri][:, :, ci]


def _jpeg(x, s, rng):
    from advlab import jpeg
    return jpeg.roundtrip(x, JPEG_QUALITY[s])


_IMPL = {
    "gaussian-noise": _gaussian_noise, "shot-noise": _shot_noise, "impulse-noise": _impulse_noise,
    "defocus-blur": _defocus_blur, "glass-blur": _glass_blur, "motion-blur": _motion_blur,
    "zoom-blur": _zoom_blur, "snow": _snow, "frost": _frost, "fog": _fog,
    "brightness": _brightness, "contrast": _contrast, "elastic-transform": _elastic,
    "pixelate": _pixelate, "jpeg": _jpeg,
}


def corrupt(image, spec: CorruptionSpec, clip: bool = True) -> np.ndarray:
    """Apply one corruption to a channel-first image in [0, 1].

    ``clip=False`` skips the final clamp to [0, 1]; it exists for statistical
    checks of the raw noise and is not meant for evaluation.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise CorruptionError(f"expected a C x H x W image, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise CorruptionError("image must be finite and in [0, 1]")
    out = _IMPL[spec.family](x, spec.severity - 1, _rng(spec))
    return (np.clip(out, 0.0, 1.0) if clip else out).astype(np.float32)


def corrupt_batch(images, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt each image; image ``i`` uses seed ``spec.seed + i``."""
    return np.stack([corrupt(im, CorruptionSpec(spec.family, spec.severity, spec.seed + i))
                     for i, im in enumerate(images)])


def distortion(image, corrupted) -> float:
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(corrupted, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
