"""Random time-domain augmentations for training windows.

A sample is augmented with probability ``cfg.probability``; when it is, one of
eight branches is picked uniformly. Composite branches apply the shift or
noise first and the cutout or crop second. Random draws happen in that same
order, so a seed fixes every decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BRANCHES = (
    "noise",
    "shift",
    "cutout",
    "crop",
    "cutout+shift",
    "cutout+noise",
    "crop+shift",
    "crop+noise",
)


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.0
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    cutout_window_range: tuple[int, int] = (100, 500)
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"augmentation probability must lie in [0, 1], got {self.probability}")
        lo, hi = self.noise_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"bad noise sigma range {self.noise_sigma_range}")
        lo, hi = self.cutout_window_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad cutout window range {self.cutout_window_range}")


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def shift(x: np.ndarray, k: int) -> np.ndarray:
    """Circular rotation by ``k`` steps (positive moves samples later in time)."""
    x = np.asarray(x, dtype=np.float64)
    if abs(k) > x.shape[-1] / 2:
        raise ValueError(f"shift {k} exceeds half the signal length {x.shape[-1]}")
    return np.roll(x, k)


def cutout(x: np.ndarray, w: int, start: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if w > n:
        raise ValueError(f"cutout window {w} longer than signal {n}")
    if w < 0 or not 0 <= start <= n - w:
        raise ValueError(f"cutout start {start} outside [0, {n - w}]")
    y = x.copy()
    y[start:start + w] = 0.0
    return y


def crop(x: np.ndarray, start: int) -> np.ndarray:
    """Take ``x[start : start + l/2]`` and stretch it back to ``l`` points by
    linear interpolation, pinning both window ends to both output ends.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n % 2:
        raise ValueError(f"crop needs an even signal length, got {n}")
    half = n // 2
    if not 0 <= start <= half:
        raise ValueError(f"crop start {start} outside [0, {half}]")
    window = x[start:start + half]
    grid = np.linspace(0.0, half - 1, n)
    return np.interp(grid, np.arange(half), window)


def _noise(x, cfg, rng):
    return gaussian_noise(x, rng.uniform(*cfg.noise_sigma_range), rng)


def _shift(x, cfg, rng):
    half = x.shape[-1] // 2
    return shift(x, int(rng.integers(-half, half + 1)))


def _cutout(x, cfg, rng):
    n = x.shape[-1]
    lo, hi = cfg.cutout_window_range
    # windows never exceed the signal
    hi = min(hi, n)
    lo = min(lo, hi)
    w = int(rng.integers(lo, hi + 1))
    return cutout(x, w, int(rng.integers(0, n - w + 1)))


def _crop(x, cfg, rng):
    return crop(x, int(rng.integers(0, x.shape[-1] // 2 + 1)))


_STEPS = {
    "noise": (_noise,),
    "shift": (_shift,),
    "cutout": (_cutout,),
    "crop": (_crop,),
    "cutout+shift": (_shift, _cutout),
    "cutout+noise": (_noise, _cutout),
    "crop+shift": (_shift, _crop),
    "crop+noise": (_noise, _crop),
}


def augment_with_branch(x: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> tuple[np.ndarray, str | None]:
    """Like :func:`augment_sample` but also report which branch ran (None if untouched)."""
    x = np.asarray(x, dtype=np.float64)
    if rng.random() >= cfg.probability:
        return x.copy(), None
    branch = BRANCHES[int(rng.integers(len(BRANCHES)))]
    for step in _STEPS[branch]:
        x = step(x, cfg, rng)
    return x, branch


def augment_sample(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return augment_with_branch(x, cfg, rng)[0]


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.probability == 0.0:
        return np.array(batch, dtype=np.float64, copy=True)
    return np.stack([augment_sample(row, cfg, rng) for row in batch])
