"""Per-ray sample placement.

Guided sampling puts ``n_important`` draws from a Gaussian centred on the
octree first-hit distance ``z`` with standard deviation ``sqrt(3) * v``
(``v`` the leaf size), hard-truncated to ``z +/- 3 sqrt(3) v``. The
remaining ``n_free`` samples are stratified over the rest of the ray.
Rays without a usable band fall back to stratified uniform sampling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .raycast import HitResult, Ray

SQRT3 = float(np.sqrt(3.0))
BAND_SIGMAS = 3.0
MAX_REJECTION_ROUNDS = 100


@dataclass(frozen=True)
class SamplerConfig:
    n_important: int = 128
    n_free: int = 128
    strategy: str = "guided"
    seed: int = 0

    def __post_init__(self):
        if self.n_important < 0 or self.n_free < 1:
            raise ValueError("need n_important >= 0 and n_free >= 1")
        if self.strategy not in ("guided", "uniform"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def n_samples(self) -> int:
        return self.n_important + self.n_free


@dataclass(frozen=True)
class SampleSet:
    t: np.ndarray
    delta: np.ndarray
    important: np.ndarray
    t_near: float
    t_far: float
    terminal: float
    hit_t: float | None = None
    fallback: bool = False

    @property
    def label(self) -> list[str]:
        return ["important" if f else "free" for f in self.important]


def band_half_width(leaf_size: float) -> float:
    return BAND_SIGMAS * SQRT3 * leaf_size


def compute_deltas(t, t_near: float, t_far: float) -> tuple[np.ndarray, float]:
    """Spacings ``t_i - t_{i-1}`` with the first measured from ``t_near``.

    Also returns the terminal gap ``t_far - t_N``.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("need a non-empty 1-D sample list")
    if np.any(np.diff(t) <= 0) or t[0] <= t_near:
        raise ValueError("samples must be strictly ascending and beyond t_near")
    return np.diff(t, prepend=t_near), float(t_far - t[-1])


def deltas_batch(t: np.ndarray, t_near) -> np.ndarray:
    """Row-wise spacings for ``(R, S)`` sample grids (no ordering check)."""
    t_near = np.asarray(t_near, dtype=t.dtype).reshape(-1, 1)
    return np.diff(t, axis=-1, prepend=np.broadcast_to(t_near, (t.shape[0], 1)))


# --------------------------------------------------------------------------
# batched kernels; all randomness is drawn here in a fixed order


def stratified_batch(t_near, t_far, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw inside each of ``n`` equal bins of ``[t_near, t_far]``."""
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    u = rng.random((t_near.shape[0], n))
    return t_near + (np.arange(n) + u) / n * (t_far - t_near)


def truncated_normal_batch(mean, std, lo, hi, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from N(mean, std) restricted to ``[lo, hi]`` per row.

    After ``MAX_REJECTION_ROUNDS`` redraws any survivor is clamped to the
    nearest edge.
    """
    mean, std, lo, hi = (np.asarray(a, dtype=np.float64).reshape(-1, 1) for a in (mean, std, lo, hi))
    x = mean + std * rng.standard_normal((mean.shape[0], n))
    bad = (x < lo) | (x > hi)
    for _ in range(MAX_REJECTION_ROUNDS):
        k = int(bad.sum())
        if k == 0:
            break
        rows = np.nonzero(bad)[0]
        x[bad] = mean[rows, 0] + std[rows, 0] * rng.standard_normal(k)
        bad = (x < lo) | (x > hi)
    return np.clip(x, lo, hi)


def guided_batch(t_near, t_far, hit_t, leaf_size: float, n_important: int, n_free: int,
                 rng: np.random.Generator):
    """Guided samples for ``R`` rays at once.

    ``hit_t`` is NaN for rays without a hit. Returns ``(t, important,
    fallback)`` with ``t`` sorted per row, shape ``(R, n_important + n_free)``.
    Fallback rows (no hit, or no room for the band or the free segments)
    hold stratified uniform samples over the whole ray.
    """
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), np.shape(hit_t)).reshape(-1)
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), np.shape(hit_t)).reshape(-1)
    z = np.asarray(hit_t, dtype=np.float64).reshape(-1)
    R = z.shape[0]
    h = band_half_width(leaf_size)
    std = SQRT3 * leaf_size

    band_lo = np.maximum(z - h, t_near)
    band_hi = np.minimum(z + h, t_far)
    near_len = np.clip(z - h - t_near, 0.0, None)
    far_len = np.clip(t_far - (z + h), 0.0, None)
    free_len = near_len + far_len
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(z) & (band_lo < band_hi) & (free_len > 0)
    fallback = ~ok
    zs = np.where(ok, z, 0.5 * (t_near + t_far))
    band_lo = np.where(ok, band_lo, t_near)
    band_hi = np.where(ok, band_hi, t_far)
    near_len = np.where(ok, near_len, 0.0)
    far_len = np.where(ok, far_len, 1.0)
    free_len = near_len + far_len

    imp = truncated_normal_batch(zs, np.full(R, std), band_lo, band_hi, n_important, rng)

    # proportional split, remainder to the far segment
    n_near = np.floor(n_free * near_len / free_len).astype(np.int64)
    n_near = np.where(far_len > 0, n_near, n_free)[:, None]
    j = np.arange(n_free)[None, :]
    in_near = j < n_near
    k = np.where(in_near, j, j - n_near)
    n_seg = np.where(in_near, n_near, n_free - n_near)
    seg_start = np.where(in_near, t_near[:, None], np.minimum(zs + h, t_far)[:, None])
    seg_len = np.where(in_near, near_len[:, None], far_len[:, None])
    u = rng.random((R, n_free))
    free = seg_start + (k + u) / n_seg * seg_len

    t = np.concatenate([imp, free], axis=1)
    important = np.concatenate([np.ones_like(imp, dtype=bool), np.zeros_like(free, dtype=bool)], axis=1)
    if np.any(fallback):
        n = n_important + n_free
        rows = np.nonzero(fallback)[0]
        t[rows] = stratified_batch(t_near[rows], t_far[rows], n, rng)
        important[rows] = False
    order = np.argsort(t, axis=1, kind="stable")
    return np.take_along_axis(t, order, 1), np.take_along_axis(important, order, 1), fallback


# --------------------------------------------------------------------------
# single-ray API


def _as_sample_set(ray: Ray, t: np.ndarray, important: np.ndarray, hit_t, fallback: bool) -> SampleSet:
    t, first = np.unique(t, return_index=True)
    important = important[first]
    keep = t > ray.t_near
    t, important = t[keep], important[keep]
    delta, terminal = compute_deltas(t, ray.t_near, ray.t_far)
    return SampleSet(t, delta, important, ray.t_near, ray.t_far, terminal, hit_t, fallback)


def sample_uniform(ray: Ray, n: int, rng: np.random.Generator) -> SampleSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    t = stratified_batch(ray.t_near, ray.t_far, n, rng)[0]
    return _as_sample_set(ray, t, np.zeros(n, dtype=bool), None, False)


def sample_guided(ray: Ray, hit: HitResult, leaf_size: float, cfg: SamplerConfig,
                  rng: np.random.Generator) -> SampleSet:
    if not hit.hit:
        return sample_uniform(ray, cfg.n_samples, rng)
    if not leaf_size > 0:
        raise ValueError("leaf size must be positive")
    t, imp, fb = guided_batch(ray.t_near, ray.t_far, np.array([hit.t_hit]), leaf_size,
                              cfg.n_important, cfg.n_free, rng)
    return _as_sample_set(ray, t[0], imp[0], hit.t_hit, bool(fb[0]))


def write_samples_csv(samples: SampleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "label"])
        for t, lab in zip(samples.t.tolist(), samples.label):
            w.writerow([repr(t), lab])
