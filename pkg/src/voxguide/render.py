"""Volume compositing and ray/image rendering drivers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .field import FieldOutput, FieldParams, field_backward, field_forward
from .raycast import DEFAULT_T_NEAR, Camera, Ray, camera_rays, default_far, first_hit_batch
from .sampler import SamplerConfig, SampleSet, deltas_batch, guided_batch, stratified_batch
from .svo import SparseVoxelOctree

EPS = 1e-10
MASK_OPACITY = 0.5
IMAGE_CHUNK = 2048


@dataclass
class RenderResult:
    """Composited quantities for one ray, or a batch of rays along axis 0."""

    color: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    opacity: np.ndarray
    residual_transmittance: np.ndarray
    transmittance: np.ndarray | None = None


def composite(sigmas, colors, deltas, ts, background=None, normalize_depth: bool = True) -> RenderResult:
    """Alpha-composite samples front to back.

    ``alpha_i = 1 - exp(-delta_i sigma_i)``, ``T_i = exp(-sum_{j<i} delta_j sigma_j)``,
    ``w_i = T_i alpha_i``. Depth is ``sum w t / max(sum w, EPS)`` when
    normalised, else ``sum w t``. Works on a single ray (1-D inputs) or a
    batch (leading ray axis).
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if not (sigmas.shape == deltas.shape == ts.shape == colors.shape[:-1]) or sigmas.shape[-1] < 1:
        raise ValueError("sigmas, colors, deltas and ts must align and be non-empty")
    if np.any(sigmas < 0) or np.any(deltas < 0):
        raise ValueError("densities and spacings must be non-negative")

    tau = sigmas * deltas
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    w = trans * alpha
    residual = np.exp(-cum[..., -1])
    opacity = w.sum(-1)
    color = np.einsum("...s,...sc->...c", w, colors)
    if background is not None:
        color = color + residual[..., None] * np.asarray(background, dtype=np.float64)
    wt = (w * ts).sum(-1)
    depth = wt / np.maximum(opacity, EPS) if normalize_depth else wt
    return RenderResult(color, depth, w, opacity, residual, trans)


def composite_backward(res: RenderResult, sigmas, colors, deltas, ts, grad_color, grad_depth,
                       background=None, normalize_depth: bool = True):
    """Gradients of a scalar loss w.r.t. per-sample densities and colours, given
    its gradients w.r.t. the composited colour and depth of each ray."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    gcol = np.asarray(grad_color, dtype=np.float64)
    gdep = np.asarray(grad_depth, dtype=np.float64)
    w = res.weights

    gw = np.einsum("...c,...sc->...s", gcol, colors)
    if normalize_depth:
        W = res.opacity[..., None]
        dd = np.where(W > EPS, (ts - res.depth[..., None]) / np.maximum(W, EPS), ts / EPS)
    else:
        dd = ts
    gw = gw + gdep[..., None] * dd
    gcolors = w[..., None] * gcol[..., None, :]

    tau = sigmas * deltas
    t_next = np.exp(-np.cumsum(tau, axis=-1))
    gww = gw * w
    suffix = gww.sum(-1, keepdims=True) - np.cumsum(gww, axis=-1)
    gtau = gw * t_next - suffix
    if background is not None:
        g_res = gcol @ np.asarray(background, dtype=np.float64)
        gtau = gtau - (g_res * res.residual_transmittance)[..., None]
    return gtau * deltas, gcolors


# --------------------------------------------------------------------------
# batched ray rendering


@dataclass
class RayBatchRender:
    """Forward state of a ray batch, kept for the backward pass."""

    result: RenderResult
    t: np.ndarray
    important: np.ndarray
    fallback: np.ndarray
    deltas: np.ndarray
    sigmas: np.ndarray
    colors: np.ndarray
    inside: np.ndarray
    field_out: FieldOutput | None
    background: np.ndarray | None
    normalize_depth: bool


def draw_samples(svo: SparseVoxelOctree, t_near, t_far, hit_t, cfg: SamplerConfig, rng):
    n = len(hit_t)
    if cfg.strategy == "uniform":
        t = stratified_batch(np.broadcast_to(t_near, (n,)), np.broadcast_to(t_far, (n,)), cfg.n_samples, rng)
        return t, np.zeros(t.shape, dtype=bool), np.ones(n, dtype=bool)
    return guided_batch(t_near, t_far, hit_t, svo.leaf_size, cfg.n_important, cfg.n_free, rng)


def render_rays(params: FieldParams, svo: SparseVoxelOctree, origins, directions, t_near, t_far,
                hit_t, cfg: SamplerConfig, rng: np.random.Generator, background=None,
                normalize_depth: bool = True) -> RayBatchRender:
    """Sample, evaluate the field and composite a batch of rays.

    Samples outside the octree root cube carry zero density and are never
    sent through the field.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,))
    t, important, fallback = draw_samples(svo, t_near, t_far, hit_t, cfg, rng)
    deltas = deltas_batch(t, t_near)

    unit = svo.to_unit(origins[:, None, :] + t[..., None] * directions[:, None, :])
    inside = np.all((unit >= 0) & (unit <= 1), axis=-1)
    S = t.shape[1]
    sigmas = np.zeros((n, S))
    colors = np.zeros((n, S, 3))
    fout = None
    if np.any(inside):
        rows = np.nonzero(inside)[0]
        fout = field_forward(params, unit[inside], directions, ray_ids=rows)
        sigmas[inside] = fout.density
        colors[inside] = fout.color
    res = composite(sigmas, colors, deltas, t, background, normalize_depth)
    return RayBatchRender(res, t, important, fallback, deltas, sigmas, colors, inside, fout,
                          None if background is None else np.asarray(background, dtype=np.float64),
                          normalize_depth)


def render_rays_backward(params: FieldParams, rb: RayBatchRender, grad_color, grad_depth) -> np.ndarray:
    gs, gc = composite_backward(rb.result, rb.sigmas, rb.colors, rb.deltas, rb.t, grad_color, grad_depth,
                                rb.background, rb.normalize_depth)
    if rb.field_out is None:
        return np.zeros(params.config.n_params, dtype=params.config.dtype)
    return field_backward(params, rb.field_out, gs[rb.inside], gc[rb.inside])


def render_ray(params: FieldParams, svo: SparseVoxelOctree, ray: Ray, cfg: SamplerConfig,
               rng: np.random.Generator, background=None) -> tuple[RenderResult, SampleSet]:
    """Render one ray; returns the per-ray result and the samples used."""
    hit_t, _ = first_hit_batch(svo, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far)
    rb = render_rays(params, svo, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far,
                     hit_t, cfg, rng, background)
    t = rb.t[0]
    r = rb.result
    single = RenderResult(r.color[0], float(r.depth[0]), r.weights[0], float(r.opacity[0]),
                          float(r.residual_transmittance[0]), r.transmittance[0])
    hit = None if np.isnan(hit_t[0]) else float(hit_t[0])
    return single, SampleSet(t, rb.deltas[0], rb.important[0], ray.t_near, ray.t_far, ray.t_far - t[-1], hit,
                             bool(rb.fallback[0]))


@dataclass
class ImageRender:
    image: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    hit_depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        """Pixels with a usable depth (opacity at least one half)."""
        return self.opacity >= MASK_OPACITY


def render_image(params: FieldParams, svo: SparseVoxelOctree, camera: Camera, cfg: SamplerConfig,
                 seed: int = 0, view_id: int = 0, threads: int = 1, background=None,
                 t_near: float = DEFAULT_T_NEAR, t_far: float | None = None) -> ImageRender:
    """Render a full frame.

    Pixels are processed in fixed-size row-major chunks, each with its own
    random stream derived from ``(seed, view_id, chunk)``; results land by
    index, so the output does not depend on ``threads``.
    """
    t_far = default_far(svo) if t_far is None else t_far
    origins, dirs = camera_rays(camera)
    hit_t, _ = first_hit_batch(svo, origins, dirs, t_near, t_far)
    n = len(origins)
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    starts = range(0, n, IMAGE_CHUNK)

    def work(ci_start):
        ci, s = ci_start
        e = min(s + IMAGE_CHUNK, n)
        rng = np.random.default_rng([seed, view_id, ci])
        rb = render_rays(params, svo, origins[s:e], dirs[s:e], t_near, t_far, hit_t[s:e], cfg, rng,
                         background)
        color[s:e] = rb.result.color
        depth[s:e] = rb.result.depth
        opacity[s:e] = rb.result.opacity

    jobs = list(enumerate(starts))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, jobs))
    else:
        for j in jobs:
            work(j)
    H, W = camera.height, camera.width
    return ImageRender(np.clip(color, 0, 1).reshape(H, W, 3), depth.reshape(H, W),
                       opacity.reshape(H, W), hit_t.reshape(H, W))
