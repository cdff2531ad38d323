"""Patch-batched optimisation of the radiance field with Adam."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .field import FieldConfig, FieldParams, init_params, save_checkpoint
from .loss import LossBreakdown, LossConfig, batch_objective
from .raycast import DEFAULT_T_NEAR, camera_rays, default_far, first_hit_batch
from .render import render_rays, render_rays_backward
from .sampler import SamplerConfig
from .svo import SparseVoxelOctree

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "l_color", "l_depth", "l_reg", "total", "lr", "psnr_train_patch")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    rays_per_batch: int = 4096
    patch_size: int = 8
    n_important: int = 128
    n_free: int = 128
    lr_init: float = 0.01
    lr_decay_to: float = 0.01
    seed: int = 0
    strategy: str = "guided"
    loss: LossConfig = field(default_factory=LossConfig)
    clip_norm: float = 10.0
    checkpoint_every: int = 500
    patches_per_chunk: int = 16
    background: tuple | None = None

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1 or self.patch_size < 1:
            raise ValueError("iterations, rays_per_batch and patch_size must be >= 1")
        if self.rays_per_batch % (self.patch_size ** 2):
            raise ValueError("rays_per_batch must be divisible by patch_size^2")
        if self.loss.patch_size != self.patch_size:
            object.__setattr__(self, "loss", replace(self.loss, patch_size=self.patch_size))

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.n_important, self.n_free, self.strategy, self.seed)

    @property
    def n_patches(self) -> int:
        return self.rays_per_batch // self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        if d.get("background") is not None:
            d["background"] = tuple(d["background"])
        return cls(**d)


def smoke_config(**overrides) -> TrainConfig:
    """Desk-scale settings used by the demos and acceptance runs."""
    base = dict(iterations=2000, rays_per_batch=512, n_important=32, n_free=32)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, vector: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(vector), np.zeros_like(vector), 0)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              block_names=None) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        where = ""
        if block_names:
            where = ", ".join(k for k, s in block_names.items() if not np.all(np.isfinite(grads[s])))
        raise FloatingPointError(f"non-finite gradient at step {state.step} in [{where}]")
    state.step += 1
    dt = params.dtype
    b1, b2 = dt.type(BETA1), dt.type(BETA2)
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    mhat_scale = 1.0 / (1.0 - BETA1 ** state.step)
    vhat_scale = 1.0 / (1.0 - BETA2 ** state.step)
    params -= (lr * mhat_scale * state.m / (np.sqrt(state.v * vhat_scale) + ADAM_EPS)).astype(dt, copy=False)
    return params, state


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Exponential decay from ``lr_init`` to ``lr_init * lr_decay_to`` over the run."""
    if not 0 <= iteration <= cfg.iterations:
        raise ValueError("iteration outside the schedule")
    if iteration == cfg.iterations:
        return cfg.lr_init * cfg.lr_decay_to
    return cfg.lr_init * cfg.lr_decay_to ** (iteration / cfg.iterations)


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> float:
    norm = float(np.sqrt(np.sum(grads.astype(np.float64) ** 2)))
    if max_norm > 0 and norm > max_norm:
        grads *= grads.dtype.type(max_norm / norm)
    return norm


# --------------------------------------------------------------------------
# data


@dataclass
class TrainViews:
    """Per-pixel rays, colours and cached pseudo-depth for the training views."""

    origins: np.ndarray   # (V, H, W, 3)
    dirs: np.ndarray      # (V, H, W, 3)
    colors: np.ndarray    # (V, H, W, 3)
    pseudo: np.ndarray    # (V, H, W), NaN where the prior has no hit
    t_near: float
    t_far: float

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.pseudo)


def prepare_views(dataset, svo: SparseVoxelOctree, views=None, t_near: float = DEFAULT_T_NEAR,
                  t_far: float | None = None) -> TrainViews:
    views = dataset.indices("train") if views is None else list(views)
    if not views:
        raise ValueError("dataset has no training views")
    t_far = default_far(svo) if t_far is None else t_far
    O, D, C, P = [], [], [], []
    for v in views:
        cam = dataset.cameras[v]
        o, d = camera_rays(cam)
        hit, _ = first_hit_batch(svo, o, d, t_near, t_far)
        shape = (cam.height, cam.width)
        O.append(o.reshape(*shape, 3))
        D.append(d.reshape(*shape, 3))
        C.append(np.asarray(dataset.images[v], dtype=np.float64))
        P.append(hit.reshape(shape))
    return TrainViews(np.stack(O), np.stack(D), np.stack(C), np.stack(P), t_near, t_far)


def draw_patches(views: TrainViews, n_patches: int, size: int, rng: np.random.Generator):
    """Flat pixel indices ``(P * size * size,)`` into the (V, H, W) view stack."""
    V, H, W = views.pseudo.shape
    v = rng.integers(0, V, n_patches)
    y0 = rng.integers(0, H - size + 1, n_patches)
    x0 = rng.integers(0, W - size + 1, n_patches)
    dy, dx = np.mgrid[0:size, 0:size]
    y = y0[:, None, None] + dy
    x = x0[:, None, None] + dx
    return ((v[:, None, None] * H + y) * W + x).reshape(-1)


# --------------------------------------------------------------------------
# loop


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainState:
    params: FieldParams
    adam: AdamState
    iteration: int = 0


def train_step(state: TrainState, views: TrainViews, svo: SparseVoxelOctree, cfg: TrainConfig,
               pool: ThreadPoolExecutor | None = None) -> tuple[LossBreakdown, float]:
    """One optimisation step; returns the loss breakdown and the learning rate used."""
    it = state.iteration
    params = state.params
    rng = np.random.default_rng([cfg.seed, it])
    idx = draw_patches(views, cfg.n_patches, cfg.patch_size, rng)
    flat = lambda a: a.reshape(-1, *a.shape[3:])  # noqa: E731
    O, D, C, Pd = flat(views.origins)[idx], flat(views.dirs)[idx], flat(views.colors)[idx], views.pseudo.reshape(-1)[idx]
    valid = np.isfinite(Pd)
    norms = (len(idx), int(valid.sum()))
    pp = cfg.patch_size ** 2
    chunk = cfg.patches_per_chunk * pp
    bg = None if cfg.background is None else np.asarray(cfg.background)
    sampler = cfg.sampler

    def run(ci):
        s, e = ci * chunk, min((ci + 1) * chunk, len(idx))
        crng = np.random.default_rng([cfg.seed, it, ci])
        hit = Pd[s:e] if sampler.strategy == "guided" else np.full(e - s, np.nan)
        rb = render_rays(params, svo, O[s:e], D[s:e], views.t_near, views.t_far, hit, sampler, crng, bg)
        br, gc, gd = batch_objective(rb.result.color, rb.result.depth, C[s:e], Pd[s:e], valid[s:e],
                                     cfg.loss, (cfg.patch_size, cfg.patch_size), norms)
        return br, render_rays_backward(params, rb, gc, gd)

    n_chunks = -(-len(idx) // chunk)
    results = list(pool.map(run, range(n_chunks))) if pool is not None else [run(c) for c in range(n_chunks)]
    grad = results[0][1]
    for _, g in results[1:]:
        grad += g
    lc = sum(r[0].l_color for r in results)
    ld = sum(r[0].l_depth for r in results)
    lr_ = sum(r[0].l_reg for r in results)
    br = LossBreakdown(lc, ld, lr_, lc + cfg.loss.lambda_d * (ld + lr_))
    if not np.isfinite(br.total):
        raise FloatingPointError(f"non-finite loss at iteration {it}")
    clip_by_global_norm(grad, cfg.clip_norm)
    lr = lr_at(it, cfg)
    adam_step(params.vector, grad, state.adam, lr, params.config.slices())
    state.iteration += 1
    return br, lr


def train(dataset, svo: SparseVoxelOctree, field_cfg: FieldConfig, cfg: TrainConfig, *,
          out_dir=None, threads: int = 1, state: TrainState | None = None,
          views: TrainViews | None = None, log_every: int = 1) -> tuple[FieldParams, list[dict]]:
    """Optimise a field on the dataset's training views.

    With ``out_dir`` a CSV log (``train_log.csv``) and checkpoints
    (``ckpt_<iter>.vxnf`` every ``checkpoint_every`` iterations plus
    ``final.vxnf``) are written. Pass ``state`` to resume.
    """
    views = prepare_views(dataset, svo) if views is None else views
    if state is None:
        params = init_params(field_cfg, cfg.seed)
        state = TrainState(params, AdamState.zeros_like(params.vector))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    last_ckpt = None
    meta = {"train": cfg.to_dict()}

    def checkpoint(name):
        path = out / name
        save_checkpoint(path, state.params, {**meta, "iteration": state.iteration}, state.adam)
        return str(path)

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while state.iteration < cfg.iterations:
            it = state.iteration
            try:
                br, lr = train_step(state, views, svo, cfg, pool)
            except FloatingPointError as exc:
                raise TrainingAborted(str(exc), last_ckpt) from exc
            if it % log_every == 0 or state.iteration == cfg.iterations:
                mse = br.l_color / 3.0
                rows.append({
                    "iteration": it, "l_color": br.l_color, "l_depth": br.l_depth, "l_reg": br.l_reg,
                    "total": br.total, "lr": lr,
                    "psnr_train_patch": float(10 * np.log10(1.0 / max(mse, 1e-10))),
                })
            if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                last_ckpt = checkpoint(f"ckpt_{state.iteration:06d}.vxnf")
            if it % 500 == 0:
                log.info("iter %d total %.5f color %.5f depth %.5f reg %.5f", it, br.total, br.l_color,
                         br.l_depth, br.l_reg)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        checkpoint("final.vxnf")
        write_log(rows, out / "train_log.csv")
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    return state.params, rows


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
