"""Training objectives: photometric loss, robust pseudo-depth loss and a
multi-scale depth-gradient smoothness term, plus their analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import RayBatchRender, composite_backward


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.1
    lambda_d: float = 0.1
    n_scales: int = 4
    patch_size: int = 8

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be non-negative")
        if self.n_scales < 1 or self.patch_size < 2:
            raise ValueError("need n_scales >= 1 and patch_size >= 2")

    @property
    def effective_scales(self) -> int:
        """Scales capped so the coarsest patch level is still at least 2 px wide."""
        return max(1, min(self.n_scales, int(np.log2(self.patch_size))))


@dataclass(frozen=True)
class LossBreakdown:
    l_color: float
    l_depth: float
    l_reg: float
    total: float


def color_loss(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.sum((pred - gt) ** 2, axis=-1)))


def robust_depth_loss(d_pred, d_pseudo, beta: float = 0.1):
    """Quadratic below ``beta``, ``beta^2 (1/2 + ln(r / beta))`` above."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    r = np.abs(np.asarray(d_pred, dtype=np.float64) - np.asarray(d_pseudo, dtype=np.float64))
    with np.errstate(divide="ignore"):
        out = np.where(r < beta, 0.5 * r * r, beta * beta * (0.5 + np.log(np.maximum(r, beta) / beta)))
    return out if out.ndim else float(out)


def robust_depth_grad(d_pred, d_pseudo, beta: float = 0.1):
    """Derivative of :func:`robust_depth_loss` with respect to ``d_pred``."""
    e = np.asarray(d_pred, dtype=np.float64) - np.asarray(d_pseudo, dtype=np.float64)
    r = np.abs(e)
    return np.where(r < beta, e, beta * beta / np.maximum(r, beta) * np.sign(e))


def _pool(a, op):
    h, w = a.shape[-2] // 2 * 2, a.shape[-1] // 2 * 2
    a = a[..., :h, :w]
    q = (a[..., 0::2, 0::2], a[..., 1::2, 0::2], a[..., 0::2, 1::2], a[..., 1::2, 1::2])
    if op == "mean":
        return 0.25 * (q[0] + q[1] + q[2] + q[3])
    return q[0] & q[1] & q[2] & q[3]


def _smoothness_sum(depth, mask, n_scales: int):
    """Un-normalised masked sum of absolute forward differences over the pyramid,
    and its gradient w.r.t. the full-resolution depth."""
    d = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if d.shape != m.shape or d.shape[-1] < 2 or d.shape[-2] < 2:
        raise ValueError("depth and mask must align and be at least 2x2")
    total = 0.0
    grads = []
    shapes = []
    for _ in range(n_scales):
        if d.shape[-1] < 1 or d.shape[-2] < 1:
            break
        g = np.zeros_like(d)
        gx = d[..., :, 1:] - d[..., :, :-1]
        mx = m[..., :, 1:] & m[..., :, :-1]
        gy = d[..., 1:, :] - d[..., :-1, :]
        my = m[..., 1:, :] & m[..., :-1, :]
        total += float(np.sum(np.abs(gx) * mx) + np.sum(np.abs(gy) * my))
        sx = np.sign(gx) * mx
        sy = np.sign(gy) * my
        g[..., :, 1:] += sx
        g[..., :, :-1] -= sx
        g[..., 1:, :] += sy
        g[..., :-1, :] -= sy
        grads.append(g)
        shapes.append(d.shape)
        d, m = _pool(d, "mean"), _pool(m, "and")

    # pull coarse gradients back through the 2x2 averages
    acc = None
    for g, shape in zip(reversed(grads), reversed(shapes)):
        if acc is not None:
            up = np.zeros(shape)
            h, w = acc.shape[-2] * 2, acc.shape[-1] * 2
            up[..., :h, :w] = 0.25 * np.repeat(np.repeat(acc, 2, axis=-2), 2, axis=-1)
            g = g + up
        acc = g
    return total, acc


def smoothness_reg(depth_patch, mask, n_scales: int = 1) -> float:
    """Masked multi-scale depth-gradient penalty, divided by the number of valid
    full-resolution pixels. Accepts one ``(H, W)`` patch or a ``(P, H, W)`` stack."""
    count = int(np.sum(mask))
    if count == 0:
        return 0.0
    total, _ = _smoothness_sum(depth_patch, mask, n_scales)
    return total / count


def smoothness_reg_grad(depth_patch, mask, n_scales: int = 1) -> np.ndarray:
    count = int(np.sum(mask))
    if count == 0:
        return np.zeros(np.shape(depth_patch))
    _, g = _smoothness_sum(depth_patch, mask, n_scales)
    return g / count


def total_loss(l_color: float, l_depth: float, l_reg: float, cfg: LossConfig) -> LossBreakdown:
    return LossBreakdown(l_color, l_depth, l_reg, l_color + cfg.lambda_d * (l_depth + l_reg))


def batch_objective(pred_color, pred_depth, gt_color, pseudo_depth, valid, cfg: LossConfig,
                    patch_shape: tuple[int, int] | None = None, norms: tuple[int, int] | None = None):
    """Loss breakdown plus gradients w.r.t. each ray's composited colour and depth.

    Rays are ordered patch by patch (row-major inside a patch) when
    ``patch_shape`` is given; the smoothness term is skipped otherwise.
    Invalid rays (no pseudo-depth) are excluded from the depth terms.
    ``norms = (n_rays, n_valid)`` overrides the mean denominators so a
    batch split into chunks sums back to the whole-batch loss.
    """
    pred_color = np.asarray(pred_color, dtype=np.float64)
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    n_rays, n_valid = norms if norms is not None else (len(pred_color), int(valid.sum()))
    resid = pred_color - np.asarray(gt_color, dtype=np.float64)
    l_c = float(np.sum(resid ** 2)) / n_rays
    g_color = 2.0 * resid / n_rays

    g_depth = np.zeros(len(pred_depth))
    l_d = l_r = 0.0
    if n_valid and valid.any():
        pseudo = np.where(valid, pseudo_depth, 0.0)
        l_d = float(np.sum(robust_depth_loss(pred_depth[valid], pseudo[valid], cfg.beta))) / n_valid
        g_depth[valid] += robust_depth_grad(pred_depth[valid], pseudo[valid], cfg.beta) / n_valid
        if patch_shape is not None:
            ph, pw = patch_shape
            d = pred_depth.reshape(-1, ph, pw)
            m = valid.reshape(-1, ph, pw)
            total, g = _smoothness_sum(d, m, cfg.effective_scales)
            l_r = total / n_valid
            g_depth += g.reshape(-1) / n_valid
    g_depth *= cfg.lambda_d
    return total_loss(l_c, l_d, l_r, cfg), g_color, g_depth


def loss_gradients(rb: RayBatchRender, gt_color, pseudo_depth, valid, cfg: LossConfig,
                   patch_shape: tuple[int, int] | None = None):
    """Total loss and its gradients w.r.t. every sample's density and colour."""
    br, gc, gd = batch_objective(rb.result.color, rb.result.depth, gt_color, pseudo_depth, valid,
                                 cfg, patch_shape)
    g_sigma, g_rgb = composite_backward(rb.result, rb.sigmas, rb.colors, rb.deltas, rb.t, gc, gd,
                                        rb.background, rb.normalize_depth)
    return br, g_sigma, g_rgb, (gc, gd)
