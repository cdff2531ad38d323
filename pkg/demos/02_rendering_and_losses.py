"""
Compositing and the training objective
======================================

Small numeric experiments with the volume-rendering quadrature, the robust
depth loss and the smoothness term, all on hand-made inputs.

Run with ``python demos/02_rendering_and_losses.py``.
"""

import numpy as np

from voxguide.loss import LossConfig, batch_objective, robust_depth_grad, robust_depth_loss, smoothness_reg
from voxguide.render import composite

# a homogeneous slab: piecewise-constant density makes opacity exact at any sample
# count, while the expected depth converges as the samples get denser
for n in (4, 16, 64, 512):
    t = (np.arange(n) + 0.5) / n
    r = composite(np.full(n, 4.0), np.ones((n, 3)), np.full(n, 1.0 / n), t)
    print(f"{n:4d} samples: opacity {r.opacity:.6f} (exact {1 - np.exp(-4):.6f}), depth {r.depth:.4f}")

# a thin wall at 2 m seen through empty space
t = np.linspace(0.05, 4.0, 80)
d = np.diff(t, prepend=0.0)
sig = np.where(np.abs(t - 2.0) < 0.05, 50.0, 0.0)
col = np.tile([0.8, 0.3, 0.2], (80, 1))
r = composite(sig, col, d, t)
print(f"thin wall: colour {np.round(r.color, 3)}, depth {r.depth:.3f} m, residual transmittance "
      f"{r.residual_transmittance:.2e}")

# add a faint fog in front and watch the depth move forward
fog = sig + np.where(t < 2.0, 0.3, 0.0)
r = composite(fog, col, d, t)
print(f"with fog:  depth {r.depth:.3f} m, opacity {r.opacity:.3f}")

# the robust loss: quadratic near zero, logarithmic beyond beta
print("\n  r      loss      slope")
for res in (0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0):
    print(f"{res:5.2f}  {robust_depth_loss(res, 0.0):.6f}  {robust_depth_grad(res, 0.0):.4f}")
print("doubling r beyond beta always adds beta^2 ln 2 =", f"{0.01 * np.log(2):.6f}")

# smoothness over a pyramid: a step costs more than a ramp of the same height
m = np.ones((8, 8), dtype=bool)
step = np.where(np.arange(8) < 4, 1.0, 2.0)[None].repeat(8, 0)
ramp = np.linspace(1.0, 2.0, 8)[None].repeat(8, 0)
for name, dep in (("step", step), ("ramp", ramp)):
    print(f"{name}: smoothness {smoothness_reg(dep, m, 1):.4f} at one scale, {smoothness_reg(dep, m, 3):.4f} "
          "over three")

# one patch through the whole objective, with a pseudo-depth that misses half the rays
rng = np.random.default_rng(0)
pred_c, gt_c = rng.random((64, 3)), rng.random((64, 3))
pred_d = 2.0 + 0.05 * rng.standard_normal(64)
pseudo = np.where(rng.random(64) < 0.5, 2.1, np.nan)
br, gc, gd = batch_objective(pred_c, pred_d, gt_c, pseudo, np.isfinite(pseudo), LossConfig(), (8, 8))
print(f"\npatch loss: colour {br.l_color:.4f}, depth {br.l_depth:.5f}, smoothness {br.l_reg:.4f}, "
      f"total {br.total:.4f}")
# rays without pseudo-depth are masked out of both depth terms
print(f"depth gradient on rays without pseudo-depth: {np.abs(gd[~np.isfinite(pseudo)]).max():.1f}")
