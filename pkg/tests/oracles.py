"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way and shares no code with
the package beyond data containers.
"""

import numpy as np
from scipy import integrate, stats


def interleave_bits(x: int, y: int, z: int, level: int) -> int:
    code = 0
    for k in range(level):
        code |= ((x >> k) & 1) << (3 * k)
        code |= ((y >> k) & 1) << (3 * k + 1)
        code |= ((z >> k) & 1) << (3 * k + 2)
    return code


def voxelize(points, origin, side, level):
    """Set of occupied integer cells (i, j, k) by floor division."""
    n = 1 << level
    cell = side / n
    out = set()
    for p in np.asarray(points):
        ijk = tuple(int(np.floor((p[a] - origin[a]) / cell)) for a in range(3))
        if all(0 <= c < n for c in ijk):
            out.add(ijk)
    return out


def slab_entry_exit(o, d, lo, hi):
    """Plain division slab test for rays with no zero direction components."""
    t0 = (lo - o) / d
    t1 = (hi - o) / d
    return np.minimum(t0, t1).max(-1), np.maximum(t0, t1).min(-1)


def brute_first_hit(o, d, leaf_lo, leaf_size, t_near, t_far):
    """Argmin entry parameter over every occupied leaf; returns (t, index) or (nan, -1)."""
    t_in, t_out = slab_entry_exit(o[None], d[None], leaf_lo, leaf_lo + leaf_size)
    t_in = np.maximum(t_in, t_near)
    t_out = np.minimum(t_out, t_far)
    ok = t_in <= t_out
    if not ok.any():
        return np.nan, -1
    idx = np.nonzero(ok)[0]
    j = idx[np.argmin(t_in[idx])]
    return float(t_in[j]), int(j)


def truncnorm_moments(mean, std, lo, hi):
    """Mean and std of N(mean, std) truncated to [lo, hi] by quadrature."""
    pdf = stats.norm(mean, std).pdf
    z = integrate.quad(pdf, lo, hi)[0]
    m1 = integrate.quad(lambda x: x * pdf(x), lo, hi)[0] / z
    m2 = integrate.quad(lambda x: (x - m1) ** 2 * pdf(x), lo, hi)[0] / z
    return m1, np.sqrt(m2)


def composite_loop(sigmas, colors, deltas, ts):
    """Front-to-back compositing written as an explicit loop."""
    T = 1.0
    c = np.zeros(3)
    w_all = []
    depth = 0.0
    for s, col, dl, t in zip(sigmas, colors, deltas, ts):
        a = 1.0 - np.exp(-s * dl)
        w = T * a
        c += w * np.asarray(col)
        depth += w * t
        w_all.append(w)
        T *= 1.0 - a
    return c, depth, np.array(w_all), T


def central_difference(f, x, idx, h=1e-3):
    """Central-difference partial derivatives of scalar ``f`` at coordinates ``idx``."""
    g = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[n] = (fp - fm) / (2 * h)
    return g


def ray_box_bisect(o, d, lo, hi, t_max=50.0, n=20000):
    """First t where the ray enters the box, by dense scan then bisection."""
    ts = np.linspace(0, t_max, n)
    p = o + ts[:, None] * d
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    if not inside.any():
        return None
    k = np.argmax(inside)
    if k == 0:
        return 0.0
    a, b = ts[k - 1], ts[k]
    for _ in range(80):
        m = 0.5 * (a + b)
        q = o + m * d
        if np.all((q >= lo) & (q <= hi)):
            b = m
        else:
            a = m
    return b


def brute_first_hit_batch(o, d, leaf_lo, leaf_size, t_near, t_far, chunk=512):
    """Vectorised argmin over every leaf for many rays; (t, index) with index -1 for misses."""
    lo = np.asarray(leaf_lo)
    hi = lo + leaf_size
    t_all = np.full(len(o), np.nan)
    j_all = np.full(len(o), -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        for s in range(0, len(o), chunk):
            oc, dc = o[s:s + chunk, None, :], d[s:s + chunk, None, :]
            t0 = (lo[None] - oc) / dc
            t1 = (hi[None] - oc) / dc
            t_in = np.maximum(np.nanmax(np.minimum(t0, t1), -1), t_near)
            t_out = np.minimum(np.nanmin(np.maximum(t0, t1), -1), t_far)
            t_in = np.where(t_in <= t_out, t_in, np.inf)
            j = np.argmin(t_in, axis=1)
            t = t_in[np.arange(len(j)), j]
            hit = np.isfinite(t)
            t_all[s:s + chunk] = np.where(hit, t, np.nan)
            j_all[s:s + chunk] = np.where(hit, j, -1)
    return t_all, j_all
