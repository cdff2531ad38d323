"""Hash-grid radiance field with hand-written reverse mode.

Positions (normalised to the octree root cube, [0, 1]^3) go through a
multi-resolution hash encoding and a one-hidden-layer density decoder
whose extra outputs form a latent code. The latent code and a degree-4
spherical-harmonics view encoding feed a three-layer colour decoder.

All parameters live in one flat vector; the per-block arrays are reshaped
views into it, so optimisers and checkpoints see a single array.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy.special import expit

PRIMES = (1, 2654435761, 805459861)
SH_DIM = 16
CHECKPOINT_MAGIC = b"VXNF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    n_levels: int = 8
    table_size_log2: int = 16
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5
    density_width: int = 64
    latent_dim: int = 15
    color_width: int = 64
    dtype: str = "float32"
    init_scale: float = 1e-4

    def __post_init__(self):
        if self.growth_factor <= 1:
            raise ValueError("growth_factor must exceed 1")
        if min(self.n_levels, self.features_per_level, self.base_resolution) < 1:
            raise ValueError("hash grid sizes must be positive")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def resolutions(self) -> np.ndarray:
        return np.floor(self.base_resolution * self.growth_factor ** np.arange(self.n_levels)).astype(np.int64)

    @property
    def encoding_dim(self) -> int:
        return self.n_levels * self.features_per_level

    def layout(self) -> dict[str, tuple[int, ...]]:
        e, w, h, c = self.encoding_dim, self.density_width, self.latent_dim, self.color_width
        return {
            "tables": (self.n_levels, self.table_size, self.features_per_level),
            "w1": (e, w), "b1": (w,),
            "w2": (w, 1 + h), "b2": (1 + h,),
            "w3": (h + SH_DIM, c), "b3": (c,),
            "w4": (c, c), "b4": (c,),
            "w5": (c, 3), "b5": (3,),
        }

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.layout().items():
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.layout().values())


class FieldParams:
    """Flat parameter vector plus named, reshaped views into it."""

    def __init__(self, config: FieldConfig, vector: np.ndarray):
        vector = np.ascontiguousarray(vector, dtype=config.dtype)
        if vector.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {vector.shape}")
        self.config = config
        self.vector = vector

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vector[self.config.slices()[name]].reshape(self.config.layout()[name])

    def views(self) -> dict[str, np.ndarray]:
        lay = self.config.layout()
        return {k: self.vector[s].reshape(lay[k]) for k, s in self.config.slices().items()}

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.vector.copy())

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.vector)):
            bad = [k for k, v in self.views().items() if not np.all(np.isfinite(v))]
            raise FloatingPointError(f"non-finite parameters in {bad}")


def init_params(config: FieldConfig, seed: int = 0) -> FieldParams:
    """Hash features uniform in +/-init_scale, He-uniform decoder weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = FieldParams(config, np.zeros(config.n_params, dtype=config.dtype))
    v = p.views()
    v["tables"][...] = rng.uniform(-config.init_scale, config.init_scale, v["tables"].shape)
    for name in ("w1", "w2", "w3", "w4", "w5"):
        fan_in = v[name].shape[0]
        bound = np.sqrt(6.0 / fan_in)
        v[name][...] = rng.uniform(-bound, bound, v[name].shape)
    return p


# --------------------------------------------------------------------------
# hash encoding


@numba.njit(cache=True, inline="always")
def _hash(i, j, k, mask):
    h = np.uint64(i) ^ (np.uint64(j) * np.uint64(2654435761)) ^ (np.uint64(k) * np.uint64(805459861))
    return np.int64(h & mask)


@numba.njit(cache=True)
def _encode_kernel(x, resolutions, tables, out):
    n = x.shape[0]
    n_levels, tsize, nf = tables.shape
    mask = np.uint64(tsize - 1)
    for p in range(n):
        for lev in range(n_levels):
            res = resolutions[lev]
            fx = x[p, 0] * res
            fy = x[p, 1] * res
            fz = x[p, 2] * res
            ix = np.int64(np.floor(fx))
            iy = np.int64(np.floor(fy))
            iz = np.int64(np.floor(fz))
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            for f in range(nf):
                out[p, lev * nf + f] = 0.0
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy) * (wz if dz else 1.0 - wz)
                slot = _hash(ix + dx, iy + dy, iz + dz, mask)
                for f in range(nf):
                    out[p, lev * nf + f] += w * tables[lev, slot, f]


@numba.njit(cache=True)
def _encode_backward_kernel(x, resolutions, grad_out, grad_tables):
    n = x.shape[0]
    n_levels, tsize, nf = grad_tables.shape
    mask = np.uint64(tsize - 1)
    for p in range(n):
        for lev in range(n_levels):
            res = resolutions[lev]
            fx = x[p, 0] * res
            fy = x[p, 1] * res
            fz = x[p, 2] * res
            ix = np.int64(np.floor(fx))
            iy = np.int64(np.floor(fy))
            iz = np.int64(np.floor(fz))
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy) * (wz if dz else 1.0 - wz)
                slot = _hash(ix + dx, iy + dy, iz + dz, mask)
                for f in range(nf):
                    grad_tables[lev, slot, f] += w * grad_out[p, lev * nf + f]


def hash_slots(config: FieldConfig, positions: np.ndarray) -> np.ndarray:
    """Table slots of the 8 lattice corners per level, shape ``(N, levels, 8)``."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(x), config.n_levels, 8), dtype=np.int64)
    corners = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.uint64)
    primes = np.array(PRIMES, dtype=np.uint64)
    for lev, res in enumerate(config.resolutions):
        base = np.floor(x * res).astype(np.uint64)
        ijk = base[:, None, :] + corners[None]
        h = (ijk * primes)
        out[:, lev] = ((h[..., 0] ^ h[..., 1] ^ h[..., 2]) & np.uint64(config.table_size - 1)).astype(np.int64)
    return out


def clamp_unit(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to [0, 1]^3; the flag marks points that were outside."""
    x = np.asarray(positions)
    outside = np.any((x < 0) | (x > 1), axis=-1)
    return np.clip(x, 0.0, 1.0), outside


def hash_encode(params: FieldParams, positions: np.ndarray) -> np.ndarray:
    """Concatenated trilinear hash features, shape ``(N, levels * features)``."""
    cfg = params.config
    x, _ = clamp_unit(np.asarray(positions, dtype=cfg.dtype).reshape(-1, 3))
    out = np.empty((len(x), cfg.encoding_dim), dtype=cfg.dtype)
    _encode_kernel(np.ascontiguousarray(x), cfg.resolutions, params["tables"], out)
    return out


def hash_encode_backward(params: FieldParams, positions: np.ndarray, grad_features: np.ndarray) -> np.ndarray:
    cfg = params.config
    x, _ = clamp_unit(np.asarray(positions, dtype=cfg.dtype).reshape(-1, 3))
    grad = np.zeros(cfg.layout()["tables"], dtype=cfg.dtype)
    _encode_backward_kernel(np.ascontiguousarray(x), cfg.resolutions,
                            np.ascontiguousarray(grad_features, dtype=cfg.dtype), grad)
    return grad


# --------------------------------------------------------------------------
# view-direction encoding


def dir_encode(directions: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to band 3 (16 values)."""
    d = np.asarray(directions)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = [
        np.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.94617469575755997 * zz - 0.31539156525251999,
        -1.0925484305920792 * x * z,
        0.54627421529603959 * (xx - yy),
        0.59004358992664352 * y * (-3.0 * xx + yy),
        2.8906114426405538 * x * y * z,
        0.45704579946446572 * y * (1.0 - 5.0 * zz),
        0.3731763325901154 * z * (5.0 * zz - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * zz),
        1.4453057213202769 * z * (xx - yy),
        0.59004358992664352 * x * (-xx + 3.0 * yy),
    ]
    return np.stack(out, axis=-1)


SH_BAND = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3])


# --------------------------------------------------------------------------
# decoders


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


@dataclass
class FieldOutput:
    """Per-point decoder outputs; ``cache`` holds activations for the backward pass."""

    density: np.ndarray
    color: np.ndarray
    hidden: np.ndarray
    cache: dict


def field_forward(params: FieldParams, positions, directions, ray_ids=None) -> FieldOutput:
    """Evaluate the field at unit-cube ``positions``.

    Without ``ray_ids`` each point has its own direction. With ``ray_ids``,
    ``directions`` holds one direction per ray and ``ray_ids[i]`` picks the
    one used by point ``i`` (the view term is then computed once per ray).
    """
    p = params.views()
    dt = params.config.dtype
    x = np.asarray(positions, dtype=dt).reshape(-1, 3)
    dirs = np.asarray(directions, dtype=dt).reshape(-1, 3)
    if ray_ids is None:
        ray_ids = np.arange(len(x))
        if len(dirs) != len(x):
            raise ValueError("one direction per position required without ray_ids")
    h = params.config.latent_dim

    enc = hash_encode(params, x)
    a1 = enc @ p["w1"] + p["b1"]
    h1 = np.maximum(a1, 0)
    o2 = h1 @ p["w2"] + p["b2"]
    raw = o2[:, 0]
    latent = o2[:, 1:]
    density = softplus(raw)

    sh = dir_encode(dirs).astype(dt, copy=False)
    view_term = (sh @ p["w3"][h:])[ray_ids]
    a3 = latent @ p["w3"][:h] + view_term + p["b3"]
    h3 = np.maximum(a3, 0)
    a4 = h3 @ p["w4"] + p["b4"]
    h4 = np.maximum(a4, 0)
    color = expit(h4 @ p["w5"] + p["b5"])

    cache = dict(x=x, enc=enc, a1=a1, h1=h1, raw=raw, latent=latent, sh=sh, ray_ids=ray_ids,
                 a3=a3, h3=h3, a4=a4, h4=h4, color=color)
    return FieldOutput(density, color, latent, cache)


def field_backward(params: FieldParams, out: FieldOutput, grad_density, grad_color) -> np.ndarray:
    """Gradient of a scalar loss with respect to the flat parameter vector,
    given its gradients with respect to ``out.density`` and ``out.color``."""
    cfg = params.config
    p = params.views()
    c = out.cache
    h = cfg.latent_dim
    dt = cfg.dtype
    gd = np.asarray(grad_density, dtype=dt).reshape(-1)
    gc = np.asarray(grad_color, dtype=dt).reshape(-1, 3)

    grad = FieldParams(cfg, np.zeros(cfg.n_params, dtype=dt))
    g = grad.views()

    col = c["color"]
    ga5 = gc * col * (1 - col)
    g["w5"][...] = c["h4"].T @ ga5
    g["b5"][...] = ga5.sum(0)
    ga4 = (ga5 @ p["w5"].T) * (c["a4"] > 0)
    g["w4"][...] = c["h3"].T @ ga4
    g["b4"][...] = ga4.sum(0)
    ga3 = (ga4 @ p["w4"].T) * (c["a3"] > 0)
    g["w3"][:h] = c["latent"].T @ ga3
    g["w3"][h:] = c["sh"][c["ray_ids"]].T @ ga3
    g["b3"][...] = ga3.sum(0)
    glatent = ga3 @ p["w3"][:h].T

    go2 = np.empty((len(gd), 1 + h), dtype=dt)
    go2[:, 0] = gd * expit(c["raw"])
    go2[:, 1:] = glatent
    g["w2"][...] = c["h1"].T @ go2
    g["b2"][...] = go2.sum(0)
    ga1 = (go2 @ p["w2"].T) * (c["a1"] > 0)
    g["w1"][...] = c["enc"].T @ ga1
    g["b1"][...] = ga1.sum(0)
    genc = ga1 @ p["w1"].T
    g["tables"][...] = hash_encode_backward(params, c["x"], genc)
    return grad.vector


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: FieldParams, meta: dict | None = None, optimizer=None) -> None:
    """Write ``VXNF`` | version | config JSON | float32 LE params [| Adam state]."""
    header = json.dumps({"field": asdict(params.config), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", params.config.n_params))
    buf.write(params.vector.astype("<f4").tobytes())
    if optimizer is not None:
        buf.write(b"ADAM")
        buf.write(struct.pack("<Q", optimizer.step))
        buf.write(optimizer.m.astype("<f4").tobytes())
        buf.write(optimizer.v.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(params, meta, adam_state_or_None)``."""
    from .train import AdamState

    data = open(path, "rb").read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a field checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    cfg = FieldConfig(**header["field"])
    if n != cfg.n_params:
        raise ValueError("parameter count does not match config")
    if len(data) < off + 4 * n:
        raise ValueError("truncated checkpoint")
    vec = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(cfg.dtype)
    off += 4 * n
    state = None
    if data[off:off + 4] == b"ADAM":
        (step,) = struct.unpack_from("<Q", data, off + 4)
        off += 12
        m = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(cfg.dtype)
        v = np.frombuffer(data, dtype="<f4", count=n, offset=off + 4 * n).astype(cfg.dtype)
        state = AdamState(m.copy(), v.copy(), int(step))
    return FieldParams(cfg, vec.copy()), header["meta"], state
