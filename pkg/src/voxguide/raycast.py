"""Pinhole cameras, rays, slab tests and first-hit octree traversal."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numba
import numpy as np

from .svo import SparseVoxelOctree

DEFAULT_T_NEAR = 1e-3
FAR_DIAGONALS = 1.5


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map camera to world.

    Camera axes: +x right, +y down, +z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates (pixel centres at +0.5)."""
        pc = (np.asarray(points) - self.translation) @ self.rotation
        u = self.fx * pc[..., 0] / pc[..., 2] + self.cx
        v = self.fy * pc[..., 1] / pc[..., 2] + self.cy
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "c2w": self.c2w().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        m = np.asarray(d["c2w"], dtype=np.float64)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), m[:3, :3], m[:3, 3])


def save_cameras(cameras: list[Camera], path) -> None:
    with open(path, "w") as fh:
        json.dump({"cameras": [c.to_dict() for c in cameras]}, fh, indent=1)


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        return [Camera.from_dict(d) for d in json.load(fh)["cameras"]]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = DEFAULT_T_NEAR
    t_far: float = 10.0

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (np.isfinite(self.t_near) and np.isfinite(self.t_far)) or not (
            0 <= self.t_near < self.t_far
        ):
            raise ValueError("need finite 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class HitResult:
    hit: bool
    t_hit: float = float("nan")
    leaf: int = -1


def default_far(svo_or_diag) -> float:
    """Far bound: 1.5 scene diagonals."""
    if isinstance(svo_or_diag, SparseVoxelOctree):
        return FAR_DIAGONALS * svo_or_diag.scene_diagonal
    return FAR_DIAGONALS * float(svo_or_diag)


def pixel_directions(camera: Camera, px, py) -> np.ndarray:
    px, py = np.broadcast_arrays(np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64))
    cam = np.stack([(px + 0.5 - camera.cx) / camera.fx,
                    (py + 0.5 - camera.cy) / camera.fy,
                    np.ones_like(px)], axis=-1)
    d = cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera: Camera, px: float, py: float,
                 t_near: float = DEFAULT_T_NEAR, t_far: float = 10.0) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError("pixel outside the image")
    return Ray(camera.translation, pixel_directions(camera, px, py), t_near, t_far)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major ``(H*W, 3)``."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    d = pixel_directions(camera, px.ravel(), py.ravel())
    return np.broadcast_to(camera.translation, d.shape).copy(), d


def slab_intervals(origins, directions, box_min, box_max, t_near, t_far):
    """Vectorised slab test. Returns ``(t_enter, t_exit, hit)``.

    Zero direction components use IEEE infinities. Where that yields NaN
    (origin exactly on a slab plane of a parallel ray) the slab is treated
    as closed: unbounded if the origin is within it, empty otherwise.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    bmin = np.asarray(box_min, dtype=np.float64)
    bmax = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    bad = np.isnan(lo) | np.isnan(hi)
    if np.any(bad):
        within = (o >= bmin) & (o <= bmax)
        lo = np.where(bad, np.where(within, -np.inf, np.inf), lo)
        hi = np.where(bad, np.where(within, np.inf, -np.inf), hi)
    t_enter = np.maximum(lo.max(axis=-1), t_near)
    t_exit = np.minimum(hi.min(axis=-1), t_far)
    return t_enter, t_exit, t_enter <= t_exit


def intersect_aabb(ray: Ray, box_min, box_max) -> tuple[float, float] | None:
    if np.any(np.asarray(box_min) > np.asarray(box_max)):
        raise ValueError("box_min must be <= box_max")
    t0, t1, hit = slab_intervals(ray.origin, ray.direction, box_min, box_max, ray.t_near, ray.t_far)
    return (float(t0), float(t1)) if hit else None


# --------------------------------------------------------------------------
# compiled traversal


@numba.njit(cache=True)
def _slab(o, inv, lo, size, t_near, t_far):
    t_in = t_near
    t_out = t_far
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (lo[a] + size - o[a]) * inv[a]
        if ta != ta or tb != tb:  # origin on the plane of a parallel slab
            if o[a] < lo[a] or o[a] > lo[a] + size:
                return np.inf, -np.inf
            continue
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_in:
            t_in = ta
        if tb < t_out:
            t_out = tb
    return t_in, t_out


@numba.njit(cache=True)
def _contains(keys, start, stop, code):
    lo = start
    hi = stop
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < code:
            lo = mid + 1
        else:
            hi = mid
    return lo < stop and keys[lo] == code


@numba.njit(cache=True)
def _first_hit_kernel(origins, dirs, t_near, t_far, root, side, max_level, keys, offsets,
                      out_t, out_code):
    n = origins.shape[0]
    cap = 8 * (max_level + 1) + 8
    st_level = np.empty(cap, np.int64)
    st_code = np.empty(cap, np.uint64)
    st_ijk = np.empty((cap, 3), np.int64)
    lo = np.empty(3)
    inv = np.empty(3)
    ch_t = np.empty(8)
    ch_i = np.empty(8, np.int64)
    for r in range(n):
        o = origins[r]
        for a in range(3):
            inv[a] = 1.0 / dirs[r, a] if dirs[r, a] != 0.0 else (np.inf if not np.signbit(dirs[r, a]) else -np.inf)
        out_t[r] = np.nan
        out_code[r] = np.uint64(0)
        tn = t_near[r]
        tf = t_far[r]
        if offsets[1] - offsets[0] == 0:
            continue
        t_in, t_out = _slab(o, inv, root, side, tn, tf)
        if t_in > t_out:
            continue
        sp = 0
        st_level[0] = 0
        st_code[0] = np.uint64(0)
        st_ijk[0, 0] = 0
        st_ijk[0, 1] = 0
        st_ijk[0, 2] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            lev = st_level[sp]
            code = st_code[sp]
            i0 = st_ijk[sp, 0]
            j0 = st_ijk[sp, 1]
            k0 = st_ijk[sp, 2]
            if lev == max_level:
                size = side / (1 << lev)
                lo[0] = root[0] + i0 * size
                lo[1] = root[1] + j0 * size
                lo[2] = root[2] + k0 * size
                t_in, t_out = _slab(o, inv, lo, size, tn, tf)
                out_t[r] = t_in
                out_code[r] = code
                break
            clev = lev + 1
            size = side / (1 << clev)
            nc = 0
            for c in range(8):
                ccode = (code << np.uint64(3)) | np.uint64(c)
                if not _contains(keys, offsets[clev], offsets[clev + 1], ccode):
                    continue
                lo[0] = root[0] + (2 * i0 + (c & 1)) * size
                lo[1] = root[1] + (2 * j0 + ((c >> 1) & 1)) * size
                lo[2] = root[2] + (2 * k0 + ((c >> 2) & 1)) * size
                t_in, t_out = _slab(o, inv, lo, size, tn, tf)
                if t_in > t_out:
                    continue
                # insertion sort by entry parameter, nearest first
                p = nc
                while p > 0 and ch_t[p - 1] > t_in:
                    ch_t[p] = ch_t[p - 1]
                    ch_i[p] = ch_i[p - 1]
                    p -= 1
                ch_t[p] = t_in
                ch_i[p] = c
                nc += 1
            # push far-to-near so the nearest child pops first
            for q in range(nc - 1, -1, -1):
                c = ch_i[q]
                st_level[sp] = clev
                st_code[sp] = (code << np.uint64(3)) | np.uint64(c)
                st_ijk[sp, 0] = 2 * i0 + (c & 1)
                st_ijk[sp, 1] = 2 * j0 + ((c >> 1) & 1)
                st_ijk[sp, 2] = 2 * k0 + ((c >> 2) & 1)
                sp += 1


def first_hit_batch(svo: SparseVoxelOctree, origins, directions, t_near, t_far):
    """First occupied leaf along each ray.

    Returns ``(t_hit, leaf_code)``; ``t_hit`` is NaN for misses. Children
    are visited nearest-entry first, so the first leaf reached is the one
    with minimal entry parameter.
    """
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    n = len(o)
    tn = np.ascontiguousarray(np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,)))
    tf = np.ascontiguousarray(np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,)))
    keys, offsets = svo.flat_levels()
    out_t = np.empty(n)
    out_code = np.empty(n, dtype=np.uint64)
    _first_hit_kernel(o, d, tn, tf, np.asarray(svo.origin, dtype=np.float64), float(svo.side),
                      svo.max_level, keys, offsets, out_t, out_code)
    return out_t, out_code


def first_hit(svo: SparseVoxelOctree, ray: Ray) -> HitResult:
    t, code = first_hit_batch(svo, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far)
    if np.isnan(t[0]):
        return HitResult(False)
    return HitResult(True, float(t[0]), int(code[0]))
