"""Sparse voxel octree over a noisy prior point cloud.

Leaves are addressed by 64-bit Morton keys (3 bits per level, up to 21
levels). Bit ``k`` of x lands on bit ``3k`` of the key, y on ``3k+1`` and
z on ``3k+2``. Each level stores its occupied keys as a sorted ``uint64``
array, so occupancy queries are a binary search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_LEVEL = 21
ROOT_PAD = 0.01
MIN_LEAF_FRACTION = 1e-3


class OctreeError(ValueError):
    pass


class EmptyInputError(OctreeError):
    pass


class GeometryError(OctreeError):
    pass


class ResolutionError(OctreeError):
    pass


class ParseError(ValueError):
    """Malformed point-cloud or dump file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# --------------------------------------------------------------------------
# Morton keys


def _spread3(v):
    v = v & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v):
    v = v & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _check_level(level: int) -> None:
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level must be in [0, {MAX_LEVEL}], got {level}")


def morton_encode(x, y, z, level: int = MAX_LEVEL):
    """Interleave grid coordinates into a Morton key.

    Accepts scalars or integer arrays of equal shape. Scalars return a
    Python ``int``, arrays return ``uint64``.
    """
    _check_level(level)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0 and np.ndim(z) == 0
    coords = [np.asarray(c, dtype=np.int64) for c in (x, y, z)]
    limit = 1 << level
    for name, c in zip("xyz", coords):
        if np.any(c < 0) or np.any(c >= limit):
            raise ValueError(f"{name} coordinate outside [0, {limit}) at level {level}")
    cx, cy, cz = (c.astype(np.uint64) for c in coords)
    code = _spread3(cx) | (_spread3(cy) << np.uint64(1)) | (_spread3(cz) << np.uint64(2))
    return int(code) if scalar else code


def morton_decode(code, level: int = MAX_LEVEL):
    """Inverse of :func:`morton_encode`; returns ``(x, y, z)``."""
    _check_level(level)
    scalar = np.ndim(code) == 0
    if scalar and int(code) < 0:
        raise ValueError("Morton code must be non-negative")
    c = np.asarray(code, dtype=np.uint64)
    if level < MAX_LEVEL and np.any(c >= np.uint64(1 << (3 * level))):
        raise ValueError(f"Morton code outside [0, 8^{level})")
    xyz = tuple(_compact3(c >> np.uint64(k)).astype(np.int64) for k in range(3))
    if scalar:
        return tuple(int(v) for v in xyz)
    return xyz


# --------------------------------------------------------------------------
# point clouds


@dataclass(frozen=True)
class PointCloud:
    """Prior points with a per-point noise radius (standard deviation, metres)."""

    positions: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        sig = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if sig.shape[0] != pos.shape[0]:
            raise ValueError("one sigma per point required")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        if not np.all(np.isfinite(sig)) or np.any(sig < 0):
            raise ValueError("noise sigmas must be finite and >= 0")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "sigmas", sig)

    @classmethod
    def from_positions(cls, positions, sigma: float = 0.0) -> "PointCloud":
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return cls(pos, np.full(len(pos), float(sigma)))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise EmptyInputError("point cloud is empty")
        return self.positions.min(axis=0), self.positions.max(axis=0)


def choose_leaf_size(cloud: PointCloud, min_fraction: float = MIN_LEAF_FRACTION) -> float:
    """Largest per-point noise sigma; degenerate all-zero clouds fall back to a
    fraction of the bounding-box diagonal."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot choose a leaf size for an empty cloud")
    v = float(cloud.sigmas.max())
    if v > 0:
        return v
    lo, hi = cloud.bounds
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise GeometryError("all sigmas are zero and the cloud has zero extent")
    return min_fraction * diag


# --------------------------------------------------------------------------
# octree


@dataclass(frozen=True)
class SparseVoxelOctree:
    """Immutable occupancy octree.

    ``levels[l]`` holds the sorted occupied Morton keys at level ``l``
    (level 0 is the root, ``levels[max_level]`` the leaves).
    """

    origin: np.ndarray
    side: float
    max_level: int
    levels: tuple[np.ndarray, ...] = field(repr=False)
    scene_bounds: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def leaf_size(self) -> float:
        return self.side / (1 << self.max_level)

    @property
    def scene_diagonal(self) -> float:
        """Diagonal of the source cloud's bounding box (root cube if unknown)."""
        if self.scene_bounds is not None:
            diag = float(np.linalg.norm(self.scene_bounds[1] - self.scene_bounds[0]))
            if diag > 0:
                return diag
        return self.diagonal

    @property
    def occupied_leaves(self) -> np.ndarray:
        return self.levels[self.max_level]

    @property
    def root_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.side

    @property
    def diagonal(self) -> float:
        return float(np.sqrt(3.0) * self.side)

    def cell_size(self, level: int) -> float:
        return self.side / (1 << level)

    def leaf_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """Min/max corners of every occupied leaf, in key order."""
        ijk = np.stack(morton_decode(self.occupied_leaves, self.max_level), axis=-1)
        lo = self.origin + ijk * self.leaf_size
        return lo, lo + self.leaf_size

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        """World coordinates to the root cube's normalised [0, 1]^3 frame."""
        return (np.asarray(points) - self.origin) / self.side

    def flat_levels(self) -> tuple[np.ndarray, np.ndarray]:
        """All level arrays concatenated, plus offsets (for compiled kernels)."""
        offsets = np.zeros(self.max_level + 2, dtype=np.int64)
        offsets[1:] = np.cumsum([len(a) for a in self.levels])
        return np.concatenate(self.levels), offsets


def cubify_bounds(lo: np.ndarray, hi: np.ndarray, pad: float = ROOT_PAD) -> tuple[np.ndarray, float]:
    """Smallest cube around the box, centred on it, grown by ``pad`` of the side per face."""
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise GeometryError("point cloud has zero extent; pass an explicit root")
    side = extent * (1.0 + 2.0 * pad)
    center = 0.5 * (lo + hi)
    return center - 0.5 * side, side


def _levels_from_leaves(leaves: np.ndarray, max_level: int) -> tuple[np.ndarray, ...]:
    levels = [np.unique(leaves.astype(np.uint64))]
    for _ in range(max_level):
        levels.append(np.unique(levels[-1] >> np.uint64(3)))
    return tuple(reversed(levels))


def build_octree(
    cloud: PointCloud,
    leaf_size: float | None = None,
    *,
    root: tuple[np.ndarray, float] | None = None,
    max_level: int | None = None,
) -> SparseVoxelOctree:
    """Voxelise ``cloud`` into an octree.

    The depth is the largest ``L`` whose leaf ``side / 2**L`` still covers
    the requested leaf size (by default the maximal point sigma), so every
    leaf is at least as wide as the worst-case noise radius. ``root`` is an
    optional ``(origin, side)`` cube and ``max_level`` pins the depth
    directly.
    """
    if len(cloud) == 0:
        raise EmptyInputError("cannot build an octree from an empty cloud")
    if root is None:
        origin, side = cubify_bounds(*cloud.bounds)
    else:
        origin, side = np.asarray(root[0], dtype=np.float64), float(root[1])
        if side <= 0:
            raise GeometryError("root side must be positive")

    if max_level is None:
        v = choose_leaf_size(cloud) if leaf_size is None else float(leaf_size)
        if not v > 0:
            raise GeometryError("leaf size must be positive")
        depth = int(np.floor(np.log2(side / v) + 1e-12))
        if depth > MAX_LEVEL:
            raise ResolutionError(
                f"leaf size {v:g} needs {depth} levels (max {MAX_LEVEL}); "
                "raise the leaf size or shrink the scene"
            )
        max_level = max(depth, 1)
    _check_level(max_level)

    n = 1 << max_level
    ijk = np.floor((cloud.positions - origin) / (side / n)).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < n), axis=1)
    if not np.any(inside):
        raise GeometryError("no point falls inside the root cube")
    ijk = ijk[inside]
    leaves = morton_encode(ijk[:, 0], ijk[:, 1], ijk[:, 2], max_level)
    return SparseVoxelOctree(origin, side, max_level, _levels_from_leaves(leaves, max_level),
                             scene_bounds=cloud.bounds)


def is_occupied(svo: SparseVoxelOctree, code: int, level: int) -> bool:
    if not 0 <= level <= svo.max_level:
        raise ValueError(f"level must be in [0, {svo.max_level}]")
    if not 0 <= code < 8**level:
        raise ValueError(f"code outside [0, 8^{level})")
    keys = svo.levels[level]
    i = np.searchsorted(keys, np.uint64(code))
    return bool(i < len(keys) and keys[i] == np.uint64(code))


# --------------------------------------------------------------------------
# file formats


def write_octree_dump(svo: SparseVoxelOctree, path) -> None:
    """One occupied leaf per line: ``level code x y z``."""
    x, y, z = morton_decode(svo.occupied_leaves, svo.max_level)
    with open(path, "w") as fh:
        for c, i, j, k in zip(svo.occupied_leaves.tolist(), x.tolist(), y.tolist(), z.tolist()):
            fh.write(f"{svo.max_level} {c} {i} {j} {k}\n")


def read_octree_dump(path, origin, side: float) -> SparseVoxelOctree:
    data = Path(path).read_bytes()
    codes, level, offset = [], None, 0
    for line in data.splitlines(keepends=True):
        parts = line.split()
        if parts:
            try:
                lv, code = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                raise ParseError("bad octree dump line", offset) from None
            if level is not None and lv != level:
                raise ParseError("mixed leaf levels", offset)
            level = lv
            codes.append(code)
        offset += len(line)
    if not codes:
        raise ParseError("empty octree dump", offset)
    leaves = np.array(codes, dtype=np.uint64)
    return SparseVoxelOctree(np.asarray(origin, dtype=np.float64), float(side), level,
                             _levels_from_leaves(leaves, level))


def write_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nproperty float sigma\n")
        fh.write("end_header\n")
        for p, s in zip(cloud.positions.tolist(), cloud.sigmas.tolist()):
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {s!r}\n")


def read_ply(path, default_sigma: float | None = None) -> PointCloud:
    """Read the ASCII PLY subset: ``x y z`` plus an optional ``sigma`` property.

    Clouds without sigma need ``default_sigma``.
    """
    data = Path(path).read_bytes()
    lines = data.splitlines(keepends=True)
    offset = 0
    if not lines or lines[0].strip() != b"ply":
        raise ParseError("missing 'ply' magic", 0)
    n_vertex, props, in_vertex = None, [], False
    body_start = None
    for i, raw in enumerate(lines):
        tok = raw.split()
        if i == 0:
            offset += len(raw)
            continue
        if tok[:1] == [b"format"] and tok[1:2] != [b"ascii"]:
            raise ParseError("only ascii PLY is supported", offset)
        elif tok[:1] == [b"element"]:
            in_vertex = tok[1:2] == [b"vertex"]
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex count", offset) from None
        elif tok[:1] == [b"property"] and in_vertex:
            props.append(tok[-1].decode())
        elif tok[:1] == [b"end_header"]:
            offset += len(raw)
            body_start = i + 1
            break
        offset += len(raw)
    if body_start is None or n_vertex is None:
        raise ParseError("incomplete PLY header", offset)
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError:
        raise ParseError("PLY vertex lacks x/y/z", offset) from None
    sig_col = props.index("sigma") if "sigma" in props else None
    if sig_col is None and default_sigma is None:
        raise ValueError("PLY has no sigma property; supply a global sigma")

    rows = []
    for raw in lines[body_start:body_start + n_vertex]:
        try:
            vals = [float(t) for t in raw.split()]
            if len(vals) < len(props):
                raise ValueError
        except ValueError:
            raise ParseError("bad vertex row", offset) from None
        rows.append(vals)
        offset += len(raw)
    if len(rows) < n_vertex:
        raise ParseError(f"expected {n_vertex} vertices, found {len(rows)}", offset)
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(props))
    sig = arr[:, sig_col] if sig_col is not None else np.full(len(arr), float(default_sigma))
    return PointCloud(arr[:, cols], sig)


def read_xyz(path, default_sigma: float | None = None) -> PointCloud:
    """One point per line, ``x y z [sigma]``."""
    data = Path(path).read_bytes()
    pos, sig, offset = [], [], 0
    for raw in data.splitlines(keepends=True):
        tok = raw.split()
        if tok:
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise ParseError("non-numeric token", offset) from None
            if len(vals) == 3:
                if default_sigma is None:
                    raise ParseError("point without sigma and no global sigma given", offset)
                vals.append(float(default_sigma))
            elif len(vals) != 4:
                raise ParseError("expected 3 or 4 columns", offset)
            pos.append(vals[:3])
            sig.append(vals[3])
        offset += len(raw)
    return PointCloud(np.array(pos).reshape(-1, 3), np.array(sig))


def write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        for p, s in zip(cloud.positions.tolist(), cloud.sigmas.tolist()):
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {s!r}\n")


def read_cloud(path, default_sigma: float | None = None) -> PointCloud:
    if str(path).lower().endswith(".ply"):
        return read_ply(path, default_sigma)
    return read_xyz(path, default_sigma)
