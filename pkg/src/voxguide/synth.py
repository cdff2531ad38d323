"""Analytic indoor scenes: closed-form ray tracing, posed RGB-D datasets and
noisy prior point clouds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raycast import Camera, camera_rays
from .svo import PointCloud

HIT_EPS = 1e-9
EDGE_TOL = 1e-9
WALL_NAMES = ("x-", "x+", "y-", "y+", "floor", "ceiling")


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if np.any(lo >= hi):
            raise ValueError("box needs min < max on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "albedo", np.asarray(self.albedo, float))

    kind = "box"

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.lo - o) * inv
            t1 = (self.hi - o) * inv
        tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
        t_in, t_out = tmin.max(-1), tmax.min(-1)
        t = np.where(t_in > HIT_EPS, t_in, t_out)
        ok = (t_in <= t_out) & (t > HIT_EPS)
        t = np.where(ok, t, np.inf)
        p = o + np.where(ok, t, 0.0)[:, None] * d
        c = 0.5 * (self.lo + self.hi)
        h = 0.5 * (self.hi - self.lo)
        q = (p - c) / h
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
        return t, n

    def distance(self, p):
        c = 0.5 * (self.lo + self.hi)
        h = 0.5 * (self.hi - self.lo)
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = -np.max(q, axis=-1)
        return np.where(np.all(q <= 0, axis=-1), inside, outside)

    def area(self):
        e = self.hi - self.lo
        return 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample(self, n, rng):
        e = self.hi - self.lo
        face_areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]])
        face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.random((n, 3))
        p = self.lo + u * e
        axis = face // 2
        side = face % 2
        p[np.arange(n), axis] = np.where(side == 1, self.hi[axis], self.lo[axis])
        return p

    def to_dict(self):
        return {"kind": "box", "min": self.lo.tolist(), "max": self.hi.tolist(), "albedo": self.albedo.tolist()}


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    kind = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, float))

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, -1)
        c = np.sum(oc * oc, -1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > HIT_EPS, t0, t1)
        t = np.where((disc >= 0) & (t > HIT_EPS), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius

    def distance(self, p):
        return np.abs(np.linalg.norm(p - self.center, axis=-1) - self.radius)

    def area(self):
        return 4.0 * np.pi * self.radius ** 2

    def sample(self, n, rng):
        v = rng.standard_normal((n, 3))
        return self.center + self.radius * v / np.linalg.norm(v, axis=-1, keepdims=True)

    def to_dict(self):
        return {"kind": "sphere", "center": self.center.tolist(), "radius": self.radius,
                "albedo": self.albedo.tolist()}


@dataclass(frozen=True)
class Rect:
    """Two-sided rectangle ``center + a u + b v`` with ``a, b`` in [-1, 1]."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    albedo: np.ndarray

    kind = "rect"

    def __post_init__(self):
        u, v = np.asarray(self.u, float), np.asarray(self.v, float)
        if np.linalg.norm(np.cross(u, v)) <= 0:
            raise ValueError("rectangle edges must be non-degenerate")
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "albedo", np.asarray(self.albedo, float))

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def intersect(self, o, d):
        n = self.normal
        dn = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ n) / dn
        p = o + np.nan_to_num(t, nan=0.0, posinf=0.0, neginf=0.0)[:, None] * d
        rel = p - self.center
        a = rel @ self.u / (self.u @ self.u)
        b = rel @ self.v / (self.v @ self.v)
        ok = (dn != 0) & (t > HIT_EPS) & (np.abs(a) <= 1 + EDGE_TOL) & (np.abs(b) <= 1 + EDGE_TOL)
        return np.where(ok, t, np.inf), np.broadcast_to(n, p.shape).copy()

    def distance(self, p):
        rel = p - self.center
        uu, vv = self.u @ self.u, self.v @ self.v
        a = np.clip(rel @ self.u / uu, -1, 1)
        b = np.clip(rel @ self.v / vv, -1, 1)
        q = self.center + a[:, None] * self.u + b[:, None] * self.v
        return np.linalg.norm(p - q, axis=-1)

    def area(self):
        return 4.0 * np.linalg.norm(np.cross(self.u, self.v))

    def sample(self, n, rng):
        ab = rng.uniform(-1, 1, (n, 2))
        return self.center + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def to_dict(self):
        return {"kind": "rect", "center": self.center.tolist(), "u": self.u.tolist(), "v": self.v.tolist(),
                "albedo": self.albedo.tolist()}


def primitive_from_dict(d: dict):
    kind = d["kind"]
    if kind == "box":
        return Box(d["min"], d["max"], d["albedo"])
    if kind == "sphere":
        return Sphere(d["center"], float(d["radius"]), d["albedo"])
    if kind in ("rect", "plane-rect"):
        return Rect(d["center"], d["u"], d["v"], d["albedo"])
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass(frozen=True)
class SyntheticScene:
    room_lo: np.ndarray
    room_hi: np.ndarray
    primitives: tuple = ()
    wall_albedo: np.ndarray = field(default_factory=lambda: np.full((6, 3), 0.7))
    light: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.5, 1.0]))
    ambient: float = 0.35

    def __post_init__(self):
        lo, hi = np.asarray(self.room_lo, float), np.asarray(self.room_hi, float)
        if np.any(lo >= hi):
            raise ValueError("room needs min < max")
        wa = np.broadcast_to(np.asarray(self.wall_albedo, float), (6, 3)).copy()
        light = np.asarray(self.light, float)
        if not 0 <= self.ambient <= 1:
            raise ValueError("ambient must lie in [0, 1]")
        object.__setattr__(self, "room_lo", lo)
        object.__setattr__(self, "room_hi", hi)
        object.__setattr__(self, "wall_albedo", wa)
        object.__setattr__(self, "light", light / np.linalg.norm(light))
        object.__setattr__(self, "primitives", tuple(self.primitives))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.room_hi - self.room_lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.room_lo + self.room_hi)

    def walls(self) -> list[Rect]:
        """The six room faces as rectangles, ordered x-, x+, y-, y+, floor, ceiling."""
        lo, hi, c = self.room_lo, self.room_hi, self.center
        h = 0.5 * (hi - lo)
        e = np.eye(3)
        out = []
        for axis in range(3):
            a1, a2 = [a for a in range(3) if a != axis]
            for side, pos in enumerate((lo[axis], hi[axis])):
                cen = c.copy()
                cen[axis] = pos
                out.append(Rect(cen, e[a1] * h[a1], e[a2] * h[a2], self.wall_albedo[2 * axis + side]))
        return out

    def surfaces(self) -> list:
        return list(self.primitives) + self.walls()

    def to_dict(self) -> dict:
        return {
            "room": {"min": self.room_lo.tolist(), "max": self.room_hi.tolist()},
            "wall_albedo": self.wall_albedo.tolist(),
            "light": self.light.tolist(),
            "ambient": self.ambient,
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(d["room"]["min"], d["room"]["max"],
                   tuple(primitive_from_dict(p) for p in d.get("primitives", [])),
                   d.get("wall_albedo", 0.7), d.get("light", [0.3, 0.5, 1.0]), float(d.get("ambient", 0.35)))


def save_scene(scene: SyntheticScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def load_scene(path) -> SyntheticScene:
    return SyntheticScene.from_dict(json.loads(Path(path).read_text()))


def toy_room() -> SyntheticScene:
    """4 m x 3 m x 2.5 m room with a table, a ball and a poster."""
    return SyntheticScene(
        room_lo=[-2.0, -1.5, 0.0],
        room_hi=[2.0, 1.5, 2.5],
        primitives=(
            Box([0.5, 0.3, 0.0], [1.5, 1.1, 0.75], [0.65, 0.42, 0.2]),
            Sphere([-1.0, -0.6, 0.5], 0.4, [0.2, 0.45, 0.85]),
            Rect([-1.97, 0.4, 1.4], [0.0, 0.55, 0.0], [0.0, 0.0, 0.35], [0.9, 0.2, 0.2]),
        ),
        wall_albedo=[
            [0.70, 0.75, 0.82],
            [0.82, 0.70, 0.58],
            [0.55, 0.78, 0.58],
            [0.78, 0.76, 0.50],
            [0.50, 0.44, 0.40],
            [0.92, 0.92, 0.92],
        ],
        light=[0.3, 0.5, 1.0],
        ambient=0.35,
    )


# --------------------------------------------------------------------------
# oracle


@dataclass
class TraceResult:
    t: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    shade: np.ndarray


def trace(scene: SyntheticScene, origins, directions) -> TraceResult:
    """Nearest positive intersection over primitives and walls, with Lambertian
    shading ``albedo * (ambient + (1 - ambient) max(0, n . l))``; normals are
    flipped to face the incoming ray."""
    o = np.asarray(origins, float).reshape(-1, 3)
    d = np.asarray(directions, float).reshape(-1, 3)
    n = len(o)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_a = np.zeros((n, 3))
    for s in scene.surfaces():
        t, nrm = s.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = nrm[closer]
        best_a[closer] = s.albedo
    flip = np.sum(best_n * d, -1) > 0
    best_n[flip] *= -1
    lam = np.maximum(best_n @ scene.light, 0.0)
    shade = best_a * (scene.ambient + (1 - scene.ambient) * lam)[:, None]
    return TraceResult(best_t, best_n, best_a, np.clip(shade, 0, 1))


def oracle_trace(scene: SyntheticScene, ray):
    """Single-ray oracle: ``(t_hit or None, normal, albedo)``."""
    r = trace(scene, ray.origin[None], ray.direction[None])
    t = float(r.t[0])
    return (t if np.isfinite(t) else None), r.normal[0], r.albedo[0]


def oracle_render(scene: SyntheticScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth image (H, W, 3) and ray-distance depth (H, W)."""
    o, d = camera_rays(camera)
    r = trace(scene, o, d)
    H, W = camera.height, camera.width
    return r.shade.reshape(H, W, 3), r.t.reshape(H, W)


def surface_distance(scene: SyntheticScene, points) -> np.ndarray:
    p = np.asarray(points, float).reshape(-1, 3)
    room = Box(scene.room_lo, scene.room_hi, np.zeros(3))
    dist = room.distance(p)
    for s in scene.primitives:
        dist = np.minimum(dist, s.distance(p))
    return dist


# --------------------------------------------------------------------------
# priors


def sample_surface(scene: SyntheticScene, n: int, rng: np.random.Generator) -> np.ndarray:
    surfaces = scene.surfaces()
    areas = np.array([s.area() for s in surfaces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = [s.sample(int(k), rng) for s, k in zip(surfaces, counts) if k]
    return np.concatenate(pts)[rng.permutation(n)]


def sample_prior_cloud(scene: SyntheticScene, n_points: int, noise_sigma: float, outlier_frac: float,
                       rng: np.random.Generator, return_clean: bool = False):
    """Area-weighted surface samples plus isotropic Gaussian noise; a fraction of
    points is replaced by uniform outliers inside the room. Every point records
    ``noise_sigma`` as its sigma."""
    if n_points < 1 or noise_sigma < 0 or not 0 <= outlier_frac < 0.5:
        raise ValueError("need n_points >= 1, noise_sigma >= 0, 0 <= outlier_frac < 0.5")
    clean = sample_surface(scene, n_points, rng)
    noisy = clean + noise_sigma * rng.standard_normal(clean.shape)
    n_out = int(round(outlier_frac * n_points))
    if n_out:
        idx = rng.choice(n_points, n_out, replace=False)
        noisy[idx] = rng.uniform(scene.room_lo, scene.room_hi, (n_out, 3))
    cloud = PointCloud(noisy, np.full(n_points, float(noise_sigma)))
    return (cloud, clean) if return_clean else cloud


# --------------------------------------------------------------------------
# datasets


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    f = np.asarray(forward, float)
    f = f / np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    return np.stack([r, np.cross(f, r), f], axis=1)


def yaw_pitch_dir(yaw: float, pitch: float) -> np.ndarray:
    return np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])


@dataclass
class Dataset:
    cameras: list
    images: list
    depths: list
    split: list

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.depths) == len(self.split)):
            raise ValueError("dataset lists must align")
        bad = set(self.split) - {"train", "test_interp", "test_extrap"}
        if bad:
            raise ValueError(f"unknown split labels {bad}")

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]


@dataclass(frozen=True)
class TrajectoryConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 75.0
    radius: float = 0.45
    height_m: float = 1.3
    pitch_deg: float = -12.0
    extrap_pitch_deg: float = 30.0


def _pose(scene, kind, yaw, pitch, tc: TrajectoryConfig):
    c = scene.center.copy()
    c[2] = scene.room_lo[2] + tc.height_m
    if kind == "orbit":
        pos = c + tc.radius * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        to_center = c - pos
        to_center /= np.linalg.norm(to_center)
        fwd = to_center * np.cos(pitch) + np.array([0, 0, np.sin(pitch)])
    else:
        pos = c + tc.radius * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        fwd = yaw_pitch_dir(yaw, pitch)
    return look_rotation(fwd), pos


def make_cameras(scene: SyntheticScene, n_train: int, n_test: int, trajectory: str = "inside-out",
                 seed: int = 0, tc: TrajectoryConfig = TrajectoryConfig()):
    """Train poses at equal yaw steps along a closed path, interpolation poses
    at yaw midpoints of adjacent train poses, extrapolation poses tilted off
    the path's pitch. Returns ``(cameras, split)``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test view")
    if trajectory not in ("orbit", "inside-out"):
        raise ValueError(f"unknown trajectory {trajectory!r}")
    rng = np.random.default_rng(seed)
    step = 2 * np.pi / n_train
    phase = rng.uniform(0, step)
    f = 0.5 * tc.width / np.tan(np.radians(tc.fov_deg) / 2)
    intr = dict(fx=f, fy=f, cx=tc.width / 2, cy=tc.height / 2, width=tc.width, height=tc.height)
    pitch = np.radians(tc.pitch_deg)

    cams, split = [], []
    for i in range(n_train):
        R, t = _pose(scene, trajectory, phase + i * step, pitch, tc)
        cams.append(Camera(rotation=R, translation=t, **intr))
        split.append("train")
    pick = np.floor(np.arange(n_test) * n_train / n_test).astype(int)
    for i in pick:
        R, t = _pose(scene, trajectory, phase + (i + 0.5) * step, pitch, tc)
        cams.append(Camera(rotation=R, translation=t, **intr))
        split.append("test_interp")
    for j, i in enumerate(pick):
        tilt = np.radians(tc.extrap_pitch_deg) * (1 if j % 2 == 0 else -1)
        R, t = _pose(scene, trajectory, phase + (i + 0.5) * step, pitch + tilt, tc)
        cams.append(Camera(rotation=R, translation=t, **intr))
        split.append("test_extrap")
    return cams, split


def make_dataset(scene: SyntheticScene, n_train: int, n_test: int, trajectory: str = "inside-out",
                 seed: int = 0, tc: TrajectoryConfig = TrajectoryConfig()) -> Dataset:
    cams, split = make_cameras(scene, n_train, n_test, trajectory, seed, tc)
    images, depths = zip(*(oracle_render(scene, c) for c in cams))
    return Dataset(cams, list(images), list(depths), split)


def view_angle(a: Camera, b: Camera) -> float:
    """Angle between two cameras' viewing directions, radians."""
    return float(np.arccos(np.clip(a.forward @ b.forward, -1.0, 1.0)))


def save_dataset(ds: Dataset, root) -> None:
    from .metrics import write_depth, write_ppm
    from .raycast import save_cameras

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(exist_ok=True)
    save_cameras(ds.cameras, root / "cameras.json")
    for i, (img, dep) in enumerate(zip(ds.images, ds.depths)):
        write_ppm(root / "images" / f"{i:04d}.ppm", img)
        write_depth(root / "depths" / f"{i:04d}.raw", dep)
    (root / "split.json").write_text(json.dumps({"split": ds.split}, indent=1))


def load_dataset(root) -> Dataset:
    from .metrics import read_depth, read_ppm
    from .raycast import load_cameras

    root = Path(root)
    cams = load_cameras(root / "cameras.json")
    split = json.loads((root / "split.json").read_text())["split"]
    images = [read_ppm(root / "images" / f"{i:04d}.ppm") for i in range(len(cams))]
    depths = [read_depth(root / "depths" / f"{i:04d}.raw") for i in range(len(cams))]
    return Dataset(cams, images, depths, split)
