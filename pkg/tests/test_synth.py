import numpy as np
import pytest

from oracles import ray_box_bisect
from voxguide.raycast import Ray
from voxguide.synth import (
    Box,
    SyntheticScene,
    load_dataset,
    load_scene,
    make_cameras,
    make_dataset,
    oracle_trace,
    sample_prior_cloud,
    save_dataset,
    save_scene,
    surface_distance,
    toy_room,
    trace,
    view_angle,
)

ROOM = toy_room()


def random_inside_rays(rng, n):
    o = rng.uniform(ROOM.room_lo + 0.1, ROOM.room_hi - 0.1, (n, 3))
    d = rng.normal(size=(n, 3))
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def test_every_inside_ray_lands_on_a_surface():
    o, d = random_inside_rays(np.random.default_rng(0), 2000)
    r = trace(ROOM, o, d)
    assert np.all(np.isfinite(r.t)) and np.all(r.t > 0)
    assert np.max(surface_distance(ROOM, o + r.t[:, None] * d)) < 1e-9
    assert np.all((r.shade >= 0) & (r.shade <= 1))
    # normals face the viewer
    assert np.all(np.sum(r.normal * d, axis=1) <= 0)


def test_box_hit_matches_bisection():
    table = ROOM.primitives[0]
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(300):
        o = rng.uniform(ROOM.room_lo + 0.1, ROOM.room_hi - 0.1)
        if np.all((o >= table.lo) & (o <= table.hi)):
            continue
        target = rng.uniform(table.lo, table.hi)
        d = (target - o) / np.linalg.norm(target - o)
        t_ref = ray_box_bisect(o, d, table.lo, table.hi, t_max=8.0)
        t, _ = table.intersect(o[None], d[None])
        assert abs(t[0] - t_ref) < 1e-6
        checked += 1
    assert checked > 200


def test_oracle_trace_single_ray():
    ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]), 0.0, 10.0)
    t, n, a = oracle_trace(ROOM, ray)
    assert t == pytest.approx(1.5) and np.allclose(n, [0, 0, -1])
    assert np.allclose(a, ROOM.wall_albedo[5])


def test_sphere_hits_are_on_the_sphere():
    ball = ROOM.primitives[1]
    rng = np.random.default_rng(2)
    o = np.tile([0.5, 0.5, 1.2], (500, 1))
    d = ball.center + rng.normal(scale=0.15, size=(500, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, n = ball.intersect(o, d)
    hit = np.isfinite(t)
    assert hit.mean() > 0.5
    p = o[hit] + t[hit, None] * d[hit]
    assert np.allclose(np.linalg.norm(p - ball.center, axis=1), ball.radius)


def test_prior_noise_is_half_normal_off_surface():
    sigma = 0.01
    cloud, clean = sample_prior_cloud(ROOM, 100000, sigma, 0.0, np.random.default_rng(3), return_clean=True)
    assert np.max(surface_distance(ROOM, clean)) < 1e-9
    dist = surface_distance(ROOM, cloud.positions)
    # perpendicular offset of isotropic noise: E|N(0, s)| = s sqrt(2 / pi)
    assert abs(dist.mean() / (sigma * np.sqrt(2 / np.pi)) - 1) < 0.05
    assert np.all(cloud.sigmas == sigma)


def test_prior_outliers():
    cloud = sample_prior_cloud(ROOM, 10000, 0.0, 0.05, np.random.default_rng(4))
    off = surface_distance(ROOM, cloud.positions) > 1e-9
    assert abs(off.sum() - 500) <= 5
    assert np.all((cloud.positions >= ROOM.room_lo) & (cloud.positions <= ROOM.room_hi))
    with pytest.raises(ValueError):
        sample_prior_cloud(ROOM, 10, -1.0, 0.0, np.random.default_rng(0))


def test_prior_deterministic():
    a = sample_prior_cloud(ROOM, 500, 0.02, 0.01, np.random.default_rng(5))
    b = sample_prior_cloud(ROOM, 500, 0.02, 0.01, np.random.default_rng(5))
    assert np.array_equal(a.positions, b.positions)


@pytest.mark.parametrize("trajectory", ["inside-out", "orbit"])
def test_split_geometry(trajectory):
    cams, split = make_cameras(ROOM, 20, 4, trajectory, seed=0)
    assert split.count("train") == 20 and split.count("test_interp") == 4 and split.count("test_extrap") == 4
    train = [c for c, s in zip(cams, split) if s == "train"]
    interp = [c for c, s in zip(cams, split) if s == "test_interp"]
    extrap = [c for c, s in zip(cams, split) if s == "test_extrap"]
    for c in cams:
        assert np.all((c.translation > ROOM.room_lo) & (c.translation < ROOM.room_hi))
        assert np.allclose(c.rotation.T @ c.rotation, np.eye(3))
    step = min(view_angle(train[0], t) for t in train[1:])
    for c in interp:
        # half-way between two neighbouring train poses
        nearest = sorted(view_angle(c, t) for t in train)[:2]
        assert abs(nearest[0] - nearest[1]) < 1e-9 and nearest[0] < step
    for ci, ce in zip(interp, extrap):
        assert view_angle(ci, ce) == pytest.approx(np.radians(30.0), abs=1e-9)
    # extrapolation views look further from any train view than interpolation views
    far_i = max(min(view_angle(c, t) for t in train) for c in interp)
    near_e = min(min(view_angle(c, t) for t in train) for c in extrap)
    assert near_e > far_i


def test_make_cameras_rejects_bad_input():
    with pytest.raises(ValueError):
        make_cameras(ROOM, 0, 4)
    with pytest.raises(ValueError):
        make_cameras(ROOM, 4, 4, trajectory="spiral")


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(ROOM, 3, 1, seed=1)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.split == ds.split
    for a, b in zip(ds.images, back.images):
        assert np.max(np.abs(a - b)) <= 0.5 / 255 + 1e-12
    for a, b in zip(ds.depths, back.depths):
        assert np.allclose(a, b, rtol=1e-6)
    for a, b in zip(ds.cameras, back.cameras):
        assert np.allclose(a.rotation, b.rotation) and np.allclose(a.translation, b.translation)


def test_scene_roundtrip(tmp_path):
    save_scene(ROOM, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    o, d = random_inside_rays(np.random.default_rng(6), 300)
    a, b = trace(ROOM, o, d), trace(back, o, d)
    assert np.array_equal(a.t, b.t) and np.allclose(a.shade, b.shade)


def test_scene_validation():
    with pytest.raises(ValueError):
        SyntheticScene([0, 0, 0], [1, -1, 1])
    with pytest.raises(ValueError):
        Box([0, 0, 0], [0, 1, 1], [0.5, 0.5, 0.5])
