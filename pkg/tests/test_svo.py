import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import interleave_bits, voxelize
from voxguide.svo import (
    EmptyInputError,
    GeometryError,
    ParseError,
    PointCloud,
    ResolutionError,
    build_octree,
    choose_leaf_size,
    is_occupied,
    morton_decode,
    morton_encode,
    read_cloud,
    read_octree_dump,
    read_ply,
    read_xyz,
    write_octree_dump,
    write_ply,
    write_xyz,
)


def test_morton_single_bits():
    assert morton_encode(1, 0, 0, 1) == 1
    assert morton_encode(0, 1, 0, 1) == 2
    assert morton_encode(0, 0, 1, 1) == 4
    assert morton_decode(0) == (0, 0, 0)
    assert morton_decode(7, 1) == (1, 1, 1)


def test_morton_matches_bit_interleaver():
    assert morton_encode(3, 5, 6, 3) == interleave_bits(3, 5, 6, 3)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 21).flatmap(
    lambda L: st.tuples(st.just(L), *[st.integers(0, (1 << L) - 1)] * 3)))
def test_morton_roundtrip_property(args):
    L, x, y, z = args
    code = morton_encode(x, y, z, L)
    assert code == interleave_bits(x, y, z, L)
    assert code < 8 ** L
    assert morton_decode(code, L) == (x, y, z)


def test_morton_random_deep_levels():
    rng = np.random.default_rng(1)
    for L in range(8, 22):
        xyz = rng.integers(0, 1 << L, (3, 5000))
        back = morton_decode(morton_encode(*xyz, level=L), L)
        assert all(np.array_equal(a, b) for a, b in zip(back, xyz))


def test_morton_monotone_along_axes():
    v = np.arange(128)
    z = np.zeros_like(v)
    for args in ((v, z, z), (z, v, z), (z, z, v)):
        assert np.all(np.diff(morton_encode(*args, level=7).astype(np.int64)) > 0)


def test_morton_range_errors():
    with pytest.raises(ValueError):
        morton_encode(2, 0, 0, 1)
    with pytest.raises(ValueError):
        morton_encode(-1, 0, 0, 3)
    with pytest.raises(ValueError):
        morton_decode(8, 1)
    with pytest.raises(ValueError):
        morton_encode(0, 0, 0, 22)


def test_choose_leaf_size():
    c = PointCloud(np.zeros((3, 3)) + np.arange(3)[:, None], [0.01, 0.03, 0.02])
    assert choose_leaf_size(c) == 0.03
    rng = np.random.default_rng(0)
    s = rng.random(10000)
    assert choose_leaf_size(PointCloud(rng.random((10000, 3)), s)) == max(s.tolist())
    flat = PointCloud.from_positions([[0, 0, 0], [3, 4, 0]])
    assert choose_leaf_size(flat) == pytest.approx(1e-3 * 5)
    with pytest.raises(EmptyInputError):
        choose_leaf_size(PointCloud(np.zeros((0, 3)), np.zeros(0)))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [-1.0])
    with pytest.raises(ValueError):
        PointCloud([[0, np.nan, 0]], [0.1])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [0.1, 0.2])


def test_single_point_centre():
    c = PointCloud.from_positions([[0.5, 0.5, 0.5]], 0.1)
    svo = build_octree(c, root=(np.zeros(3), 1.0), max_level=1)
    assert len(svo.occupied_leaves) == 1
    assert is_occupied(svo, 0, 0)
    assert is_occupied(svo, int(svo.occupied_leaves[0]), 1)


def test_octant_centres():
    pts = np.array([[x, y, z] for x in (0.25, 0.75) for y in (0.25, 0.75) for z in (0.25, 0.75)])
    svo = build_octree(PointCloud.from_positions(pts, 0.1), root=(np.zeros(3), 1.0), max_level=1)
    assert sorted(svo.occupied_leaves.tolist()) == list(range(8))


def test_build_matches_brute_voxelizer():
    rng = np.random.default_rng(3)
    u = rng.random((5000, 2))
    pts = np.stack([u[:, 0] * 3, np.sin(u[:, 1] * 4) * 0.5 + 1, u[:, 1] * 2], axis=1)
    cloud = PointCloud.from_positions(pts, 0.05)
    svo = build_octree(cloud)
    ref = voxelize(pts, svo.origin, svo.side, svo.max_level)
    x, y, z = morton_decode(svo.occupied_leaves, svo.max_level)
    assert set(zip(x.tolist(), y.tolist(), z.tolist())) == ref


def test_leaf_size_rule_and_ancestor_closure():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s = rng.uniform(0.005, 0.2)
        cloud = PointCloud(rng.uniform(-2, 3, (400, 3)), rng.uniform(0, s, 400))
        svo = build_octree(cloud)
        assert svo.leaf_size >= cloud.sigmas.max()
        assert svo.leaf_size == svo.side / 2 ** svo.max_level
        # one more level would undercut the noise radius
        assert svo.side / 2 ** (svo.max_level + 1) < cloud.sigmas.max()
        for L in range(svo.max_level):
            parents = np.unique(svo.levels[L + 1] >> np.uint64(3))
            assert np.array_equal(parents, svo.levels[L])


def test_is_occupied_descendant_scan():
    rng = np.random.default_rng(5)
    svo = build_octree(PointCloud.from_positions(rng.random((60, 3)), 0.05))
    leaves = set(svo.occupied_leaves.tolist())
    for _ in range(500):
        L = int(rng.integers(0, svo.max_level + 1))
        code = int(rng.integers(0, 8 ** L))
        shift = 3 * (svo.max_level - L)
        expect = any((leaf >> shift) == code for leaf in leaves)
        assert is_occupied(svo, code, L) == expect
    with pytest.raises(ValueError):
        is_occupied(svo, 8, 1)


def test_build_deterministic():
    rng = np.random.default_rng(6)
    cloud = PointCloud.from_positions(rng.random((300, 3)), 0.02)
    a, b = build_octree(cloud), build_octree(cloud)
    assert np.array_equal(a.occupied_leaves, b.occupied_leaves)


def test_build_errors():
    with pytest.raises(GeometryError):
        build_octree(PointCloud.from_positions([[1, 1, 1]], 0.1))
    with pytest.raises(ResolutionError):
        build_octree(PointCloud.from_positions([[0, 0, 0], [1, 1, 1]], 1e-9))
    with pytest.raises(EmptyInputError):
        build_octree(PointCloud(np.zeros((0, 3)), np.zeros(0)))


def test_ply_and_xyz_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.random(50))
    write_ply(cloud, tmp_path / "c.ply")
    write_xyz(cloud, tmp_path / "c.xyz")
    for back in (read_ply(tmp_path / "c.ply"), read_xyz(tmp_path / "c.xyz"), read_cloud(tmp_path / "c.ply")):
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.sigmas, cloud.sigmas)


def test_ply_without_sigma(tmp_path):
    p = tmp_path / "n.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 2 3\n")
    with pytest.raises(ValueError):
        read_ply(p)
    assert np.all(read_ply(p, default_sigma=0.05).sigmas == 0.05)


def test_parse_errors_report_offsets(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 2 3\n")
    with pytest.raises(ParseError) as e:
        read_ply(p, default_sigma=0.1)
    assert e.value.offset > 0
    q = tmp_path / "bad.xyz"
    q.write_text("0 0 0 0.1\n1 x 2 0.1\n")
    with pytest.raises(ParseError) as e:
        read_xyz(q)
    assert e.value.offset == len("0 0 0 0.1\n")
    with pytest.raises(ParseError):
        read_ply(tmp_path / "bad.xyz")


def test_octree_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    svo = build_octree(PointCloud.from_positions(rng.random((200, 3)), 0.03))
    write_octree_dump(svo, tmp_path / "o.txt")
    line = (tmp_path / "o.txt").read_text().splitlines()[0].split()
    code = int(line[1])
    assert morton_decode(code, svo.max_level) == tuple(int(v) for v in line[2:])
    back = read_octree_dump(tmp_path / "o.txt", svo.origin, svo.side)
    assert back.max_level == svo.max_level
    for a, b in zip(back.levels, svo.levels):
        assert np.array_equal(a, b)
