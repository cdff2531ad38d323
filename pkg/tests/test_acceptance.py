"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The verdict lines are collected in ``VERDICTS`` and printed in the pytest
terminal summary. Criteria 7 to 10 train real models on the synthetic room
and take most of the runtime (about half an hour on one core); their runs
are cached per module so each arm trains once.
"""

import functools
import json
import time

import numpy as np

from oracles import brute_first_hit_batch, interleave_bits, truncnorm_moments
from test_field import fd_check
from test_loss import loss_gradient_fd
from voxguide.cli import main
from voxguide.field import FieldConfig
from voxguide.loss import LossConfig, robust_depth_loss
from voxguide.metrics import evaluate
from voxguide.raycast import first_hit_batch
from voxguide.render import composite
from voxguide.sampler import SQRT3, guided_batch, truncated_normal_batch
from voxguide.svo import PointCloud, build_octree, morton_decode, morton_encode
from voxguide.synth import make_dataset, sample_prior_cloud, toy_room
from voxguide.train import prepare_views, smoke_config, train

VERDICTS = []

SEEDS = (0, 1, 2)
NOISE_FRACTION = 0.02      # prior noise as a fraction of the room diagonal
OUTLIERS = 0.01
PRIOR_POINTS = 10000


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


# --------------------------------------------------------------------------
# 1-6: exact and property checks


def test_criterion_01_morton_exhaustive():
    start = time.perf_counter()
    ok = True
    for level in range(1, 8):
        codes = np.arange(8 ** level, dtype=np.uint64)
        x, y, z = morton_decode(codes, level)
        ok &= bool(np.array_equal(morton_encode(x, y, z, level), codes))
        ok &= bool(max(x.max(), y.max(), z.max()) < (1 << level))
    # spot-check the key layout against a plain bit interleaver
    rng = np.random.default_rng(0)
    for x, y, z in rng.integers(0, 128, (200, 3)):
        ok &= int(morton_encode(int(x), int(y), int(z), 7)) == interleave_bits(x, y, z, 7)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 10.0
    assert verdict(1, ok, f"levels 1-7 round-trip ({8 ** 7} codes at level 7) in {elapsed:.2f} s (< 10 s)")


def test_criterion_02_traversal_oracle():
    rng = np.random.default_rng(2)
    n_rays, mismatched, worst, total_hits = 10000, 0, 0.0, 0
    for _ in range(20):
        level = int(rng.integers(3, 8))
        pts = rng.random((int(rng.integers(5, 400)), 3)) * 2.0 - 1.0
        svo = build_octree(PointCloud.from_positions(pts, 0.0), root=(np.full(3, -1.0), 2.0), max_level=level)
        o = rng.uniform(-2.5, 2.5, (n_rays, 3))
        d = rng.normal(size=(n_rays, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, code = first_hit_batch(svo, o, d, 0.0, 8.0)
        lo, _ = svo.leaf_boxes()
        tb, jb = brute_first_hit_batch(o, d, lo, svo.leaf_size, 0.0, 8.0)
        hit_b = jb >= 0
        same = (np.isnan(t) == ~hit_b)
        same[hit_b] &= code[hit_b] == svo.occupied_leaves[jb[hit_b]]
        mismatched += int((~same).sum())
        both = hit_b & ~np.isnan(t)
        if both.any():
            rel = np.abs(t[both] - tb[both]) / np.maximum(np.abs(tb[both]), 1e-12)
            # rays starting inside a leaf hit at t_near = 0 exactly
            rel[tb[both] == 0] = np.abs(t[both][tb[both] == 0])
            worst = max(worst, float(rel.max()))
        total_hits += int(hit_b.sum())
    ok = mismatched == 0 and worst < 1e-9
    assert verdict(2, ok, f"20 octrees x {n_rays} rays, {total_hits} hits: {mismatched} leaf mismatches, "
                          f"max rel t error {worst:.1e} (< 1e-9)")


def test_criterion_03_sampler_band():
    rng = np.random.default_rng(3)
    n = 100000
    t_near = rng.uniform(0.0, 0.5, n)
    t_far = t_near + rng.uniform(4.0, 10.0, n)
    z = rng.uniform(t_near + 0.5, t_far - 0.5)
    v = 0.05
    t, imp, fb = guided_batch(t_near, t_far, z, v, 32, 32, rng)
    h = 3 * SQRT3 * v
    dev = np.abs(t - z[:, None])[imp]
    inside = float(np.mean(dev <= h))
    rows_ok = not fb.any() and bool(np.all(imp.sum(1) == 32))
    # truncated Gaussian moments against quadrature at a few placements
    worst_m, worst_s = 0.0, 0.0
    for mean, lo, hi in [(2.0, 2.0 - h, 2.0 + h), (0.2, 0.0, 0.2 + h), (5.0, 5.0 - h, 5.1)]:
        std = SQRT3 * v
        x = truncated_normal_batch(np.array([mean]), np.array([std]), np.array([lo]), np.array([hi]), 200000,
                                   rng)[0]
        m, s = truncnorm_moments(mean, std, lo, hi)
        worst_m = max(worst_m, abs(x.mean() - m) / abs(m))
        worst_s = max(worst_s, abs(x.std() - s) / s)
    ok = inside == 1.0 and rows_ok and worst_m < 0.01 and worst_s < 0.05
    assert verdict(3, ok, f"{n} rays, {100 * inside:.3f}% of important samples in band; truncated normal "
                          f"mean err {100 * worst_m:.3f}% (< 1%), std err {100 * worst_s:.2f}% (< 5%)")


def test_criterion_04_rendering_quadrature():
    n = 512
    t = (np.arange(n) + 0.5) / n
    r = composite(np.full(n, 4.0), np.ones((n, 3)), np.full(n, 1.0 / n), t)
    op_err = abs(r.opacity - (1 - np.exp(-4.0)))
    rng = np.random.default_rng(4)
    s = rng.exponential(3, (10000, 48)) * (rng.random((10000, 48)) < 0.7)
    d = rng.uniform(0, 0.3, (10000, 48))
    rb = composite(s, rng.random((10000, 48, 3)), d, np.cumsum(d, axis=1))
    pou = float(np.max(np.abs(rb.weights.sum(1) + rb.residual_transmittance - 1)))
    ok = op_err < 1e-3 and pou < 1e-6
    assert verdict(4, ok, f"homogeneous opacity error {op_err:.2e} (< 1e-3); partition of unity "
                          f"max error {pou:.1e} over 1e4 rays (< 1e-6)")


def test_criterion_05_robust_loss_analytics():
    beta = 0.1
    f = lambda r: robust_depth_loss(r, 0.0, beta)  # noqa: E731
    branch_gap = abs(0.5 * beta ** 2 - beta ** 2 * (0.5 + np.log(1.0)))
    at_beta = abs(f(beta) - 0.5 * beta ** 2)
    h = 1e-7
    left = (f(beta) - f(beta - h)) / h
    right = (f(beta + h) - f(beta)) / h
    d_gap = abs(left - right)
    r = np.concatenate([[beta], np.geomspace(beta, 1e3, 2000)])
    doubling = float(np.max(np.abs(robust_depth_loss(2 * r, 0.0, beta) - robust_depth_loss(r, 0.0, beta)
                                   - beta ** 2 * np.log(2))))
    ok = max(branch_gap, at_beta) < 1e-12 and d_gap < 1e-6 and abs(left - beta) < 1e-6 and doubling < 1e-12
    assert verdict(5, ok, f"branch gap {max(branch_gap, at_beta):.1e}; one-sided slopes {left:.9f} / "
                          f"{right:.9f} (gap {d_gap:.1e}); log-branch doubling error {doubling:.1e}")


def test_criterion_06_gradient_exactness():
    cfg = FieldConfig(n_levels=2, table_size_log2=4, features_per_level=2, base_resolution=2, growth_factor=2.0,
                      density_width=6, latent_dim=3, color_width=6, dtype="float64", init_scale=0.5)
    rels, n_kink = [], 0
    for seed in range(4):
        a, n, smooth = fd_check(cfg, seed)
        rels.append(np.abs(a - n)[smooth] / np.maximum(np.abs(n[smooth]), 1e-6))
        n_kink += int((~smooth).sum())
    field_rel = np.concatenate(rels)
    loss_rel = []
    for seed in range(5):
        a, n = loss_gradient_fd(seed)
        loss_rel.append(np.abs(a - n) / np.maximum(np.abs(n), 1e-6))
    loss_rel = np.concatenate(loss_rel)
    n_coords = len(field_rel) + len(loss_rel)
    worst = max(field_rel.max(), loss_rel.max())
    ok = n_coords >= 1000 and worst < 1e-3
    assert verdict(6, ok, f"{len(field_rel)} field + {len(loss_rel)} loss coordinates, max rel error "
                          f"{worst:.1e} (< 1e-3); {n_kink} ReLU-kink coordinates excluded")


# --------------------------------------------------------------------------
# 7-10: training runs on the synthetic room


@functools.cache
def scene_data(seed):
    scene = toy_room()
    ds = make_dataset(scene, 20, 4, "inside-out", seed)
    cloud = sample_prior_cloud(scene, PRIOR_POINTS, NOISE_FRACTION * scene.diagonal, OUTLIERS,
                               np.random.default_rng([seed, 1]))
    svo = build_octree(cloud)
    return ds, svo, prepare_views(ds, svo)


@functools.cache
def run_arm(strategy, depth_loss, seed, iterations=2000):
    ds, svo, views = scene_data(seed)
    cfg = smoke_config(iterations=iterations, strategy=strategy, seed=seed,
                       loss=LossConfig(lambda_d=0.1 if depth_loss else 0.0))
    start = time.perf_counter()
    params, _ = train(ds, svo, FieldConfig(), cfg, views=views)
    elapsed = time.perf_counter() - start
    out = {"train_seconds": elapsed}
    for split in ("test_interp", "test_extrap"):
        rep = evaluate(params, svo, ds, split, cfg.sampler, seed)
        out[split] = (rep.mean_psnr, rep.mean_ssim, rep.mean_depth_mae)
    out["seconds"] = time.perf_counter() - start
    print(json.dumps({"arm": [strategy, depth_loss, seed, iterations], **out}))
    return out


def test_criterion_07_smoke_reconstruction():
    r = run_arm("guided", True, 0, 5000)
    psnr, ssim, _ = r["test_interp"]
    ok = psnr >= 24.0 and ssim >= 0.80 and r["seconds"] < 1800
    assert verdict(7, ok, f"5000 iterations: test-interp PSNR {psnr:.2f} dB (>= 24), SSIM {ssim:.3f} (>= 0.80), "
                          f"wall clock {r['seconds'] / 60:.1f} min on 1 core (< 30)")


def test_criterion_08_guided_beats_uniform():
    gaps = []
    for s in SEEDS:
        gaps.append(run_arm("guided", True, s)["test_interp"][0] - run_arm("uniform", True, s)["test_interp"][0])
    ok = all(g >= 1.0 for g in gaps)
    assert verdict(8, ok, "guided - uniform test-interp PSNR per seed: "
                          + ", ".join(f"{g:+.2f}" for g in gaps) + " dB (each >= +1.0)")


def test_criterion_09_depth_loss_reduces_depth_error():
    cuts = []
    for s in SEEDS:
        on = run_arm("guided", True, s)["test_interp"][2]
        off = run_arm("guided", False, s)["test_interp"][2]
        cuts.append(1.0 - on / off)
    ok = all(c >= 0.20 for c in cuts)
    assert verdict(9, ok, "depth MAE reduction from the depth loss per seed: "
                          + ", ".join(f"{100 * c:.1f}%" for c in cuts) + " (each >= 20%)")


def test_criterion_10_extrapolation_gap():
    smoke = run_arm("guided", True, 0, 5000)
    pi, pe = smoke["test_interp"][0], smoke["test_extrap"][0]
    gaps = [run_arm("guided", True, s)["test_extrap"][0] - run_arm("uniform", True, s)["test_extrap"][0]
            for s in SEEDS]
    ok = pe < pi and all(g >= 0.5 for g in gaps)
    assert verdict(10, ok, f"smoke model extrap {pe:.2f} dB vs interp {pi:.2f} dB; guided - uniform extrap "
                           "PSNR per seed: " + ", ".join(f"{g:+.2f}" for g in gaps) + " dB (each >= +0.5)")


# --------------------------------------------------------------------------
# 11: determinism through the command line


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(tmp_path):
    cfg = smoke_config(checkpoint_every=1000)
    (tmp_path / "smoke.json").write_text(json.dumps(cfg.to_dict()))
    for run, threads in (("a", "1"), ("b", "2")):
        root = tmp_path / run
        assert main(["synth-gen", "--out", str(root / "data"), "--seed", "7", "--threads", threads]) == 0
        assert main(["build-svo", "--prior", str(root / "data" / "prior.ply"), "--out",
                     str(root / "octree.json")]) == 0
        assert main(["train", "--data", str(root / "data"), "--svo", str(root / "octree.json"), "--config",
                     str(tmp_path / "smoke.json"), "--seed", "7", "--threads", threads,
                     "--out", str(root / "run")]) == 0
        for split in ("interp", "extrap"):
            assert main(["eval", "--ckpt", str(root / "run" / "final.vxnf"), "--data", str(root / "data"),
                         "--svo", str(root / "octree.json"), "--split", split, "--seed", "7",
                         "--threads", threads, "--out", str(root / "eval")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    n_ckpt = sum(k.endswith(".vxnf") for k in a)
    ok = not differing and n_ckpt >= 2
    assert verdict(11, ok, f"{len(a)} files from two smoke pipelines (--threads 1 vs 2), {n_ckpt} checkpoints: "
                           + ("bit-identical" if not differing else f"differ in {differing[:5]}"))

