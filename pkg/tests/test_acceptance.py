"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines.
The training criterion takes several minutes; deselect it with ``-m "not slow"``.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import block_means, conv_loops, hardest_negative_scan, mutual_nn
from rdnkit.evaluate import evaluate_pairs
from rdnkit.geometry import (HOMOGRAPHY, canonical, dlt_homography, eight_point_fundamental, project,
                             ransac)
from rdnkit.matching import mutual_nn_match
from rdnkit.model import RdnConfig, describe, init_weights
from rdnkit.synth import WarpSpec, flat_fixture, make_pair, patchy_texture, random_texture
from rdnkit.tensor import ConvLayer, GradTape, avg_pool_blocks, backward, conv2d, grad_check
from rdnkit.trainer import TrainConfig, hardest_negative, lr_schedule, pair_loss, train

QUARTER = RdnConfig.quarter()
CORNERS = np.array([[0, 0], [63, 0], [63, 63], [0, 63]], dtype=np.float64)


def report(tag, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    return ok


# --- 1. gradients -------------------------------------------------------------


def _op_checks(rng):
    x = rng.standard_normal((6, 5, 3))
    layer = ConvLayer(rng.standard_normal((4, 3, 3, 3)) * 0.3, rng.standard_normal(4) * 0.1, dilation=2)
    up = rng.standard_normal((6, 5, 4))

    def conv_relu_pool(params):
        tape = GradTape()
        xi = tape.watch(params["x"])
        h = tape.relu(tape.conv2d(xi, layer, "c"))
        p = tape.bilinear_upsample(tape.avg_pool_blocks(h, 2), 6, 5)
        out = tape.l2_normalize_channels(tape.concat_channels(h, p))
        w = np.concatenate([up, up[..., ::-1]], axis=2)
        grads, gx = backward(tape, w)
        grads["x"] = gx
        return float(np.sum(w * out)), grads

    return grad_check(conv_relu_pool, {"x": x, "c.kernel": layer.kernel, "c.bias": layer.bias})


def test_c1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for k, r in _op_checks(rng).items():
        worst[f"ops:{k}"] = r

    w = init_weights(QUARTER)
    img = rng.random((8, 8, 3))
    up = rng.standard_normal((8, 8, 64))

    def model_fn(params):
        tape = GradTape()
        out = describe(img, w, QUARTER, tape=tape)
        grads, _ = backward(tape, up)
        return float(np.sum(up * out)), grads

    for k, r in grad_check(model_fn, w.named_params(), max_entries=12, seed=1).items():
        worst[f"model:{k}"] = r

    img2 = rng.random((8, 8, 3))
    corr = np.array([[1, 1, 1, 2], [6, 2, 5, 2], [2, 6, 3, 6], [6, 6, 6, 5]])
    # with a stride-4 pool an 8x8 image has no candidate outside the 4 px safe radius
    tc = TrainConfig(pool_stride=1)

    def loss_fn(params):
        r = pair_loss(img, img2, corr, w, QUARTER, tc)
        return r.loss, r.grads

    for k, r in grad_check(loss_fn, w.named_params(), max_entries=12, seed=2).items():
        worst[f"loss:{k}"] = r

    elapsed = time.perf_counter() - t0
    err = max(r.max_rel_error for r in worst.values())
    ok = all(r.passed for r in worst.values()) and err <= 1e-4 and elapsed <= 60
    assert report("C1 gradient checks", ok, f"max rel err {err:.2e} (<=1e-4), {len(worst)} blocks, {elapsed:.1f}s (<=60s)")


# --- 2. descriptor field ------------------------------------------------------


def test_c2_default_field_unit_norm_and_deterministic():
    cfg = RdnConfig()
    w = init_weights(cfg)
    worst, identical = 0.0, True
    for i in range(20):
        img = random_texture(64, 100 + i)
        a = describe(img, w, cfg)
        b = describe(img, w, cfg)
        identical &= a.shape == (64, 64, 256) and a.tobytes() == b.tobytes()
        worst = max(worst, float(np.max(np.abs(np.linalg.norm(a, axis=2) - 1))))
    ok = identical and worst <= 1e-5
    assert report("C2 default field", ok, f"max |norm-1| {worst:.2e} (<=1e-5), bit-identical={identical}")


# --- 3. exact oracles ---------------------------------------------------------


def test_c3_exact_oracles():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((13, 11, 4))
    pool_err = max(float(np.max(np.abs(avg_pool_blocks(x, win) - block_means(x, win)))) for win in (2, 4, 8, 64))

    layer = ConvLayer(rng.standard_normal((3, 4, 3, 3)), rng.standard_normal(3), dilation=2)
    conv_err = float(np.max(np.abs(conv2d(x, layer) - conv_loops(x, layer.kernel, layer.bias, 2))))

    a, b = rng.standard_normal((500, 64)), rng.standard_normal((500, 64))
    nn_ok = {(m.idx_a, m.idx_b) for m in mutual_nn_match(a, b)} == mutual_nn(a, b)

    f1 = rng.standard_normal((20, 20, 8))
    f2 = rng.standard_normal((20, 20, 8))
    f1 /= np.linalg.norm(f1, axis=2, keepdims=True)
    f2 /= np.linalg.norm(f2, axis=2, keepdims=True)
    hn_ok = True
    for _ in range(20):
        corr = tuple(int(v) for v in rng.integers(0, 20, 4))
        p1, p2 = rng.integers(0, 20, (40, 2)), rng.integers(0, 20, (40, 2))
        hn_ok &= hardest_negative(corr, f1, f2, p1, p2, 4) == hardest_negative_scan(corr, f1, f2, p1, p2, 4)

    ok = pool_err <= 1e-12 and conv_err <= 1e-12 and nn_ok and hn_ok
    assert report("C3 exact oracles", ok, f"avg_pool {pool_err:.1e}, conv2d {conv_err:.1e} (<=1e-12), "
                  f"mutual NN N=500 equal={nn_ok}, hardest negative exact={hn_ok}")


# --- 4. geometry --------------------------------------------------------------


def _random_h(rng):
    dst = CORNERS + rng.uniform(-0.08, 0.08, CORNERS.shape) * 64 + rng.uniform(-5, 5, 2)
    a = []
    for (x, y), (u, v) in zip(CORNERS, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
    return canonical(np.append(np.linalg.solve(np.array(a), dst.reshape(-1)), 1.0).reshape(3, 3))


def _two_view(rng, n):
    pts = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 8, n)])
    k = np.array([[60.0, 0, 32], [0, 60.0, 32], [0, 0, 1]])
    c, s = np.cos(0.15), np.sin(0.15)
    r = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    x1 = (k @ pts.T).T
    x2 = (k @ (r @ pts.T + np.array([[1.0], [0.2], [0.1]]))).T
    return x1[:, :2] / x1[:, 2:], x2[:, :2] / x2[:, 2:]


def test_c4_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    dlt_err = 0.0
    for _ in range(10):
        m = _random_h(rng)
        src = rng.uniform(0, 64, (20, 2))
        est = dlt_homography(src, project(m, src))
        dlt_err = max(dlt_err, float(np.max(np.linalg.norm(project(est.m, CORNERS) - project(m, CORNERS), axis=1))))

    ep_res, rank_ok = 0.0, True
    for _ in range(10):
        x1, x2 = _two_view(rng, 30)
        f = eight_point_fundamental(x1, x2).m
        h1, h2 = np.column_stack([x1, np.ones(30)]), np.column_stack([x2, np.ones(30)])
        ep_res = max(ep_res, float(np.max(np.abs(np.sum(h2 * (h1 @ f.T), axis=1)))))
        rank_ok &= np.linalg.matrix_rank(f) == 2

    r7 = np.random.default_rng(7)
    m = _random_h(r7)
    src_in = r7.uniform(0, 64, (50, 2))
    dst_in = project(m, src_in)
    src = np.vstack([src_in, r7.uniform(0, 64, (50, 2))])
    dst = np.vstack([dst_in, r7.uniform(0, 64, (50, 2))])
    res = ransac(src, dst, HOMOGRAPHY, threshold=3.0, seed=7)
    recall = float(np.isin(np.arange(50), res.inliers).mean())
    corner = float(np.max(np.linalg.norm(project(res.model.m, CORNERS) - project(m, CORNERS), axis=1)))
    elapsed = time.perf_counter() - t0

    ok = (dlt_err <= 1e-6 and ep_res <= 1e-8 and rank_ok and recall >= 0.95 and corner <= 1.0
          and elapsed <= 30)
    assert report("C4 geometry", ok, f"DLT corner {dlt_err:.1e}px (<=1e-6), eight-point {ep_res:.1e} (<=1e-8) "
                  f"rank2={rank_ok}, RANSAC recall {recall:.2f} (>=0.95) corner {corner:.3f}px (<=1), {elapsed:.1f}s (<=30s)")


# --- 5. schedule --------------------------------------------------------------


def test_c5_lr_schedule():
    got = (lr_schedule(0), lr_schedule(10), lr_schedule(49))
    ok = got == (1e-3, 5e-4, 6.25e-5)
    assert report("C5 lr schedule", ok, f"lr(0), lr(10), lr(49) = {got}")


# --- 6 and 7. training --------------------------------------------------------


def _crops(n, seed, img):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y, x = r.integers(0, img.shape[0] - 64 + 1, 2)
        out.append(make_pair(img[y:y + 64, x:x + 64], WarpSpec(seed=seed * 1000 + i), grid_stride=4))
    return out


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    pairs = _crops(200, 1, patchy_texture(256, 11))
    w, curve = train(pairs, QUARTER, TrainConfig(epochs=15))
    return w, curve, time.perf_counter() - t0


@pytest.mark.slow
def test_c6_training_improves(trained):
    w, curve, elapsed = trained
    held = _crops(20, 2, random_texture(256, 12))
    # stride 4 keeps grid quantisation (<= 2.83 px) under the 3 px threshold
    mma_init = evaluate_pairs(held, init_weights(QUARTER), QUARTER, (3,), stride=4).mma()[0]
    mma_trained = evaluate_pairs(held, w, QUARTER, (3,), stride=4).mma()[0]
    first, last = curve[0].mean_loss, curve[-1].mean_loss
    loss_ok = last < 0.5 * first
    mma_ok = mma_trained >= 2 * mma_init
    ok = loss_ok and mma_ok and elapsed <= 1800
    assert report("C6 training", ok, f"loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f}, <0.5: {loss_ok}); "
                  f"MMA@3 {mma_init:.3f} -> {mma_trained:.3f} (x{mma_trained / mma_init:.2f}, >=x2: {mma_ok}); "
                  f"{elapsed:.0f}s (<=1800s)")


@pytest.mark.slow
def test_c7_context_helps_flat_regions(trained):
    w = trained[0]
    corpus = [make_pair(flat_fixture(128, i), WarpSpec(seed=500 + i), grid_stride=4) for i in range(20)]
    full = evaluate_pairs(corpus, w, QUARTER, (3,), stride=4).region_rate("flat")[0]
    fen = evaluate_pairs(corpus, w, QUARTER, (3,), stride=4, low_only=True).region_rate("flat")[0]
    ok = full >= fen + 0.10
    assert report("C7 flat regions", ok, f"flat correct-match rate @3px full {full:.3f} vs FEN-only {fen:.3f} "
                  f"(gap {100 * (full - fen):+.1f} pp, need >= +10 pp)")


# --- 8. CLI determinism -------------------------------------------------------


def _cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "rdnkit.cli", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _run_pipeline(d):
    d.mkdir()
    _cli("synth", "--count", 3, "--seed", 5, "--size", 96, "--grid-stride", 4, "--out-dir", "corpus", cwd=d)
    _cli("train", "--manifest", "corpus/manifest.tsv", "--epochs", 2, "--profile", "quarter", "--seed", 5,
         "--weights-out", "w.rdnw", cwd=d)
    for k in (1, 2):
        _cli("describe", "--weights", "w.rdnw", "--image", f"corpus/pair_00000_{k}.pgm", "--stride", 4,
             "--out", f"{k}.rdnd", cwd=d)
    _cli("match", "--a", "1.rdnd", "--b", "2.rdnd", "--seed", 5, "--out", "m.tsv", "--model-out", "m.model", cwd=d)
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_c8_cli_byte_determinism(tmp_path):
    a = _run_pipeline(tmp_path / "a")
    b = _run_pipeline(tmp_path / "b")
    diff = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not diff and len(a) > 10
    assert report("C8 CLI determinism", ok, f"{len(a)} files from synth/train/describe/match, differing: {diff or 'none'}")
