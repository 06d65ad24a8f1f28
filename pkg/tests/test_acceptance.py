"""Release acceptance suite.  Each test prints one PASS/FAIL line (also collected
in the "acceptance criteria" section of the pytest summary)."""

import time

import numpy as np
import pytest

from deepsnake import autodiff as ad
from deepsnake import harness as hn
from deepsnake import synthdata as sd
from deepsnake.geometry import (
    Box,
    ExtremeSet,
    chamfer_distance,
    diamond_from_box,
    extreme_points,
    gt_contour,
    octagon_from_extremes,
    perimeter,
    polygon_iou,
    signed_area,
    uniform_resample,
)
from deepsnake.snakenet import SnakeNet, SnakeNetConfig, snake_forward

from conftest import record
from oracles import naive_circular_conv
from test_autodiff import (
    OPS,
    bilinear_gradient_error,
    op_gradient_error,
    relu_gradient_error,
    smooth_l1_gradient_error,
)
from test_snakenet import graph_conv_gradient_error, randomize_stats, scene, snake_gradient_error


def test_gradient_suite():
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for seed in range(20):
        checks = {f"{name}": lambda n=name: op_gradient_error(n, seed) for name in OPS}
        checks.update({
            "relu": lambda: relu_gradient_error(seed),
            "bilinear_sample": lambda: bilinear_gradient_error(seed),
            "smooth_l1": lambda: smooth_l1_gradient_error(seed),
            "graph_conv": lambda: graph_conv_gradient_error(seed),
            "snake_forward[circular]": lambda: snake_gradient_error("circular", "train", seed),
            "snake_forward[graph]": lambda: snake_gradient_error("graph", "eval", seed),
        })
        for name, check in checks.items():
            err = check()
            if err >= worst:
                worst, where = err, f"{name} seed {seed}"
    seconds = time.perf_counter() - t0
    ok = worst < 1e-5 and seconds < 60
    assert record("gradient suite", ok,
                  f"worst relative error {worst:.2e} ({where}) < 1e-05, {seconds:.1f}s < 60s")


def test_circular_conv_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 24))
        k = 2 * int(rng.integers(0, n + 1)) + 1  # odd, at most 2N+1
        d_in, d_out = (int(v) for v in rng.integers(1, 9, size=2))
        f, w, b = rng.normal(size=(n, d_in)), rng.normal(size=(k, d_in, d_out)), rng.normal(size=d_out)
        worst = max(worst, float(np.abs(ad.circular_conv1d(f, w, b).data - naive_circular_conv(f, w, b)).max()))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-12 and seconds < 10
    assert record("circular-conv oracle", ok,
                  f"max-abs {worst:.2e} < 1e-12 over 100 configs, {seconds:.2f}s < 10s")


def test_equivariance():
    broken = []
    for seed in range(20):
        net = SnakeNet(seed=seed, zero_head=False)
        randomize_stats(net, np.random.default_rng(seed))
        F, c = scene(seed)
        base = snake_forward(F, c, net).data
        for s in (1, 1 + seed * 6, 127):
            if not np.array_equal(snake_forward(F, np.roll(c, -s, axis=0), net).data, ad.rotate_rows(base, s)):
                broken.append(f"rotation seed {seed} shift {s}")
        dx, dy = int(seed % 5) - 2, 3 - int(seed % 7)
        F2 = np.roll(F, (dy, dx), axis=(0, 1))
        if not np.array_equal(snake_forward(F2, c + [dx, dy], net).data, base):
            broken.append(f"translation seed {seed}")
    ok = not broken
    assert record("equivariance", ok, "bit-exact rotation and translation on 20 seeds"
                  if ok else f"{len(broken)} mismatches, first: {broken[0]}")


@pytest.mark.slow
def test_training_acceptance(default_run):
    rep = default_run.report_jitter
    i1, i3 = rep.mean_iou(1), rep.mean_iou(3)
    minutes = default_run.seconds / 60
    ok = i3 >= 0.85 and i3 - i1 >= 0.02 and minutes <= 30
    assert record("training", ok,
                  f"IoU@3 {i3:.4f} >= 0.85, IoU@3 - IoU@1 {i3 - i1:+.4f} >= 0.02, "
                  f"{minutes:.1f} min <= 30 min (IoU@0 {rep.mean_iou(0):.4f}, IoU@2 {rep.mean_iou(2):.4f})")


@pytest.mark.slow
def test_ablation_trend(ablation_run):
    table, _ = ablation_run
    wins = [table["circular"][t] >= table["graph"][t] for t in range(3)]
    ok = sum(wins) >= 2
    cells = ", ".join(f"it{t + 1} {table['circular'][t]:.4f} vs {table['graph'][t]:.4f}" for t in range(3))
    assert record("ablation trend", ok, f"circular >= graph in {sum(wins)}/3 columns ({cells})")


@pytest.mark.slow
def test_robustness_to_box_jitter(default_run):
    jit = default_run.report_jitter.mean_iou(3)
    exact = default_run.report_exact.mean_iou(3)
    ok = exact - jit < 0.05
    assert record("robustness", ok, f"exact {exact:.4f} - jittered {jit:.4f} = {exact - jit:+.4f} < 0.05")


@pytest.mark.slow
def test_timing_report(default_run):
    models, _, _, _ = hn.load_checkpoint(default_run.result.best_checkpoint)
    rows = hn.bench(models, default_run.eval_set, n_repeats=50, warmup=5, dtype=np.float32)
    med = {r["stage"]: r["median_ms"] for r in rows}
    ok = set(med) == set(hn.BENCH_STAGES) and med["deform_iteration"] < 10.0
    assert record("timing", ok, f"deform iteration median {med['deform_iteration']:.2f} ms < 10 ms "
                  f"(proposal {med['proposal']:.2f} ms, total {med['segment_total']:.2f} ms, float32, 1 thread)")


def test_geometry_exactness():
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    t = 2 * np.pi * np.arange(64) / 64
    circle = np.stack([5 + 2 * np.cos(t), 5 + 2 * np.sin(t)], axis=1)
    checks = {
        "resample square n=4": np.allclose(uniform_resample(sq, 4, start=(0, 0)), sq, atol=1e-15),
        "resample square n=8": np.allclose(
            uniform_resample(sq, 8, start=(0, 0)),
            [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5]], atol=1e-15),
        "extremes diamond": extreme_points([(1, 0), (0, 1), (1, 2), (2, 1)])
        == ExtremeSet((1, 0), (0, 1), (1, 2), (2, 1)),
        "extremes circle": np.allclose(extreme_points(circle).as_array(), [[5, 3], [3, 5], [5, 7], [7, 5]],
                                       atol=1e-12),
        "extremes tie": extreme_points([(3, 0), (0, 0), (0, 3), (3, 3)]).top == (3.0, 0.0),
        "diamond (0,0,2,2)": np.array_equal(diamond_from_box(Box(0, 0, 2, 2)), [(1, 0), (0, 1), (1, 2), (2, 1)]),
        "diamond (0,0,4,2)": np.array_equal(diamond_from_box(Box(0, 0, 4, 2)), [(2, 0), (0, 1), (2, 2), (4, 1)]),
        "diamond tiny box": np.array_equal(diamond_from_box(Box(0, 0, 1e-3, 1e-3)),
                                           [(5e-4, 0), (0, 5e-4), (5e-4, 1e-3), (1e-3, 5e-4)]),
        "octagon 1/4 edge": np.array_equal(octagon_from_extremes(ExtremeSet((2, 0), (0, 2), (2, 4), (4, 2))),
                                           [(3, 0), (1, 0), (0, 1), (0, 3), (1, 4), (3, 4), (4, 3), (4, 1)]),
        "octagon corner clamp": any((v == (0.0, 0.0)).all() for v in
                                    octagon_from_extremes(ExtremeSet((0, 0), (0, 2), (2, 4), (4, 2)))),
        "IoU identical": polygon_iou(circle, circle) == 1.0,
        "IoU disjoint": polygon_iou(sq, sq + 5) == 0.0,
        "IoU half overlap": abs(polygon_iou(sq, sq + [0.5, 0]) - 1 / 3) <= 1 / 256,
        "chamfer identity": chamfer_distance(circle, circle) == 0.0,
        "chamfer shift": abs(chamfer_distance(np.c_[np.full(10, 0.7), np.arange(10.0) * 3],
                                              np.c_[np.zeros(10), np.arange(10.0) * 3]) - 0.7) < 1e-15,
        "signed area": (signed_area(sq), signed_area(sq[::-1]), signed_area([(0, 0), (1, 1), (2, 2)]))
        == (1.0, -1.0, 0.0),
        "gt contour square": np.allclose(gt_contour(sq, (0, 0), 4), [[0, 0], [0, 1], [1, 1], [1, 0]], atol=1e-15),
        "gt contour circle": np.hypot(*(gt_contour(circle, (5, 3), 128)[0] - (5, 3))) <= perimeter(circle) / 128,
        "smooth-L1 0.125": ad.smooth_l1(np.array([[0.5, 0.0]]), np.zeros((1, 2))).item() == 0.125,
        "smooth-L1 1.5": ad.smooth_l1(np.array([[2.0, 0.0]]), np.zeros((1, 2))).item() == 1.5,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    assert record("geometry exactness", ok, f"{len(checks) - len(failed)}/{len(checks)} examples exact"
                  + (f", failed: {', '.join(failed)}" if failed else ""))


def test_determinism(tmp_path):
    net = SnakeNetConfig(state_dim=16, kernel_size=5, backbone_depth=2, fusion_dim=16, head_hidden=16)
    data = (sd.make_dataset(3, 24, split="train"), sd.make_dataset(3, 8, split="eval"))
    blobs = []
    for _ in range(2):
        cfg = hn.TrainConfig(train_count=24, eval_count=8, epochs=2, lr=1e-3, lr_decay_epochs=(1,), net=net,
                             out_dir=str(tmp_path))
        res = hn.train(cfg, data=data)
        with open(res.final_checkpoint, "rb") as fa, open(res.best_checkpoint, "rb") as fb:
            blobs.append((fa.read(), fb.read()))
    same = blobs[0] == blobs[1]
    assert record("determinism", same, "two single-worker runs give bit-identical checkpoints"
                  if same else "checkpoints differ")
