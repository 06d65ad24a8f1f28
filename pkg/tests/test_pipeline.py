import json

import numpy as np
import pytest

from deepsnake import autodiff as ad
from deepsnake import pipeline as pl
from deepsnake.autodiff import Tape, Tensor
from deepsnake.geometry import (
    Box,
    ExtremeSet,
    GeometryError,
    diamond_from_box,
    extreme_points,
    octagon_from_extremes,
    polygon_iou,
)
from deepsnake.snakenet import SnakeNet, SnakeNetConfig
from deepsnake.synthdata import make_sample

from oracles import brute_resample, point_on_polyline, smooth_l1_scalar

TINY = SnakeNetConfig(state_dim=8, kernel_size=3, backbone_depth=2, fusion_dim=8, head_hidden=8)


@pytest.fixture(scope="module")
def sample():
    return make_sample(12345)


# --------------------------------------------------------------- proposal


def test_diamond40_construction():
    box = Box(10, 20, 50, 40)
    d = pl.diamond40(box)
    assert d.shape == (40, 2)
    np.testing.assert_array_equal(d[list(pl.PROPOSAL_INDICES)], diamond_from_box(box))
    np.testing.assert_array_equal(d[0], [30, 20])
    chords = np.linalg.norm(np.roll(d, -1, axis=0) - d, axis=1)
    np.testing.assert_allclose(chords, chords[0], rtol=1e-12)


def test_zero_head_proposal_gives_box_octagon(sample):
    net = SnakeNet(TINY, seed=0)
    box = sample.jittered_box
    res = pl.propose(box, sample.features, net)
    mids = ExtremeSet.from_array(diamond_from_box(box))
    assert res.predicted_extremes == mids
    np.testing.assert_array_equal(res.octagon, octagon_from_extremes(mids))
    assert res.diamond40.shape == (40, 2) and res.octagon128.shape == (128, 2)
    np.testing.assert_allclose(res.octagon128[0], mids.top, atol=1e-12)


def test_perfect_regressor_octagon_through_gt_extremes(sample, monkeypatch):
    gt = extreme_points(sample.gt_polygon)
    box = sample.jittered_box
    d = pl.diamond40(box)
    oracle = np.zeros((1, 40, 2))
    oracle[0, list(pl.PROPOSAL_INDICES)] = gt.as_array() - d[list(pl.PROPOSAL_INDICES)]
    monkeypatch.setattr(pl, "snake_forward", lambda F, c, net, mode="eval": Tensor(oracle))
    res = pl.propose(box, sample.features, SnakeNet(TINY))
    np.testing.assert_allclose(res.predicted_extremes.as_array(), gt.as_array(), atol=1e-12)
    for p in gt.as_array():
        assert point_on_polyline(p, res.octagon, 1e-9)


def test_proposal_box_outside_extent_is_clamped(sample):
    net = SnakeNet(TINY)
    res = pl.propose(Box(-20, -10, 60, 300), sample.features, net)
    assert res.diamond40.min() >= 0 and res.diamond40.max() <= 127
    with pytest.raises(GeometryError):
        pl.propose(Box(200, 200, 220, 230), sample.features, net)


def test_degenerate_prediction_falls_back_to_midpoints(sample, monkeypatch, caplog):
    box = Box(20, 20, 60, 60)
    d = pl.diamond40(box)
    collapse = np.zeros((1, 40, 2))
    collapse[0, list(pl.PROPOSAL_INDICES)] = [30, 30] - d[list(pl.PROPOSAL_INDICES)]
    monkeypatch.setattr(pl, "snake_forward", lambda F, c, net, mode="eval": Tensor(collapse))
    res = pl.propose(box, sample.features, SnakeNet(TINY))
    assert "degenerate" in caplog.text
    assert res.octagon128.shape == (128, 2)


# ------------------------------------------------------------ deformation


def test_zero_head_deform_is_constant_and_zero_iterations(sample):
    net = SnakeNet(TINY)
    init = pl.propose(sample.gt_box, sample.features, net).octagon128
    trace = pl.deform(init, sample.features, net, 3)
    assert len(trace.contours) == 4
    for c in trace.contours:
        np.testing.assert_array_equal(c, init)
    assert len(pl.deform(init, sample.features, net, 0).contours) == 1


def test_deform_clamps_to_extent(sample):
    net = SnakeNet(TINY, zero_head=False)
    net.params["head.2.bias"].data[:] = 500.0
    init = pl.propose(sample.gt_box, sample.features, SnakeNet(TINY)).octagon128
    trace = pl.deform(init, sample.features, net, 2)
    for c in trace.contours[1:]:
        assert c.shape == (128, 2)
        assert c.min() >= 0 and c.max() <= 127
    json.dumps(trace.to_json_obj())


def test_segment_deterministic_and_batched(sample):
    prop, dfm = SnakeNet(TINY, seed=1, zero_head=False), SnakeNet(TINY, seed=2, zero_head=False)
    a = pl.segment(sample.jittered_box, sample.features, prop, dfm, 3)
    b = pl.segment(sample.jittered_box, sample.features, prop, dfm, 3)
    assert a.shape == (128, 2)
    np.testing.assert_array_equal(a, b)
    other = make_sample(777)
    _, traces = pl.segment_batch([sample.jittered_box, other.jittered_box],
                                 [sample.features, other.features], prop, dfm, 3)
    np.testing.assert_allclose(traces[0].final, a, atol=1e-9)


# ----------------------------------------------------------------- targets


def test_build_targets_square():
    sq = np.array([[0.0, 0.0], [8.0, 0.0], [8.0, 8.0], [0.0, 8.0]])
    t = pl.build_targets(sq, 16)
    assert t.gt_extremes == ExtremeSet((0.0, 0.0), (0.0, 0.0), (8.0, 8.0), (8.0, 0.0))  # lowest-index ties
    assert t.gt_contour128.shape == (16, 2)
    np.testing.assert_array_equal(t.gt_contour128[0], [0.0, 0.0])


def test_build_targets_resample_oracle(sample):
    t = pl.build_targets(sample.gt_polygon)
    ref = brute_resample(sample.gt_polygon, 128, t.gt_extremes.top)
    assert np.abs(t.gt_contour128 - ref).max() < 1e-9


# ------------------------------------------------------------------ losses


def test_loss_extremes_examples():
    gt = ExtremeSet((5, 0), (0, 5), (5, 10), (10, 5))
    assert pl.loss_extremes(gt, gt).item() == 0.0
    off = ExtremeSet((5.5, 0), (0, 5), (5, 10), (10, 5))
    assert pl.loss_extremes(off, gt).item() == 0.03125
    rng = np.random.default_rng(0)
    p, g = rng.normal(size=(4, 2)) * 2, rng.normal(size=(4, 2))
    hand = sum(smooth_l1_scalar(v) for v in (p - g).ravel()) / 4
    assert pl.loss_extremes(p, g).item() == pytest.approx(hand, rel=1e-14)


def test_loss_iter_examples():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 50, size=(128, 2))
    assert pl.loss_iter(gt, gt).item() == 0.0
    assert pl.loss_iter(gt + [2.0, 0.0], gt).item() == 1.5
    pred = gt + rng.normal(size=gt.shape)
    hand = sum(smooth_l1_scalar(v) for v in (pred - gt).ravel()) / 128
    assert pl.loss_iter(pred, gt).item() == pytest.approx(hand, rel=1e-13)
    with pytest.raises(ValueError):
        pl.loss_iter(gt[:127], gt)


def test_loss_iter_is_not_rotation_invariant(sample):
    gt = pl.build_targets(sample.gt_polygon).gt_contour128
    assert pl.loss_iter(np.roll(gt, 1, axis=0), gt).item() > pl.loss_iter(gt, gt).item()


# ---------------------------------------------------------------- training


def test_zero_head_training_loss_closed_form(sample):
    prop, dfm = SnakeNet(TINY, seed=0), SnakeNet(TINY, seed=1)
    total, parts = pl.training_loss_batch([sample], prop, dfm, 3)
    t = pl.build_targets(sample.gt_polygon)
    mids = diamond_from_box(sample.jittered_box)
    l_ex = sum(smooth_l1_scalar(v) for v in (mids - t.gt_extremes.as_array()).ravel()) / 4
    start = pl.initial_contour(t.gt_extremes)[1]
    l_it = sum(smooth_l1_scalar(v) for v in (start - t.gt_contour128).ravel()) / 128
    assert parts["loss_ex"] == pytest.approx(l_ex, rel=1e-12)
    assert parts["loss_iter"] == pytest.approx([l_it] * 3, rel=1e-12)
    assert total.item() == pytest.approx(l_ex + 3 * l_it, rel=1e-12)
    assert total.item() >= 0


def test_perfect_predictor_zero_loss(monkeypatch):
    # integer-valued geometry keeps c + (gt - c) == gt exact
    poly = np.array([[20.0, 20.0], [20.0, 60.0], [60.0, 60.0], [60.0, 20.0]])
    s = make_sample(5)
    s = type(s)(s.seed, s.kind, poly, s.features, Box(20, 20, 60, 60), Box(20, 20, 60, 60), s.meta)
    t = pl.build_targets(poly)
    d = pl.diamond40(s.jittered_box)

    def oracle(F, c, net, mode="eval"):
        c = np.asarray(c)
        if c.shape[1] == 40:
            off = np.zeros((1, 40, 2))
            off[0, list(pl.PROPOSAL_INDICES)] = t.gt_extremes.as_array() - d[list(pl.PROPOSAL_INDICES)]
        else:
            off = t.gt_contour128[None] - c
        return Tensor(off)

    monkeypatch.setattr(pl, "snake_forward", oracle)
    total, _ = pl.training_loss_batch([s], SnakeNet(TINY), SnakeNet(TINY), 3)
    assert total.item() == 0.0


def test_iteration_inputs_are_detached(sample):
    dfm = SnakeNet(TINY, seed=1, zero_head=False)
    prop = SnakeNet(TINY, seed=0)
    with Tape() as tape:
        total, _ = pl.training_loss_batch([sample], prop, dfm, 2)
        tape.backward(total)
    joint = {k: p.grad.copy() for k, p in dfm.params.items()}

    # the same two iterations, each on its own tape from a constant input
    t = pl.build_targets(sample.gt_polygon)
    cur = pl.initial_contour(t.gt_extremes)[1][None]
    F = pl._feature_batch([sample.features], dfm.dtype)
    summed = {k: 0.0 for k in joint}
    for _ in range(2):
        dfm.zero_grad()
        with Tape() as tape:
            pred = ad.add(pl.snake_forward(F, cur, dfm, "train"), cur)
            tape.backward(pl.loss_iter(pred, t.gt_contour128[None]))
        summed = {k: summed[k] + p.grad for k, p in dfm.params.items()}
        cur = pl.clamp_to_extent(pred.data, 128, 128)
    for k in joint:
        np.testing.assert_allclose(joint[k], summed[k], rtol=1e-10, atol=1e-14)


def test_loss_decreases_over_50_adam_steps(sample):
    prop, dfm = SnakeNet(TINY, seed=3), SnakeNet(TINY, seed=4)
    params = {f"p.{k}": v for k, v in prop.params.items()}
    params.update({f"d.{k}": v for k, v in dfm.params.items()})
    opt = ad.Adam(params, lr=1e-3)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        with Tape() as tape:
            total = pl.total_training_loss(sample, prop, dfm, 3)
            tape.backward(total)
        losses.append(total.item())
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_teacher_forced_training_path(sample):
    prop, dfm = SnakeNet(TINY, seed=0), SnakeNet(TINY, seed=1)
    total, parts = pl.training_loss_batch([sample], prop, dfm, 2, teacher_forcing=False)
    assert len(parts["loss_iter"]) == 2 and np.isfinite(total.item())


def test_octagon_iou_is_reasonable_start(sample):
    t = pl.build_targets(sample.gt_polygon)
    start = pl.initial_contour(t.gt_extremes)[1]
    assert polygon_iou(start, sample.gt_polygon) > 0.6
