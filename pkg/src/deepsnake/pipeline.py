"""Two-stage contour segmentation: extreme-point proposal, then iterative deformation.

Stage 1 turns a box into a 40-vertex diamond, predicts offsets from the four
edge midpoints to the object's extreme points and builds the cut-corner
octagon.  Stage 2 resamples the octagon to ``N`` vertices starting at the top
extreme and repeatedly adds predicted offsets.

Batched variants (``*_batch``) run many samples through one network call; the
single-sample functions are thin wrappers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    Box,
    ExtremeSet,
    GeometryError,
    diamond_from_box,
    extreme_points,
    gt_contour,
    octagon_from_extremes,
    uniform_resample,
)
from .snakenet import SnakeNet, snake_forward

log = logging.getLogger(__name__)

N_VERTICES = 128
N_PROPOSAL = 40
PROPOSAL_INDICES = (0, 10, 20, 30)


@dataclass
class ProposalResult:
    diamond40: np.ndarray
    predicted_extremes: ExtremeSet
    octagon: np.ndarray
    octagon128: np.ndarray


@dataclass
class DeformTrace:
    contours: list  # iterations + 1 arrays of shape (N, 2); index 0 is the input

    @property
    def final(self):
        return self.contours[-1]

    def to_json_obj(self):
        return [[[float(x), float(y)] for x, y in c] for c in self.contours]


@dataclass
class TrainTargets:
    gt_extremes: ExtremeSet
    gt_contour128: np.ndarray


# ------------------------------------------------------------------ helpers


def _feature_batch(Fs, dtype):
    """Stack feature maps into ``(B, H, W, C)`` of the network's dtype."""
    arrs = [getattr(F, "data", F) for F in Fs]
    return np.ascontiguousarray(np.stack(arrs).astype(dtype, copy=False))


def clamp_to_extent(pts, H, W):
    out = np.array(pts, dtype=np.float64, copy=True)
    np.clip(out[..., 0], 0.0, W - 1, out=out[..., 0])
    np.clip(out[..., 1], 0.0, H - 1, out=out[..., 1])
    return out


def clamp_box(box: Box, H, W) -> Box:
    x0, x1 = np.clip([box.x_min, box.x_max], 0.0, W - 1)
    y0, y1 = np.clip([box.y_min, box.y_max], 0.0, H - 1)
    try:
        return Box(float(x0), float(y0), float(x1), float(y1))
    except GeometryError as e:
        raise GeometryError(f"box {box.as_tuple()} is degenerate inside the feature map") from e


def diamond40(box: Box) -> np.ndarray:
    """Diamond upsampled to 40 vertices; the edge midpoints sit at 0, 10, 20, 30."""
    corners = diamond_from_box(box)
    t = np.arange(10)[:, None] / 10.0
    edges = [corners[e] + t * (corners[(e + 1) % 4] - corners[e]) for e in range(4)]
    return np.vstack(edges)


def initial_contour(ex: ExtremeSet, n=N_VERTICES) -> tuple[np.ndarray, np.ndarray]:
    """Octagon for ``ex`` and its ``n``-vertex resampling starting at the top extreme."""
    octagon = octagon_from_extremes(ex)
    return octagon, uniform_resample(octagon, n, start=ex.top)


def build_targets(gt_polygon, n=N_VERTICES) -> TrainTargets:
    ex = extreme_points(gt_polygon)
    return TrainTargets(ex, gt_contour(gt_polygon, ex.top, n))


# ------------------------------------------------------------------- losses


def loss_extremes(pred, gt):
    """Mean smooth-L1 over the four extreme points."""
    p = pred.as_array() if isinstance(pred, ExtremeSet) else pred
    g = gt.as_array() if isinstance(gt, ExtremeSet) else gt
    return ad.smooth_l1(p, g)


def loss_iter(pred, gt):
    """Mean smooth-L1 between vertex ``i`` of ``pred`` and vertex ``i`` of ``gt``."""
    p_shape = pred.shape if isinstance(pred, Tensor) else np.shape(pred)
    if p_shape != np.shape(gt):
        raise ValueError(f"vertex count mismatch: {p_shape} vs {np.shape(gt)}")
    return ad.smooth_l1(pred, gt)


# ---------------------------------------------------------------- inference


def _proposal_offsets(boxes, F4, net: SnakeNet, mode):
    H, W = F4.shape[1:3]
    boxes = [clamp_box(b, H, W) for b in boxes]
    diamonds = np.stack([diamond40(b) for b in boxes])
    offsets = snake_forward(F4, diamonds, net, mode)
    return diamonds, offsets


def _safe_initial(ex: ExtremeSet, fallback: ExtremeSet, n):
    try:
        return initial_contour(ex, n)
    except GeometryError:
        log.warning("predicted extreme points are degenerate; using box midpoints")
        return initial_contour(fallback, n)


def propose_batch(boxes, Fs, net: SnakeNet, n=N_VERTICES, mode="eval"):
    F4 = _feature_batch(Fs, net.dtype)
    diamonds, offsets = _proposal_offsets(boxes, F4, net, mode)
    idx = list(PROPOSAL_INDICES)
    pred = diamonds[:, idx] + offsets.data[:, idx]
    results = []
    for d, p in zip(diamonds, pred):
        ex = ExtremeSet.from_array(p)
        octagon, oct_n = _safe_initial(ex, ExtremeSet.from_array(d[idx]), n)
        results.append(ProposalResult(d, ex, octagon, oct_n))
    return results


def propose(box: Box, F, net: SnakeNet, n=N_VERTICES) -> ProposalResult:
    return propose_batch([box], [F], net, n)[0]


def deform_batch(initial, Fs, net: SnakeNet, iterations, mode="eval"):
    """Per-sample traces of ``iterations`` vertex-wise offset additions."""
    F4 = _feature_batch(Fs, net.dtype)
    H, W = F4.shape[1:3]
    cur = np.asarray(initial, dtype=np.float64)
    steps = [cur]
    for _ in range(iterations):
        off = snake_forward(F4, cur, net, mode)
        cur = clamp_to_extent(cur + off.data, H, W)
        steps.append(cur)
    return [DeformTrace([s[b] for s in steps]) for b in range(cur.shape[0])]


def deform(initial, F, net: SnakeNet, iterations) -> DeformTrace:
    return deform_batch(np.asarray(initial)[None], [F], net, iterations)[0]


def segment_batch(boxes, Fs, proposal_net, deform_net, iterations):
    props = propose_batch(boxes, Fs, proposal_net, N_VERTICES)
    traces = deform_batch(np.stack([p.octagon128 for p in props]), Fs, deform_net, iterations)
    return props, traces


def segment(box, F, proposal_net, deform_net, iterations):
    """Full inference path; returns the final ``N``-vertex contour."""
    return segment_batch([box], [F], proposal_net, deform_net, iterations)[1][0].final


# ----------------------------------------------------------------- training


def training_loss_batch(samples, proposal_net, deform_net, iterations, teacher_forcing=True,
                        boxes=None):
    """Summed proposal and per-iteration deformation losses, averaged over samples.

    Each iteration's input contour is a constant, so gradients never flow from
    one iteration into the previous one.  With ``teacher_forcing`` the
    deformation starts from the octagon built on the ground-truth extremes.
    Returns the loss tensor and a dict of float components.
    """
    dtype = deform_net.dtype
    F4 = _feature_batch([s.features for s in samples], dtype)
    H, W = F4.shape[1:3]
    boxes = boxes if boxes is not None else [s.jittered_box for s in samples]
    targets = [build_targets(s.gt_polygon) for s in samples]
    gt_ex = np.stack([t.gt_extremes.as_array() for t in targets])
    gt_c = np.stack([t.gt_contour128 for t in targets])

    diamonds, offsets = _proposal_offsets(boxes, F4, proposal_net, "train")
    idx = list(PROPOSAL_INDICES)
    pred_ex = ad.add(ad.take_rows(offsets, idx), diamonds[:, idx].astype(dtype))
    l_ex = loss_extremes(pred_ex, gt_ex)

    if teacher_forcing:
        starts = [initial_contour(t.gt_extremes)[1] for t in targets]
    else:
        starts = [_safe_initial(ExtremeSet.from_array(p), ExtremeSet.from_array(d[idx]), N_VERTICES)[1]
                  for p, d in zip(pred_ex.data, diamonds)]
    cur = np.stack(starts)
    terms = [l_ex]
    for _ in range(iterations):
        off = snake_forward(F4, cur, deform_net, "train")
        pred = ad.add(off, cur.astype(dtype))
        terms.append(loss_iter(pred, gt_c))
        cur = clamp_to_extent(pred.data, H, W)
    total = ad.sum_scalars(terms)
    parts = {"loss_ex": l_ex.item(), "loss_iter": [t.item() for t in terms[1:]]}
    return total, parts


def total_training_loss(sample, proposal_net, deform_net, iterations, teacher_forcing=True):
    return training_loss_batch([sample], proposal_net, deform_net, iterations, teacher_forcing)[0]
