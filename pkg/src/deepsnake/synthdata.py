"""Procedural shapes, analytic feature maps and simulated detector boxes.

Every sample is a pure function of its integer seed.  Feature maps stand in
for a CNN backbone: channel 0 is the inside mask, 1 the clamped signed
distance, 2 a blurred boundary indicator and 3 a blurred mask.  Grid node
``(row y, col x)`` holds the value at image point ``(x, y)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import kernels
from .autodiff import atomic_write_bytes
from .geometry import Box, as_points, canonical_orientation, contour_to_list

EXTENT = 128
MARGIN = 12
CHANNELS = 4
SDF_CLAMP = 16.0
KINDS = ("ellipse", "polygon", "blob")
CACHE_VERSION = 1
SPLIT_STRIDE = 1_000_000
EVAL_OFFSET = 500_000
_MAX_RETRIES = 64


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32

    @property
    def H(self):
        return self.data.shape[0]

    @property
    def W(self):
        return self.data.shape[1]

    @property
    def C(self):
        return self.data.shape[2]


@dataclass
class ShapeSample:
    seed: int
    kind: str
    gt_polygon: np.ndarray
    features: FeatureMap
    gt_box: Box
    jittered_box: Box
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------- shapes


def _place(rng, local, extent, margin):
    """Translate a centred polygon to a random spot inside the margins."""
    lo, hi = local.min(axis=0), local.max(axis=0)
    avail = (extent - margin) - margin
    size = hi - lo
    if (size > avail).any():
        local = local * (avail / size.max()) * 0.98
        lo, hi = local.min(axis=0), local.max(axis=0)
    off_lo = margin - lo
    off_hi = (extent - margin) - hi
    return local + rng.uniform(off_lo, off_hi)


def blob_radii(theta, r0, amps, phases):
    m = np.arange(1, len(amps) + 1)
    return r0 * (1.0 + (amps[None, :] * np.cos(m[None, :] * theta[:, None] + phases[None, :])).sum(axis=1))


def gen_shape(seed, kind, extent=EXTENT, margin=MARGIN) -> np.ndarray:
    """Simple polygon of the given kind, ordered top -> left -> bottom -> right."""
    if kind not in KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    for _ in range(_MAX_RETRIES):
        if kind == "ellipse":
            a, b = rng.uniform(10.0, 45.0, size=2)
            phi = rng.uniform(0.0, math.pi)
            t = 2 * math.pi * np.arange(64) / 64
            xy = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
            rot = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
            local = xy @ rot.T
        elif kind == "polygon":
            k = int(rng.integers(5, 11))
            a, b = rng.uniform(15.0, 45.0, size=2)
            t = np.sort(rng.uniform(0.0, 2 * math.pi, size=k))
            gaps = np.diff(np.concatenate([t, [t[0] + 2 * math.pi]]))
            if gaps.min() < 0.25 or gaps.max() > math.pi * 0.9:
                continue
            local = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
        else:
            r0 = rng.uniform(15.0, 42.0)
            amps = rng.uniform(-0.3, 0.3, size=5)
            phases = rng.uniform(0.0, 2 * math.pi, size=5)
            t = 2 * math.pi * np.arange(64) / 64
            r = blob_radii(t, r0, amps, phases)
            if r.min() < 0.35 * r0:
                continue
            local = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        poly = _place(rng, local, extent, margin)
        area = 0.5 * abs(np.dot(poly[:, 0], np.roll(poly[:, 1], -1)) - np.dot(np.roll(poly[:, 0], -1), poly[:, 1]))
        if area >= 100.0:
            return canonical_orientation(poly)
    raise RuntimeError(f"could not generate a {kind} for seed {seed}")


# ----------------------------------------------------------------- features


def render_features(polygon, H=EXTENT, W=EXTENT) -> FeatureMap:
    pts = np.ascontiguousarray(as_points(polygon))
    mask = kernels.rasterize(pts, -0.5, -0.5, 1.0, W, H).astype(np.float64)
    dist = kernels.boundary_distance(pts, H, W)
    sdf = np.where(mask > 0, dist, -dist)
    ch1 = np.clip(sdf, -SDF_CLAMP, SDF_CLAMP) / SDF_CLAMP
    edge = (dist < 1.0).astype(np.float64)
    ch2 = uniform_filter(edge, size=5, mode="constant")
    ch3 = uniform_filter(mask, size=9, mode="constant")
    data = np.stack([mask, ch1, ch2, ch3], axis=-1).astype(np.float32)
    return FeatureMap(np.ascontiguousarray(data))


# -------------------------------------------------------------------- boxes


def jitter_box(box: Box, seed, max_rel=0.1) -> Box:
    """Shift each side by ``uniform(-max_rel, max_rel)`` times the side length."""
    if not 0.0 <= max_rel < 0.5:
        raise ValueError("max_rel must be in [0, 0.5)")
    if max_rel == 0.0:
        return box
    w, h = box.width, box.height
    for attempt in range(_MAX_RETRIES):
        rng = np.random.default_rng([seed, 0x6A17, attempt])
        d = rng.uniform(-max_rel, max_rel, size=4) * np.array([w, h, w, h])
        x0, y0, x1, y1 = np.array(box.as_tuple()) + d
        if x0 < x1 and y0 < y1:
            return Box(float(x0), float(y0), float(x1), float(y1))
    raise RuntimeError("box collapsed under jitter")


# ------------------------------------------------------------------ dataset


def sample_seeds(seed, count, split="train"):
    if count > EVAL_OFFSET:
        raise ValueError(f"at most {EVAL_OFFSET} samples per split")
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    base = seed * SPLIT_STRIDE + (EVAL_OFFSET if split == "eval" else 0)
    return [base + i for i in range(count)]


def _normalize_mix(kind_mix):
    if kind_mix is None:
        kind_mix = {k: 1.0 for k in KINDS}
    w = np.array([float(kind_mix.get(k, 0.0)) for k in KINDS])
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("kind_mix weights must be non-negative and not all zero")
    return w / w.sum()


def make_sample(sample_seed, kind_mix=None, max_rel=0.1, extent=EXTENT) -> ShapeSample:
    probs = _normalize_mix(kind_mix)
    kind = KINDS[int(np.random.default_rng([sample_seed, 99]).choice(len(KINDS), p=probs))]
    poly = gen_shape(sample_seed, kind, extent=extent)
    gt_box = Box.from_points(poly)
    return ShapeSample(
        seed=sample_seed,
        kind=kind,
        gt_polygon=poly,
        features=render_features(poly, extent, extent),
        gt_box=gt_box,
        jittered_box=jitter_box(gt_box, sample_seed, max_rel),
    )


def make_dataset(seed, count, kind_mix=None, split="train", max_rel=0.1, extent=EXTENT):
    return [make_sample(s, kind_mix, max_rel, extent) for s in sample_seeds(seed, count, split)]


def feature_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.features.data.tobytes())
    return h.hexdigest()


# -------------------------------------------------------------------- cache


def gen_params(kind_mix=None, max_rel=0.1, extent=EXTENT) -> dict:
    """Generation settings a cached sample must match to be reused."""
    return {"kind_mix": [float(w) for w in _normalize_mix(kind_mix)], "max_rel": float(max_rel),
            "extent": int(extent)}


def _sample_paths(cache_dir, seed):
    return (os.path.join(cache_dir, f"sample_{seed}.json"),
            os.path.join(cache_dir, f"sample_{seed}.bin"))


def save_sample(cache_dir, s: ShapeSample, params=None):
    jpath, bpath = _sample_paths(cache_dir, s.seed)
    arr = np.ascontiguousarray(s.features.data, dtype="<f4")
    atomic_write_bytes(bpath, arr.tobytes())
    doc = {
        "format_version": CACHE_VERSION,
        "params": params if params is not None else gen_params(),
        "seed": s.seed,
        "kind": s.kind,
        "gt_polygon": contour_to_list(s.gt_polygon),
        "gt_box": list(s.gt_box.as_tuple()),
        "jittered_box": list(s.jittered_box.as_tuple()),
        "features": {"shape": list(arr.shape), "dtype": "float32", "byteorder": "little",
                     "file": os.path.basename(bpath)},
    }
    atomic_write_bytes(jpath, json.dumps(doc, sort_keys=True).encode())


def load_sample(cache_dir, seed, params=None):
    """Cached sample for ``seed``, or None when absent, stale or generated differently."""
    jpath, bpath = _sample_paths(cache_dir, seed)
    try:
        with open(jpath) as fh:
            doc = json.load(fh)
        if doc.get("format_version") != CACHE_VERSION:
            return None
        if doc.get("params") != (params if params is not None else gen_params()):
            return None
        with open(bpath, "rb") as fh:
            raw = fh.read()
    except (OSError, ValueError):
        return None
    shape = tuple(doc["features"]["shape"])
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return ShapeSample(
        seed=doc["seed"],
        kind=doc["kind"],
        gt_polygon=np.asarray(doc["gt_polygon"], dtype=np.float64),
        features=FeatureMap(np.ascontiguousarray(data)),
        gt_box=Box(*doc["gt_box"]),
        jittered_box=Box(*doc["jittered_box"]),
    )


def load_or_make(cache_dir, seeds, kind_mix=None, max_rel=0.1, extent=EXTENT):
    """Read samples from the cache when valid, generating (without writing) otherwise."""
    params = gen_params(kind_mix, max_rel, extent)
    out = []
    for s in seeds:
        cached = load_sample(cache_dir, s, params) if cache_dir else None
        out.append(cached if cached is not None else make_sample(s, kind_mix, max_rel, extent))
    return out
