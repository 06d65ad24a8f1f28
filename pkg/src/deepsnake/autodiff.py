"""A small tape-based reverse-mode autodiff for dense float arrays.

Only the operations the snake network needs are provided.  Tensors wrap
numpy arrays; operations executed inside a ``with Tape() as tape:`` block are
recorded when at least one input requires a gradient, and
``tape.backward(loss)`` walks the record in reverse, accumulating gradients
into the ``.grad`` of leaf tensors.  Outside of a tape nothing is recorded,
which is how inference runs.

Vertex-wise operations accept either ``(N, D)`` arrays or batches of
``(B, N, D)``; the vertex axis is always ``-2``.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import threading

import numpy as np

from . import kernels

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.9
CHECKPOINT_VERSION = 1


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    s = _stack()
    return s[-1] if s else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out, parents, backward):
        out._tape = self
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor):
        if self._done:
            raise AutodiffError("backward already ran on this tape; start a new Tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise AutodiffError("backward needs a scalar loss tensor")
        if loss._tape is not self:
            raise AutodiffError("loss is detached from this tape")
        self._done = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        self.nodes = []


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _sum_to(g, sa), _sum_to(g, sb)

    return _make(a.data + b.data, (a, b), back, "add")


def scale(a, k: float):
    a = _t(a)
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def relu(a):
    a = _t(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def take_rows(a, idx):
    """Select vertices ``idx`` along the vertex axis."""
    a = _t(a)
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, -2, 0), idx, np.moveaxis(g, -2, 0))
        return (out,)

    return _make(a.data[..., idx, :], (a,), back, "take_rows")


# --------------------------------------------------------------- convolutions


def conv1x1(x, w, b):
    """Per-vertex affine map ``x @ w + b``."""
    x, w, b = _t(x), _t(w), _t(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"conv1x1 shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    din, dout = w.shape
    out = x.data @ w.data + b.data

    def back(g):
        g2 = g.reshape(-1, dout)
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, din).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), back, "conv1x1")


def circular_conv1d(x, weight, bias):
    """Circular convolution over the vertex axis.

    ``out[i] = sum_{j=-r..r} x[(i + j) mod N] @ weight[j + r] + bias`` with
    ``weight`` of shape ``(K, D_in, D_out)``, ``K = 2r + 1``.  Kernels longer
    than the contour wrap around it more than once.
    """
    x, weight, bias = _t(x), _t(weight), _t(bias)
    k, din, dout = weight.shape
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if x.shape[-1] != din:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {din}")
    if bias.shape != (dout,):
        raise ValueError(f"bias shape {bias.shape} does not match D_out={dout}")
    squeeze = x.ndim == 2
    x3 = x.data[None] if squeeze else x.data
    bsz, n, _ = x3.shape
    cols = kernels.circ_gather(np.ascontiguousarray(x3), k)
    cols2 = cols.reshape(bsz * n, k * din)
    w2 = weight.data.reshape(k * din, dout)
    out = (cols2 @ w2 + bias.data).reshape(bsz, n, dout)

    def back(g):
        g2 = g.reshape(bsz * n, dout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((g2 @ w2.T).reshape(bsz, n, k, din))
            gx = kernels.circ_scatter(gcols)
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = (cols2.T @ g2).reshape(k, din, dout)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(out[0] if squeeze else out, (x, weight, bias), back, "circular_conv1d")


# -------------------------------------------------------------- normalization


class NormLayer:
    """Per-contour channel standardisation with a learnable affine.

    Train mode standardises each channel over the vertices of each contour and
    folds the batch-averaged statistics into running estimates; eval mode uses
    the running estimates only.
    """

    def __init__(self, dim, dtype=np.float64, name="norm"):
        self.scale = Tensor(np.ones(dim, dtype=dtype), requires_grad=True, name=f"{name}.scale")
        self.shift = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=f"{name}.shift")
        self.running_mean = Tensor(np.zeros(dim, dtype=dtype), name=f"{name}.running_mean")
        self.running_var = Tensor(np.ones(dim, dtype=dtype), name=f"{name}.running_var")

    def tensors(self):
        return [self.scale, self.shift, self.running_mean, self.running_var]


def norm_layer(x, layer: NormLayer, mode="train", eps=NORM_EPS, momentum=NORM_MOMENTUM):
    x = _t(x)
    gamma, beta = layer.scale, layer.shift
    if mode == "eval":
        std = np.sqrt(np.maximum(layer.running_var.data, eps))
        xhat = (x.data - layer.running_mean.data) / std

        def back_eval(g):
            return (g * gamma.data / std,
                    _sum_to(g * xhat, gamma.shape),
                    _sum_to(g, beta.shape))

        return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back_eval, "norm_layer")
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[-2] < 2:
        raise ValueError("train-mode normalisation needs at least 2 vertices")
    mean = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=-2, keepdims=True)
    floored = var < eps
    std = np.sqrt(np.where(floored, eps, var))
    xhat = xc / std
    batch_mean = mean.reshape(-1, mean.shape[-1]).mean(axis=0)
    batch_var = var.reshape(-1, var.shape[-1]).mean(axis=0)
    layer.running_mean.data = momentum * layer.running_mean.data + (1 - momentum) * batch_mean
    layer.running_var.data = momentum * layer.running_var.data + (1 - momentum) * batch_var

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-2, keepdims=True)
            m2 = np.where(floored, 0.0, (gh * xhat).mean(axis=-2, keepdims=True))
            gx = (gh - m1 - xhat * m2) / std
        return gx, _sum_to(g * xhat, gamma.shape), _sum_to(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back, "norm_layer")


# ----------------------------------------------------------- pooling / concat


def max_pool_vertices(x):
    """Channelwise max over vertices, keeping a length-1 vertex axis."""
    x = _t(x)
    arg = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=-2)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[..., None, :], g, axis=-2)
        return (gx,)

    return _make(out, (x,), back, "max_pool_vertices")


def concat_channels(a, b):
    """Concatenate along channels; ``b`` may have a single vertex that is broadcast."""
    a, b = _t(a), _t(b)
    if a.shape[:-2] != b.shape[:-2] or b.shape[-2] not in (1, a.shape[-2]):
        raise ValueError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    d1 = a.shape[-1]
    bb = np.broadcast_to(b.data, a.shape[:-1] + (b.shape[-1],))
    out = np.concatenate([a.data, bb], axis=-1)

    def back(g):
        gb = g[..., d1:]
        if b.shape[-2] == 1:
            gb = gb.sum(axis=-2, keepdims=True)
        return g[..., :d1], gb

    return _make(out, (a, b), back, "concat_channels")


def concat_many(tensors):
    """Channel concatenation of equally shaped vertex tensors."""
    ts = [_t(t) for t in tensors]
    sizes = np.cumsum([t.shape[-1] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=-1)

    def back(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _make(out, tuple(ts), back, "concat_many")


# ----------------------------------------------------------------- sampling


def bilinear_sample(F, pts):
    """Bilinearly sample feature map ``F`` at ``pts``.

    ``F`` is ``(H, W, C)`` or a batch ``(B, H, W, C)``; ``pts`` is ``(n, 2)``
    or ``(B, n, 2)`` ``(x, y)`` rows and is treated as a constant.  Points
    outside the map are clamped to its border.
    """
    F = _t(F)
    if F.data.size == 0:
        raise ValueError("empty feature map")
    pts = np.asarray(pts.data if isinstance(pts, Tensor) else pts)
    single = pts.ndim == 2
    p3 = np.ascontiguousarray((pts[None] if single else pts), dtype=F.dtype)
    F4 = F.data[None] if F.ndim == 3 else F.data
    if F4.shape[0] not in (1, p3.shape[0]):
        raise ValueError("feature batch and point batch disagree")
    out = kernels.bilinear_gather(np.ascontiguousarray(F4), p3)
    fb, H, W, _ = F4.shape

    def back(g):
        g3 = np.ascontiguousarray(g[None] if single else g)
        gF = kernels.bilinear_scatter(g3, p3, fb, H, W)
        return (gF[0] if F.ndim == 3 else gF,)

    return _make(out[0] if single else out, (F,), back, "bilinear_sample")


# -------------------------------------------------------------------- losses


def smooth_l1(pred, target):
    """Mean over points of the per-coordinate smooth-L1 sum (transition at 1)."""
    pred = _t(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    h = np.where(small, 0.5 * d * d, ad - 0.5)
    npts = d.size // 2
    loss = h.sum() / npts

    def back(g):
        return (g * np.where(small, d, np.sign(d)) / npts,)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), back, "smooth_l1")


def sum_scalars(terms):
    terms = [_t(t) for t in terms]
    total = sum(t.data.item() for t in terms)
    return _make(np.asarray(total, dtype=terms[0].dtype), tuple(terms),
                 lambda g: tuple(np.asarray(g) for _ in terms), "sum_scalars")


# ----------------------------------------------------------------- optimizer


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place.

    ``params`` and ``grads`` are dicts of arrays; ``state`` holds ``m``, ``v``
    (dicts of arrays) and the step counter ``t``.
    """
    t = state["t"] + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state["m"][name], state["v"][name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"Adam state shape mismatch for {name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state["t"] = t
    return params, state


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {
            "t": 0,
            "m": {k: np.zeros_like(p.data) for k, p in params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in params.items()},
        }

    def step(self):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(arrays, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# --------------------------------------------------------------- checkpoints


def atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: dict, meta=None) -> bytes:
    """Serialise named arrays: u64 header length, JSON header, little-endian blob."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode()
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode_tensors(payload: bytes):
    (hlen,) = struct.unpack("<Q", payload[:8])
    header = json.loads(payload[8:8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 8 + hlen
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        start = base + e["offset"]
        arr = np.frombuffer(payload[start:start + e["nbytes"]], dtype=dt)
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
    return out, header["meta"]


def save_tensors(path, tensors: dict, meta=None):
    atomic_write_bytes(path, encode_tensors(tensors, meta))


def load_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


# ------------------------------------------------------------------- helpers


def rotate_rows(x, s):
    """Start the vertex axis at row ``s``: ``out[i] = x[(i + s) mod N]``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.roll(arr, -s, axis=-2)


def kaiming_uniform(rng, shape, fan_in, dtype=np.float64):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
