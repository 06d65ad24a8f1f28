"""The snake network: vertex features -> residual conv backbone -> fusion -> head.

One :class:`SnakeNet` instance maps a contour with ``N`` vertices and a
feature map to ``N`` per-vertex offsets in pixels.  The same parameters work
for any ``N``; the pipeline keeps two instances (proposal and deformation)
with identical architecture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV_KINDS = ("circular", "graph")


@dataclass(frozen=True)
class SnakeNetConfig:
    state_dim: int = 64
    kernel_size: int = 9
    backbone_depth: int = 8
    conv_kind: str = "circular"
    fusion_dim: int = 128
    head_hidden: int = 64
    feature_channels: int = 4
    # "bbox": coordinates divided by the contour's longer bbox side; "none": min-subtraction only
    coord_scale: str = "bbox"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.backbone_depth < 1:
            raise ValueError("backbone_depth must be >= 1")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"conv_kind must be one of {CONV_KINDS}")
        if self.coord_scale not in ("bbox", "none"):
            raise ValueError("coord_scale must be 'bbox' or 'none'")
        for f in ("state_dim", "fusion_dim", "head_hidden", "feature_channels"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    def to_dict(self):
        return asdict(self)


def graph_conv(f, w_self, w_nbr, b):
    """Cycle-graph convolution: ``f_i W_self + mean(f_{i-1}, f_{i+1}) W_nbr + b``."""
    f, w_self, w_nbr, b = (x if isinstance(x, Tensor) else Tensor(x) for x in (f, w_self, w_nbr, b))
    if f.shape[-1] != w_self.shape[0] or w_self.shape != w_nbr.shape or b.shape != (w_self.shape[1],):
        raise ValueError(f"graph_conv shape mismatch: f {f.shape}, w {w_self.shape}/{w_nbr.shape}, b {b.shape}")
    din, dout = w_self.shape
    nbr = 0.5 * (np.roll(f.data, 1, axis=-2) + np.roll(f.data, -1, axis=-2))
    out = f.data @ w_self.data + nbr @ w_nbr.data + b.data

    def back(g):
        g2 = g.reshape(-1, dout)
        gf = None
        if f.requires_grad:
            gn = g @ w_nbr.data.T
            gf = g @ w_self.data.T + 0.5 * (np.roll(gn, -1, axis=-2) + np.roll(gn, 1, axis=-2))
        gws = f.data.reshape(-1, din).T @ g2 if w_self.requires_grad else None
        gwn = nbr.reshape(-1, din).T @ g2 if w_nbr.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gf, gws, gwn, gb

    return ad._make(out, (f, w_self, w_nbr, b), back, "graph_conv")


class SnakeNet:
    """Parameters and running statistics for one snake network."""

    def __init__(self, config: SnakeNetConfig = SnakeNetConfig(), seed=0, dtype=np.float64,
                 zero_head=True):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        D = c.state_dim
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.norms: list[ad.NormLayer] = []

        def param(name, arr):
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)

        def zeros(*shape):
            return np.zeros(shape, dtype=self.dtype)

        cin = c.feature_channels + 2
        param("input.weight", ad.kaiming_uniform(rng, (cin, D), cin))
        param("input.bias", zeros(D))
        for i in range(c.backbone_depth):
            p = f"backbone.{i}"
            if c.conv_kind == "circular":
                fan = c.kernel_size * D
                param(f"{p}.conv.weight", ad.kaiming_uniform(rng, (c.kernel_size, D, D), fan))
            else:
                param(f"{p}.conv.w_self", ad.kaiming_uniform(rng, (D, D), 2 * D))
                param(f"{p}.conv.w_nbr", ad.kaiming_uniform(rng, (D, D), 2 * D))
            param(f"{p}.conv.bias", zeros(D))
            norm = ad.NormLayer(D, dtype=self.dtype, name=f"{p}.norm")
            self.params[norm.scale.name] = norm.scale
            self.params[norm.shift.name] = norm.shift
            self.buffers[norm.running_mean.name] = norm.running_mean
            self.buffers[norm.running_var.name] = norm.running_var
            self.norms.append(norm)
        fin = c.backbone_depth * D
        param("fusion.weight", ad.kaiming_uniform(rng, (fin, c.fusion_dim), fin))
        param("fusion.bias", zeros(c.fusion_dim))
        widths = [D + c.fusion_dim, c.head_hidden, c.head_hidden, 2]
        for j in range(3):
            w = ad.kaiming_uniform(rng, (widths[j], widths[j + 1]), widths[j])
            if j == 2 and zero_head:
                w = np.zeros_like(w)
            param(f"head.{j}.weight", w)
            param(f"head.{j}.bias", zeros(widths[j + 1]))

    # ------------------------------------------------------------ state

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self, prefix="") -> dict:
        out = {prefix + k: t.data for k, t in self.params.items()}
        out.update({prefix + k: t.data for k, t in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict, prefix=""):
        for k, t in list(self.params.items()) + list(self.buffers.items()):
            key = prefix + k
            if key not in state:
                raise KeyError(f"missing tensor {key}")
            arr = np.asarray(state[key])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {key}: {arr.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def astype(self, dtype) -> SnakeNet:
        other = SnakeNet(self.config, dtype=dtype)
        other.load_state_dict(self.state_dict())
        return other

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------------ forward


def build_vertex_features(F, contour, coord_scale="bbox"):
    """Rows ``[F(x_i); (x_i - min_j x_j) / scale]`` for every vertex.

    ``contour`` is ``(N, 2)`` or a batch ``(B, N, 2)``; ``F`` matches the batch
    (or is a single map).  ``scale`` is the longer side of the contour's
    bounding box, or 1 when ``coord_scale="none"``.
    """
    Ft = F if isinstance(F, Tensor) else Tensor(F)
    pts = np.asarray(contour, dtype=np.float64)
    sampled = ad.bilinear_sample(Ft, pts)
    lo = pts.min(axis=-2, keepdims=True)
    rel = pts - lo
    if coord_scale == "bbox":
        ext = pts.max(axis=-2, keepdims=True) - lo
        s = ext.max(axis=-1, keepdims=True)
        rel = rel / np.where(s > 0, s, 1.0)
    return ad.concat_channels(sampled, Tensor(rel.astype(sampled.dtype)))


def backbone_forward(feats, net: SnakeNet, mode="eval"):
    """Residual conv-norm-relu blocks; returns every block's output."""
    c, p = net.config, net.params
    h = ad.conv1x1(feats, p["input.weight"], p["input.bias"])
    outs = []
    for i in range(c.backbone_depth):
        q = f"backbone.{i}.conv"
        if c.conv_kind == "circular":
            z = ad.circular_conv1d(h, p[f"{q}.weight"], p[f"{q}.bias"])
        else:
            z = graph_conv(h, p[f"{q}.w_self"], p[f"{q}.w_nbr"], p[f"{q}.bias"])
        z = ad.relu(ad.norm_layer(z, net.norms[i], mode))
        h = ad.add(z, h)
        outs.append(h)
    return outs


def fusion_forward(layer_outputs, net: SnakeNet):
    """Global max-pooled descriptor of all block outputs, appended to the last block."""
    if not layer_outputs:
        raise ValueError("fusion needs at least one backbone output")
    p = net.params
    cat = ad.concat_many(layer_outputs)
    g = ad.max_pool_vertices(ad.conv1x1(cat, p["fusion.weight"], p["fusion.bias"]))
    return ad.concat_channels(layer_outputs[-1], g)


def head_forward(fused, net: SnakeNet):
    p = net.params
    h = ad.relu(ad.conv1x1(fused, p["head.0.weight"], p["head.0.bias"]))
    h = ad.relu(ad.conv1x1(h, p["head.1.weight"], p["head.1.bias"]))
    return ad.conv1x1(h, p["head.2.weight"], p["head.2.bias"])


def snake_forward(F, contour, net: SnakeNet, mode="eval"):
    """Per-vertex offsets (pixels) for ``contour`` over feature map ``F``."""
    feats = build_vertex_features(F, contour, net.config.coord_scale)
    outs = backbone_forward(feats, net, mode)
    return head_forward(fusion_forward(outs, net), net)
