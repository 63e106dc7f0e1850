"""Deterministic stand-ins for the pretrained 2D feature extractors.

Two kinds are available:

* ``random_conv`` -- a frozen stack of seeded 5x5 convolutions (no biases,
  ReLU between layers, edge padding). A black image maps to zero features.
* ``oracle_semantic`` -- embeds a region-ID map through a seeded linear map
  and box-smooths it, giving ground-truth semantics for tests.

Feature location ``(i, j)`` of a stride-``s`` map sits on pixel ``(s*i, s*j)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core_math import box_mean, guided_filter, guided_filter_adjoint
from .tensor_io import read_tensor, write_tensor

KERNEL = 5
MAX_REGION_IDS = 64
GF_RADIUS = 4
GF_EPS = 1e-3


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "random_conv"
    seed: int = 0
    channels: int = 32
    stride: int = 2
    layers: int = 2
    hidden: int = 16
    smooth_radius: int = 1  # oracle only

    def __post_init__(self):
        if self.kind not in ("random_conv", "oracle_semantic"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.stride not in (1, 2, 4):
            raise ValueError("stride must be 1, 2 or 4")
        if self.kind == "random_conv" and (1 << (self.layers)) < self.stride:
            raise ValueError("not enough layers for the requested stride")

    def layer_strides(self):
        n2 = {1: 0, 2: 1, 4: 2}[self.stride]
        return [2] * n2 + [1] * (self.layers - n2)

    @property
    def receptive_radius(self):
        if self.kind == "oracle_semantic":
            return self.smooth_radius
        r, jump = 0, 1
        for s in self.layer_strides():
            r += (KERNEL // 2) * jump
            jump *= s
        return r


def style_spec(seed=0, channels=32):
    return EncoderSpec("random_conv", seed, channels, stride=2, layers=2, hidden=16)


def semantic_spec(seed=1, channels=16, kind="random_conv"):
    if kind == "oracle_semantic":
        return EncoderSpec("oracle_semantic", seed, channels, stride=1, layers=0, hidden=0)
    return EncoderSpec("random_conv", seed, channels, stride=4, layers=3, hidden=24)


@dataclass
class FeatureImage:
    data: np.ndarray  # [H, W, C]
    stride: int = 1
    kind: str = "random_conv"

    @property
    def H(self):
        return self.data.shape[0]

    @property
    def W(self):
        return self.data.shape[1]

    @property
    def C(self):
        return self.data.shape[2]

    def flat(self):
        return self.data.reshape(-1, self.C)


# ---------------------------------------------------------------------------
# Convolution kernels
# ---------------------------------------------------------------------------


def conv_weights(spec: EncoderSpec):
    rng = np.random.default_rng(spec.seed)
    dims = [3] + [spec.hidden] * (spec.layers - 1) + [spec.channels]
    ws = []
    for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
        fan_in = cin * KERNEL * KERNEL
        scale = np.sqrt((1.0 if i == len(dims) - 2 else 2.0) / fan_in)
        ws.append(rng.normal(0.0, scale, size=(KERNEL, KERNEL, cin, cout)).astype(np.float32))
    return ws


def _im2col(x, k, stride):
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    return win.reshape(ho * wo, -1), (ho, wo)


def conv2d(x, w, stride):
    """'Same' convolution with edge padding, sampled every ``stride`` pixels."""
    k, _, cin, cout = w.shape
    cols, (ho, wo) = _im2col(x, k, stride)
    w2 = w.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    return (cols @ w2).reshape(ho, wo, cout)


def conv2d_input_grad(g, w, stride, in_shape):
    k, _, cin, cout = w.shape
    p = k // 2
    H, W = in_shape[:2]
    ho, wo = g.shape[:2]
    w2 = w.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    gcols = (g.reshape(-1, cout) @ w2.T).reshape(ho, wo, cin, k, k)
    gp = np.zeros((H + 2 * p, W + 2 * p, cin), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            gp[di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[:, :, :, di, dj]
    # fold the edge padding back onto the border pixels
    gp[p] += gp[:p].sum(0)
    gp[H + p - 1] += gp[H + p :].sum(0)
    gp[:, p] += gp[:, :p].sum(1)
    gp[:, W + p - 1] += gp[:, W + p :].sum(1)
    return gp[p : H + p, p : W + p]


def random_conv_forward(spec: EncoderSpec, image, weights=None):
    ws = conv_weights(spec) if weights is None else weights
    x = np.asarray(image, dtype=np.float32)
    acts = [x]
    pre = []
    for i, (w, s) in enumerate(zip(ws, spec.layer_strides())):
        z = conv2d(x, w, s)
        pre.append(z)
        x = np.maximum(z, 0) if i < len(ws) - 1 else z
        acts.append(x)
    return x, {"acts": acts, "pre": pre, "weights": ws}


def random_conv_backward(spec: EncoderSpec, cache, grad_out):
    """Gradient of the frozen encoder w.r.t. its input image."""
    ws = cache["weights"]
    strides = spec.layer_strides()
    g = grad_out
    for i in range(len(ws) - 1, -1, -1):
        if i < len(ws) - 1:
            g = g * (cache["pre"][i] > 0)
        g = conv2d_input_grad(g, ws[i], strides[i], cache["acts"][i].shape)
    return g


# ---------------------------------------------------------------------------
# Public encoders
# ---------------------------------------------------------------------------


def _check_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB image [H, W, 3], got {image.shape}")
    return image


def encode_style(spec: EncoderSpec, image) -> FeatureImage:
    image = _check_rgb(image)
    if spec.kind != "random_conv":
        raise ValueError("style encoder must be random_conv")
    f, _ = random_conv_forward(spec, image)
    return FeatureImage(f, spec.stride, spec.kind)


def oracle_embedding(spec: EncoderSpec):
    rng = np.random.default_rng(spec.seed)
    return rng.normal(0.0, 1.0, size=(MAX_REGION_IDS, spec.channels)).astype(np.float32)


def encode_semantic(spec: EncoderSpec, image, labels=None) -> FeatureImage:
    image = _check_rgb(image)
    if spec.kind == "oracle_semantic":
        if labels is None:
            raise ValueError("oracle_semantic encoder needs a region-ID label map")
        labels = np.asarray(labels)
        if labels.shape != image.shape[:2]:
            raise ValueError("label map and image differ in size")
        if labels.min() < 0 or labels.max() >= MAX_REGION_IDS:
            raise ValueError(f"region IDs must lie in [0, {MAX_REGION_IDS})")
        emb = oracle_embedding(spec)[labels.astype(np.int64)]
        if spec.smooth_radius > 0:
            emb = box_mean(emb, spec.smooth_radius).astype(np.float32)
        s = spec.stride
        return FeatureImage(np.ascontiguousarray(emb[::s, ::s]), s, spec.kind)
    f, _ = random_conv_forward(spec, image)
    return FeatureImage(f, spec.stride, spec.kind)


def bilinear_matrix(n_out, n_in, stride, dtype=np.float32):
    """Interpolation matrix taking a stride-``stride`` axis of length ``n_in`` to ``n_out`` pixels."""
    pos = np.minimum(np.arange(n_out) / stride, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
    frac = pos - i0
    M = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if n_in == 1:
        M[:, 0] = 1.0
    else:
        M[rows, i0] = 1 - frac
        M[rows, i0 + 1] += frac
    return M.astype(dtype)


def bilinear_upsample(data, stride, H, W):
    h, w = data.shape[:2]
    My = bilinear_matrix(H, h, stride, data.dtype)
    Mx = bilinear_matrix(W, w, stride, data.dtype)
    return np.einsum("Hh,hwc,Ww->HWc", My, data, Mx, optimize=True)


def bilinear_upsample_adjoint(g, stride, h, w):
    H, W = g.shape[:2]
    My = bilinear_matrix(H, h, stride, g.dtype)
    Mx = bilinear_matrix(W, w, stride, g.dtype)
    return np.einsum("Hh,HWc,Ww->hwc", My, g, Mx, optimize=True)


def _check_upsample(fmap: FeatureImage, guide):
    H, W = guide.shape[:2]
    s = fmap.stride
    if -(-H // s) != fmap.H or -(-W // s) != fmap.W:
        raise ValueError(
            f"guide {H}x{W} does not match feature map {fmap.H}x{fmap.W} at stride {s}"
        )
    return H, W


def upsample_to_pixels(fmap: FeatureImage, guide_rgb, radius=GF_RADIUS, eps=GF_EPS, refine=True) -> FeatureImage:
    """Bilinear upsample to the guide resolution, then guided-filter refinement."""
    guide = np.asarray(guide_rgb)
    H, W = _check_upsample(fmap, guide)
    up = bilinear_upsample(fmap.data, fmap.stride, H, W) if fmap.stride > 1 else fmap.data
    if refine:
        up = guided_filter(guide, up, radius, eps)
    return FeatureImage(up.astype(fmap.data.dtype, copy=False), 1, fmap.kind)


def upsample_to_pixels_adjoint(grad_pixels, stride, fmap_hw, guide_rgb, radius=GF_RADIUS, eps=GF_EPS):
    """Adjoint of :func:`upsample_to_pixels` in the feature map, guide held fixed."""
    g = guided_filter_adjoint(guide_rgb, grad_pixels, radius, eps)
    if stride > 1:
        g = bilinear_upsample_adjoint(g, stride, *fmap_hw)
    return g


# ---------------------------------------------------------------------------
# External feature maps
# ---------------------------------------------------------------------------


def write_feature_image(path, fmap: FeatureImage):
    write_tensor(path, fmap.data)
    with open(str(path) + ".json", "w") as f:
        json.dump({"stride": fmap.stride, "kind": fmap.kind}, f, sort_keys=True)


def read_feature_image(path) -> FeatureImage:
    data = read_tensor(path)
    if data.ndim != 3:
        raise ValueError("feature image tensor must be [H, W, C]")
    with open(str(path) + ".json") as f:
        side = json.load(f)
    stride = int(side.get("stride", 1))
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return FeatureImage(data, stride, str(side.get("kind", "external")))
