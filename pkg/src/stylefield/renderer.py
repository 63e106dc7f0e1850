"""Pinhole cameras, ray sampling and volume rendering.

Camera convention: x right, y down, z forward in camera space; ``c2w`` maps
camera to world. Pixel ``(u, v)`` is column ``u``, row ``v``; its ray passes
through ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core_math import mlp_forward
from .field import content_forward, semantic_forward

MODES = ("color", "content_feature", "semantic_feature", "depth")
DEPTH_VALID_MIN_WEIGHT = 0.01
DEFAULT_CHUNK = 4096


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    H: int
    W: int
    c2w: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("c2w must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        R = self.c2w[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def origin(self):
        return self.c2w[:3, 3]

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "H": self.H, "W": self.W, "near": self.near, "far": self.far,
            "c2w": self.c2w.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["H"]), int(d["W"]), np.array(d["c2w"], dtype=np.float64),
                   float(d["near"]), float(d["far"]))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple


@dataclass
class RaySamples:
    points: np.ndarray
    t: np.ndarray
    deltas: np.ndarray


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix looking from ``eye`` to ``target`` with world ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    down = np.cross(f, r)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = r, down, f, eye
    return m


def pixel_grid(cam: CameraModel):
    v, u = np.mgrid[0 : cam.H, 0 : cam.W]
    return np.stack([u.ravel(), v.ravel()], axis=1)


def ray_bundle(cam: CameraModel, pixels=None):
    """Arrays ``(origins [N, 3], directions [N, 3])``; default is every pixel in row-major order."""
    px = pixel_grid(cam) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    u, v = px[:, 0], px[:, 1]
    if np.any(u < 0) or np.any(u >= cam.W) or np.any(v < 0) or np.any(v >= cam.H):
        raise ValueError("pixel outside image bounds")
    d_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, np.ones(len(u))], axis=1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.origin, d.shape).copy()
    return o, d


def generate_rays(cam: CameraModel, pixels):
    o, d = ray_bundle(cam, pixels)
    px = np.asarray(pixels).reshape(-1, 2)
    return [Ray(o[i], d[i], (float(px[i, 0]), float(px[i, 1]))) for i in range(len(px))]


def sample_depths(near, far, K, n_rays=1, stratified=False, rng=None, dtype=np.float64):
    """Depths ``t`` and spacings ``delta`` of shape ``[n_rays, K]``.

    ``near``/``far`` may be scalars or per-ray arrays. Bins are uniform; the
    last sample's delta is one bin width so it represents its own bin.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    width = (far - near) / K
    lower = near + width * np.arange(K)[None, :]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((n_rays, K))
    else:
        jitter = np.full((n_rays, K), 0.5)
    t = lower + width * jitter
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = width[:, 0]
    return t.astype(dtype), deltas.astype(dtype)


def sample_along_ray(ray: Ray, K, stratified=False, seed=0, near=0.0, far=1.0):
    rng = np.random.default_rng(seed) if stratified else None
    t, deltas = sample_depths(near, far, K, 1, stratified, rng)
    pts = ray.origin[None, :] + t[0][:, None] * ray.direction[None, :]
    return RaySamples(pts, t[0], deltas[0])


def _validate(sigmas, deltas):
    if np.any(sigmas < 0):
        raise ValueError("negative density")
    if np.any(deltas <= 0):
        raise ValueError("non-positive sample spacing")


def render_weights(sigmas, deltas):
    """Per-sample weights and end transmittance along the last axis."""
    tau = sigmas * deltas
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    return trans * alpha, np.exp(-cum[..., -1])


def volume_render(values, sigmas, deltas):
    """Accumulate ``values [..., K, C]`` with weights from ``sigmas``/``deltas [..., K]``.

    Returns ``(out [..., C], weights [..., K], transmittance_end [...])``.
    """
    values, sigmas, deltas = np.asarray(values), np.asarray(sigmas), np.asarray(deltas)
    _validate(sigmas, deltas)
    w, t_end = render_weights(sigmas, deltas)
    out = np.einsum("...k,...kc->...c", w, values)
    return out, w, t_end


def volume_render_backward(values, sigmas, deltas, grad_out):
    """Gradients of :func:`volume_render`'s ``out`` w.r.t. values and densities."""
    values, sigmas, deltas = np.asarray(values), np.asarray(sigmas), np.asarray(deltas)
    _validate(sigmas, deltas)
    tau = sigmas * deltas
    cum = np.cumsum(tau, axis=-1)
    w = np.exp(-(cum - tau)) * -np.expm1(-tau)
    t_next = np.exp(-cum)
    gv = np.einsum("...c,...kc->...k", grad_out, values)
    grad_values = w[..., None] * grad_out[..., None, :]
    wgv = w * gv
    # sum_{i>k} w_i (g . v_i)
    after = np.flip(np.cumsum(np.flip(wgv, -1), -1), -1) - wgv
    grad_tau = t_next * gv - after
    return grad_values, grad_tau * deltas


def render_depth(weights, t):
    """Expected depth and validity (accumulated weight >= 0.01)."""
    weights, t = np.asarray(weights), np.asarray(t)
    acc = weights.sum(-1)
    depth = (weights * t).sum(-1) / np.maximum(acc, 1e-10)
    valid = acc >= DEPTH_VALID_MIN_WEIGHT
    if depth.ndim == 0:
        return float(depth), bool(valid)
    return depth, valid


# ---------------------------------------------------------------------------
# Field rendering
# ---------------------------------------------------------------------------


def decode_samples(decoder, f):
    y, _ = mlp_forward(decoder.mlp, f)
    return y


def render_rays(content, origins, dirs, near, far, K, outputs=("color",), semantic=None,
                color_fn=None, skip_weight=0.0):
    """Render a batch of rays with deterministic midpoint samples.

    ``color_fn(features, semantic_features_or_None)`` turns per-sample content
    features into colors; it only sees samples inside the AABB whose weight
    exceeds ``skip_weight``. Semantic features always use the content
    field's density.
    """
    dtype = content.trunk.weights[0].dtype
    n = origins.shape[0]
    t, deltas = sample_depths(near, far, K, n, dtype=dtype)
    X = origins[:, None, :] + t[..., None].astype(np.float64) * dirs[:, None, :]
    Xf = X.reshape(-1, 3)
    inside = content.layout.contains(Xf, tol=0.0)
    idx = np.flatnonzero(inside)
    Dd = np.repeat(dirs, K, axis=0)
    sig = np.zeros(n * K, dtype=dtype)
    feat = np.zeros((n * K, content.feature_dim), dtype=dtype)
    if idx.size:
        s_in, f_in, _ = content_forward(content, Xf[idx], Dd[idx])
        sig[idx], feat[idx] = s_in, f_in
    sig = sig.reshape(n, K)
    w, _ = render_weights(sig, deltas)
    res = {}
    if "semantic_feature" in outputs:
        if semantic is None:
            raise ValueError("semantic_feature output requires a semantic field")
        sem = np.zeros((n * K, semantic.feature_dim), dtype=dtype)
        if idx.size:
            sem[idx], _ = semantic_forward(semantic, Xf[idx])
        res["semantic_feature"] = np.einsum("nk,nkc->nc", w, sem.reshape(n, K, -1))
    if "content_feature" in outputs:
        res["content_feature"] = np.einsum("nk,nkc->nc", w, feat.reshape(n, K, -1))
    if "depth" in outputs:
        res["depth"], res["depth_valid"] = render_depth(w, t)
    if "color" in outputs:
        if color_fn is None:
            raise ValueError("color output requires a decoder")
        live = idx[w.reshape(-1)[idx] > skip_weight]
        rgb = np.zeros((n * K, 3), dtype=dtype)
        if live.size:
            s_live = semantic_forward(semantic, Xf[live])[0] if semantic is not None else None
            rgb[live] = color_fn(feat[live], s_live)
        res["color"] = np.einsum("nk,nkc->nc", w, rgb.reshape(n, K, 3))
    res["weights"] = w
    res["t"] = t
    return res


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("FPRF_THREADS", "1") or 1)
    return max(1, int(threads))


def render_camera(content, cam: CameraModel, K, outputs, semantic=None, color_fn=None,
                  skip_weight=0.0, threads=None, chunk=DEFAULT_CHUNK):
    """Render every pixel of ``cam``; chunks are fixed-size so output is thread-count independent."""
    o, d = ray_bundle(cam)
    starts = list(range(0, o.shape[0], chunk))

    def job(s):
        return render_rays(content, o[s : s + chunk], d[s : s + chunk], cam.near, cam.far, K,
                           outputs, semantic, color_fn, skip_weight)

    n_threads = resolve_threads(threads)
    if n_threads == 1:
        results = [job(s) for s in starts]
    else:
        with ThreadPoolExecutor(n_threads) as ex:
            results = list(ex.map(job, starts))
    merged = {}
    for key in results[0]:
        merged[key] = np.concatenate([r[key] for r in results], axis=0)
    out = {}
    for key, val in merged.items():
        out[key] = val.reshape((cam.H, cam.W) + val.shape[1:])
    return out


def render_image(content, semantic, cam: CameraModel, mode, decoder=None, K=64, threads=None):
    """Render one image in ``mode``; depth mode returns ``(depth, valid)``."""
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "color":
        if decoder is None:
            raise ValueError("color mode requires a decoder")
        r = render_camera(content, cam, K, ("color",), color_fn=lambda f, s: decode_samples(decoder, f),
                          threads=threads)
        return r["color"]
    if mode == "semantic_feature" and semantic is None:
        raise ValueError("semantic_feature mode requires a semantic field")
    r = render_camera(content, cam, K, (mode,), semantic=semantic, threads=threads)
    if mode == "depth":
        return r["depth"], r["depth_valid"]
    return r[mode]
