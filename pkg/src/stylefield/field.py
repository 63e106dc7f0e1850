"""Block-composed tri-plane grids and the content / semantic scene fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import MlpParams, init_mlp, mlp_backward, mlp_forward, positional_encoding, sigmoid, softplus

# (first axis, second axis) of the XY, XZ and YZ planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
DENSITY_BIAS_INIT = -5.0


class OutOfBoundsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tri-plane grid
# ---------------------------------------------------------------------------


@dataclass
class TriPlaneGrid:
    planes: list  # [XY (Rx,Ry,C), XZ (Rx,Rz,C), YZ (Ry,Rz,C)]

    def __post_init__(self):
        (rx, ry, c0), (rx2, rz, c1), (ry2, rz2, c2) = (p.shape for p in self.planes)
        if rx != rx2 or ry != ry2 or rz != rz2 or not (c0 == c1 == c2):
            raise ValueError(f"inconsistent plane shapes {[p.shape for p in self.planes]}")

    @property
    def resolution(self):
        return (self.planes[0].shape[0], self.planes[0].shape[1], self.planes[1].shape[1])

    @property
    def channels(self):
        return self.planes[0].shape[2]


def init_triplane(resolution, channels, rng, dtype=np.float32, low=0.9, high=1.1):
    rx, ry, rz = resolution
    shapes = [(rx, ry, channels), (rx, rz, channels), (ry, rz, channels)]
    return TriPlaneGrid([rng.uniform(low, high, size=s).astype(dtype) for s in shapes])


def _axis_interp(u, n):
    if n == 1:
        z = np.zeros(u.shape, dtype=np.int64)
        return z, z, np.zeros_like(u)
    s = u * (n - 1)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
    return i0, i0 + 1, s - i0


def _check_unit(x_unit, tol=1e-6):
    if np.any(x_unit < -tol) or np.any(x_unit > 1 + tol):
        raise OutOfBoundsError("tri-plane coordinates must lie in [0, 1]^3")
    return np.clip(x_unit, 0.0, 1.0)


def triplane_forward(grid: TriPlaneGrid, x_unit):
    """Batched sample of ``[N, 3]`` unit coordinates; returns ``(features [N, C], cache)``."""
    x_unit = _check_unit(np.asarray(x_unit))
    per_plane = []
    feats = []
    for plane, (a, b) in zip(grid.planes, PLANE_AXES):
        ra, rb, _ = plane.shape
        i0, i1, fa = _axis_interp(x_unit[:, a], ra)
        j0, j1, fb = _axis_interp(x_unit[:, b], rb)
        idx = np.stack([i0 * rb + j0, i0 * rb + j1, i1 * rb + j0, i1 * rb + j1], axis=1)
        w = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1).astype(plane.dtype)
        flat = plane.reshape(ra * rb, -1)
        f = np.einsum("nk,nkc->nc", w, flat[idx])
        per_plane.append((idx, w))
        feats.append(f)
    out = feats[0] * feats[1] * feats[2]
    return out, {"per_plane": per_plane, "feats": feats}


def triplane_sample(grid: TriPlaneGrid, x_unit):
    """Product of bilinear samples on the three planes; accepts one point or ``[N, 3]``."""
    x = np.asarray(x_unit, dtype=grid.planes[0].dtype)
    single = x.ndim == 1
    out, _ = triplane_forward(grid, x[None] if single else x)
    return out[0] if single else out


def triplane_backward(grid: TriPlaneGrid, cache, grad_out):
    """Dense per-plane gradients for a batched forward."""
    feats = cache["feats"]
    grads = []
    for p, (plane, (idx, w)) in enumerate(zip(grid.planes, cache["per_plane"])):
        others = feats[(p + 1) % 3] * feats[(p + 2) % 3]
        g = grad_out * others
        ra, rb, C = plane.shape
        flat_idx = (idx[:, :, None] * C + np.arange(C)).ravel()
        vals = (w[:, :, None] * g[:, None, :]).ravel()
        acc = np.bincount(flat_idx, weights=vals, minlength=ra * rb * C)
        grads.append(acc.reshape(ra, rb, C).astype(plane.dtype))
    return grads


def triplane_sample_backward(grid: TriPlaneGrid, x_unit, grad_out):
    x = np.asarray(x_unit, dtype=grid.planes[0].dtype)
    g = np.asarray(grad_out, dtype=grid.planes[0].dtype)
    if x.ndim == 1:
        x, g = x[None], g[None]
    _, cache = triplane_forward(grid, x)
    return triplane_backward(grid, cache, g)


# ---------------------------------------------------------------------------
# Block layout
# ---------------------------------------------------------------------------


@dataclass
class BlockLayout:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    blocks: tuple = (1, 1, 1)
    overlap_frac: float = 0.0

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        self.blocks = tuple(int(b) for b in self.blocks)
        if np.any(self.aabb_max <= self.aabb_min):
            raise ValueError("degenerate AABB")
        if any(b < 1 for b in self.blocks):
            raise ValueError("block counts must be >= 1")
        if not 0.0 <= self.overlap_frac < 0.5:
            raise ValueError("overlap_frac must be in [0, 0.5)")

    @property
    def n_blocks(self):
        return int(np.prod(self.blocks))

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))

    def block_size(self):
        return (self.aabb_max - self.aabb_min) / np.array(self.blocks)

    def unravel(self, b):
        return np.unravel_index(b, self.blocks)

    def block_extent(self, b):
        ijk = np.array(self.unravel(b))
        s = self.block_size()
        m = self.overlap_frac * s
        lo = np.maximum(self.aabb_min, self.aabb_min + ijk * s - m)
        hi = np.minimum(self.aabb_max, self.aabb_min + (ijk + 1) * s + m)
        return lo, hi

    def contains(self, X, tol=1e-6):
        X = np.asarray(X)
        return np.all((X >= self.aabb_min - tol) & (X <= self.aabb_max + tol), axis=-1)

    def _axis_weights(self, x, axis):
        B = self.blocks[axis]
        W = np.zeros((x.shape[0], B))
        if B == 1:
            W[:, 0] = 1.0
            return W
        s = (self.aabb_max[axis] - self.aabb_min[axis]) / B
        m = self.overlap_frac * s
        rel = x - self.aabb_min[axis]
        k = np.clip(np.floor(rel / s).astype(np.int64), 0, B - 1)
        rows = np.arange(x.shape[0])
        W[rows, k] = 1.0
        if m > 0:
            lower = k * s  # boundary between block k-1 and k
            upper = (k + 1) * s
            in_lo = (k > 0) & (rel < lower + m)
            t = (rel - (lower - m)) / (2 * m)
            W[rows[in_lo], k[in_lo]] = t[in_lo]
            W[rows[in_lo], k[in_lo] - 1] = 1 - t[in_lo]
            in_hi = (k < B - 1) & (rel > upper - m)
            t = (rel - (upper - m)) / (2 * m)
            W[rows[in_hi], k[in_hi] + 1] = t[in_hi]
            W[rows[in_hi], k[in_hi]] = 1 - t[in_hi]
        return W

    def weights(self, X):
        """Dense ``[N, n_blocks]`` blend weights (rows sum to one)."""
        X = np.asarray(X, dtype=np.float64)
        if not np.all(self.contains(X)):
            raise OutOfBoundsError("point outside the scene AABB")
        wx, wy, wz = (self._axis_weights(X[:, a], a) for a in range(3))
        return np.einsum("ni,nj,nk->nijk", wx, wy, wz).reshape(X.shape[0], -1)

    def to_unit(self, b, X):
        lo, hi = self.block_extent(b)
        return (np.asarray(X, dtype=np.float64) - lo) / (hi - lo)


def block_lookup(layout: BlockLayout, x_world):
    """Covering blocks of one point as ``[(block_index, weight), ...]``."""
    w = layout.weights(np.asarray(x_world, dtype=np.float64)[None])[0]
    return [(int(b), float(w[b])) for b in np.flatnonzero(w > 0)]


def blend_forward(layout: BlockLayout, grids, X):
    """Weighted sum of per-block tri-plane features for ``[N, 3]`` world points."""
    dtype = grids[0].planes[0].dtype
    W = layout.weights(X)
    out = np.zeros((X.shape[0], grids[0].channels), dtype=dtype)
    parts = []
    for b in range(layout.n_blocks):
        sel = np.flatnonzero(W[:, b] > 0)
        if sel.size == 0:
            continue
        u = np.clip(layout.to_unit(b, X[sel]), 0.0, 1.0).astype(dtype)
        f, cache = triplane_forward(grids[b], u)
        wb = W[sel, b].astype(dtype)[:, None]
        out[sel] += wb * f
        parts.append((b, sel, wb, cache))
    return out, parts


def blend_backward(grids, parts, grad_out):
    grads = [[np.zeros_like(p) for p in g.planes] for g in grids]
    for b, sel, wb, cache in parts:
        gp = triplane_backward(grids[b], cache, grad_out[sel] * wb)
        for acc, g in zip(grads[b], gp):
            acc += g
    return grads


# ---------------------------------------------------------------------------
# Scene fields
# ---------------------------------------------------------------------------


@dataclass
class SceneContentField:
    """Density and view-conditioned content feature.

    ``trunk`` maps the blended grid feature to ``[raw_density, hidden...]``;
    ``head`` maps ``[hidden, PE(direction)]`` to the content feature.
    """

    layout: BlockLayout
    grids: list
    trunk: MlpParams
    head: MlpParams
    n_freq: int = 2

    @property
    def feature_dim(self):
        return self.head.dims[-1]

    def param_groups(self):
        return {
            "grid": [p for g in self.grids for p in g.planes],
            "mlp": self.trunk.arrays() + self.head.arrays(),
        }


@dataclass
class SceneSemanticField:
    layout: BlockLayout
    grids: list
    head: MlpParams

    @property
    def feature_dim(self):
        return self.head.dims[-1]

    def param_groups(self):
        return {"grid": [p for g in self.grids for p in g.planes], "mlp": self.head.arrays()}


def init_content_field(layout, resolution=(64, 64, 64), grid_channels=16, feature_dim=32,
                       hidden=32, trunk_out=32, n_freq=2, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    grids = [init_triplane(resolution, grid_channels, rng, dtype) for _ in range(layout.n_blocks)]
    trunk = init_mlp([grid_channels, hidden, hidden, 1 + trunk_out], rng, dtype=dtype)
    trunk.biases[-1][0] = DENSITY_BIAS_INIT
    head = init_mlp([trunk_out + 6 * n_freq, hidden, feature_dim], rng, dtype=dtype)
    return SceneContentField(layout, grids, trunk, head, n_freq)


def init_semantic_field(layout, resolution=(32, 32, 32), grid_channels=16, feature_dim=16,
                        hidden=32, seed=1, dtype=np.float32):
    rng = np.random.default_rng(seed)
    grids = [init_triplane(resolution, grid_channels, rng, dtype) for _ in range(layout.n_blocks)]
    head = init_mlp([grid_channels, hidden, hidden, feature_dim], rng, dtype=dtype)
    return SceneSemanticField(layout, grids, head)


def content_forward(fld: SceneContentField, X, D):
    """Batched query: ``X``, ``D`` are ``[N, 3]``; returns ``(sigma [N], feature [N, C_V], cache)``."""
    dtype = fld.trunk.weights[0].dtype
    g, parts = blend_forward(fld.layout, fld.grids, X)
    t, tcache = mlp_forward(fld.trunk, g)
    raw = t[:, 0]
    sigma = softplus(raw)
    pe = positional_encoding(np.asarray(D, dtype=dtype), fld.n_freq)
    h_in = np.concatenate([t[:, 1:], pe], axis=1)
    f, hcache = mlp_forward(fld.head, h_in)
    cache = {"parts": parts, "tcache": tcache, "hcache": hcache, "raw": raw}
    return sigma, f, cache


def content_backward(fld: SceneContentField, cache, grad_sigma=None, grad_f=None):
    """Gradients ordered like ``fld.param_groups()``."""
    tcache = cache["tcache"]
    gt = np.zeros_like(tcache["out"])
    mlp_head_grads = [np.zeros_like(a) for a in fld.head.arrays()]
    if grad_f is not None:
        mlp_head_grads, gh = mlp_backward(fld.head, cache["hcache"], grad_f)
        gt[:, 1:] = gh[:, : gt.shape[1] - 1]
    if grad_sigma is not None:
        gt[:, 0] = grad_sigma * sigmoid(cache["raw"])
    trunk_grads, gg = mlp_backward(fld.trunk, tcache, gt)
    grid_grads = blend_backward(fld.grids, cache["parts"], gg)
    return {"grid": [p for g in grid_grads for p in g], "mlp": trunk_grads + mlp_head_grads}


def semantic_forward(fld: SceneSemanticField, X):
    g, parts = blend_forward(fld.layout, fld.grids, X)
    s, hcache = mlp_forward(fld.head, g)
    return s, {"parts": parts, "hcache": hcache}


def semantic_backward(fld: SceneSemanticField, cache, grad_s):
    head_grads, gg = mlp_backward(fld.head, cache["hcache"], grad_s)
    grid_grads = blend_backward(fld.grids, cache["parts"], gg)
    return {"grid": [p for g in grid_grads for p in g], "mlp": head_grads}


def _as_point(x):
    return np.asarray(x, dtype=np.float64).reshape(1, 3)


def content_query(fld: SceneContentField, x_world, d):
    """Single-point query returning ``(sigma, feature)``."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise ValueError("view direction must be unit length")
    X = _as_point(x_world)
    sigma, f, _ = content_forward(fld, X, d.reshape(1, 3))
    return float(sigma[0]), f[0]


def semantic_query(fld: SceneSemanticField, x_world):
    s, _ = semantic_forward(fld, _as_point(x_world))
    return s[0]
