"""Dense numerical kernels shared across the package.

Arrays are plain ``numpy.ndarray`` objects. Every kernel keeps the dtype of
its inputs, so the same code runs in float32 for training and rendering and
in float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAR_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


# ---------------------------------------------------------------------------
# MLP with hand-written reverse mode
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights are stored ``[out, in]``; hidden layers use ReLU."""

    weights: list
    biases: list
    out_act: str = "identity"

    def __post_init__(self):
        if self.out_act not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {self.out_act!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: in-dim {w.shape[1]} != previous out-dim "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.out_act)

    def astype(self, dtype):
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.out_act,
        )


def init_mlp(dims, rng, out_act="identity", dtype=np.float32):
    """Fan-in scaled uniform init with zero biases."""
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        bound = np.sqrt((3.0 if last else 6.0) / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
    return MlpParams(weights, biases, out_act)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def mlp_forward(params: MlpParams, x):
    """Return ``(y, cache)``; ``cache`` holds the layer inputs and pre-activations."""
    if x.ndim != 2:
        raise ShapeError(f"layer 0: expected a 2D input, got shape {x.shape}")
    h = x
    inputs, pre = [], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {i}: input has {h.shape[1]} columns, weight expects {w.shape[1]}")
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0)
        elif params.out_act == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    return h, {"inputs": inputs, "pre": pre, "out": h}


def mlp_backward(params: MlpParams, cache, grad_y, need_params=True):
    """Reverse-mode pass matching :func:`mlp_forward`.

    Returns ``(grads, grad_x)`` with ``grads`` ordered like ``params.arrays()``
    (``None`` when ``need_params`` is false). The ReLU subgradient at exactly 0
    is taken as 0.
    """
    if grad_y.shape != cache["out"].shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != output shape {cache['out'].shape}")
    n_layers = len(params.weights)
    g = grad_y
    if params.out_act == "sigmoid":
        y = cache["out"]
        g = g * y * (1 - y)
    grads = [None] * (2 * n_layers) if need_params else None
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (cache["pre"][i] > 0)
        if need_params:
            grads[2 * i] = g.T @ cache["inputs"][i]
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i]
    return grads, g


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def channel_stats(F, eps=VAR_EPS):
    """Column mean and ``sqrt(population variance + eps)``."""
    F = np.asarray(F)
    if F.ndim != 2:
        raise ShapeError(f"expected [n, C], got {F.shape}")
    if F.shape[0] == 0:
        raise ValueError("channel_stats needs at least one row")
    mu = F.mean(axis=0)
    var = ((F - mu) ** 2).mean(axis=0)
    return mu, np.sqrt(var + eps).astype(F.dtype, copy=False)


def softmax_rows(M, temperature=1.0):
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("softmax_rows: non-finite input")
    z = M / temperature if temperature != 1.0 else M
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------


def _sq_dists(X, C, xx=None):
    xx = (X * X).sum(1) if xx is None else xx
    d = xx[:, None] - 2.0 * (X @ C.T) + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centres
            free = np.setdiff1d(np.arange(n), idx)
            nxt = int(free[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return X[idx].copy()


def kmeans(points, k, seed=0, max_iter=100, return_inertia=False):
    """Lloyd's algorithm with k-means++ seeding.

    Computation runs in float64; centroids come back in the input dtype.
    With ``return_inertia`` a third element lists the inertia after every
    assignment step.
    """
    points = np.asarray(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if points.ndim != 2:
        raise ShapeError(f"expected [n, C], got {points.shape}")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"kmeans needs n >= k, got n={n}, k={k}")
    X = points.astype(np.float64)
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    history = []
    assign = None
    xx = (X * X).sum(1)
    rows = np.arange(n)
    for _ in range(max_iter):
        d = _sq_dists(X, C, xx)
        new_assign = d.argmin(axis=1)
        mind = d[rows, new_assign]
        history.append(float(mind.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        onehot = np.zeros((n, k))
        onehot[rows, assign] = 1.0
        sums = onehot.T @ X
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        if empty.size:
            order = np.argsort(-mind, kind="stable")
            taken = set()
            for j, p in zip(empty, (p for p in order if p not in taken)):
                C[j] = X[p]
                taken.add(p)
    # final assignment consistent with the returned centroids
    d = _sq_dists(X, C, xx)
    assign = d.argmin(axis=1)
    final = float(d[rows, assign].sum())
    if not history or final < history[-1]:
        history.append(final)
    out = (C.astype(points.dtype), assign)
    return out + (history,) if return_inertia else out


# ---------------------------------------------------------------------------
# Box and guided filtering
# ---------------------------------------------------------------------------


def _window_bounds(n, r):
    i = np.arange(n)
    return np.clip(i - r, 0, n), np.clip(i + r + 1, 0, n)


def _box_axis(x, r, axis):
    # running sum with r+1 leading zeros and r trailing copies of the total:
    # each clamped window is then one difference of two slices
    xm = np.moveaxis(x, axis, 0)
    n = xm.shape[0]
    c = np.zeros((n + 2 * r + 1,) + xm.shape[1:], dtype=np.float64)
    np.cumsum(xm, axis=0, out=c[r + 1 : r + 1 + n])
    c[r + 1 + n :] = c[r + n]
    return np.moveaxis(c[2 * r + 1 : 2 * r + 1 + n] - c[:n], 0, axis)


def box_sum(x, r):
    """Sum over edge-clamped ``(2r+1)^2`` windows via separable integral images."""
    return _box_axis(_box_axis(x, r, 0), r, 1)


def box_count(H, W, r):
    i0, i1 = _window_bounds(H, r)
    j0, j1 = _window_bounds(W, r)
    return ((i1 - i0)[:, None] * (j1 - j0)[None, :]).astype(np.float64)


def box_mean(x, r):
    cnt = box_count(x.shape[0], x.shape[1], r)
    cnt = cnt.reshape(cnt.shape + (1,) * (x.ndim - 2))
    return box_sum(x, r) / cnt


def box_mean_adjoint(g, r):
    # box_mean = diag(1/count) S with S symmetric
    cnt = box_count(g.shape[0], g.shape[1], r)
    cnt = cnt.reshape(cnt.shape + (1,) * (g.ndim - 2))
    return box_sum(g / cnt, r)


def _gray_guide(guide, inp):
    guide = np.asarray(guide)
    inp = np.asarray(inp)
    if guide.shape[:2] != inp.shape[:2]:
        raise ShapeError(f"guide {guide.shape[:2]} and input {inp.shape[:2]} differ in H, W")
    if guide.ndim == 3:
        guide = guide.mean(axis=2)
    return guide.astype(np.float64)


def _guided_coeffs(I, p, r, eps):
    mean_I = box_mean(I, r)
    var_I = box_mean(I * I, r) - mean_I**2
    mean_p = box_mean(p, r)
    mean_Ip = box_mean(I[:, :, None] * p, r)
    denom = (var_I + eps)[:, :, None]
    a = (mean_Ip - mean_I[:, :, None] * mean_p) / denom
    b = mean_p - a * mean_I[:, :, None]
    return a, b, mean_I, denom


def guided_filter(guide, inp, radius, eps):
    """Per-channel guided filter with a grayscale-reduced guide.

    ``guide`` is ``[H, W]`` or ``[H, W, Cg]``, ``inp`` is ``[H, W, Cp]``.
    Accumulation runs in float64; the result has the input dtype.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    I = _gray_guide(guide, inp)
    inp = np.asarray(inp)
    squeeze = inp.ndim == 2
    p = (inp[:, :, None] if squeeze else inp).astype(np.float64)
    a, b, _, _ = _guided_coeffs(I, p, radius, eps)
    q = box_mean(a, radius) * I[:, :, None] + box_mean(b, radius)
    q = q[:, :, 0] if squeeze else q
    return q.astype(inp.dtype, copy=False)


def guided_filter_adjoint(guide, grad_q, radius, eps):
    """Gradient of :func:`guided_filter` w.r.t. its input, guide held fixed."""
    I = _gray_guide(guide, grad_q)
    g = np.asarray(grad_q).astype(np.float64)
    mean_I = box_mean(I, radius)[:, :, None]
    var_I = box_mean(I * I, radius)[:, :, None] - mean_I**2
    denom = var_I + eps
    g_a = box_mean_adjoint(g * I[:, :, None], radius)
    g_b = box_mean_adjoint(g, radius)
    g_a = g_a - g_b * mean_I
    g_mean_Ip = g_a / denom
    g_mean_p = g_b - g_a * mean_I / denom
    g_p = box_mean_adjoint(g_mean_Ip, radius) * I[:, :, None] + box_mean_adjoint(g_mean_p, radius)
    return g_p.astype(np.asarray(grad_q).dtype, copy=False)


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


def positional_encoding(v, n_freq):
    """Encode the last axis as ``[sin(2^j pi v), cos(2^j pi v)]`` for ``j = 0..n_freq-1``.

    Blocks are ordered by frequency; within a block all ``d`` sines come
    before the ``d`` cosines, so the output length is ``2 * d * n_freq``.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    v = np.asarray(v)
    parts = []
    for j in range(n_freq):
        arg = (2.0**j) * np.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1).astype(v.dtype if v.dtype.kind == "f" else np.float64, copy=False)
