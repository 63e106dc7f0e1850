"""Single-stage optimisation of the content and semantic fields."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .core_math import mlp_backward, mlp_forward
from .decoder import ContentStats, init_decoder, update_content_stats
from .encoder import encode_semantic, encode_style, read_feature_image, semantic_spec, style_spec, \
    upsample_to_pixels, write_feature_image
from .field import (
    BlockLayout,
    content_backward,
    content_forward,
    init_content_field,
    init_semantic_field,
    semantic_backward,
    semantic_forward,
)
from .optim import AdamState, adam_step
from .renderer import ray_bundle, render_image, render_weights, sample_depths, volume_render_backward
from .data_eval import psnr

log = logging.getLogger(__name__)

__all__ = ["AdamState", "adam_step", "TrainConfig", "RayBatch", "content_loss", "semantic_loss",
           "tv_regularizer", "train_scene", "TrainingDiverged"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    rays_per_batch: int = 1024
    samples: int = 48
    lr_grid: float = 0.02
    lr_mlp: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_rgb: float = 100.0
    lambda_reg: float = 0.1
    ema_decay: float = 0.99
    seed: int = 0
    content_resolution: int = 64
    semantic_resolution: int = 32
    grid_channels: int = 16
    feature_dim: int = 32
    semantic_dim: int = 16
    blocks: tuple = (1, 1, 1)
    overlap_frac: float = 0.0
    semantic_encoder: str = "random_conv"
    learn_decoder: bool = False
    holdout_every: int = 8
    eval_every: int = 500
    log_every: int = 50
    cache_dir: str = ""

    def __post_init__(self):
        if self.steps < 1 or self.lr_grid <= 0 or self.lr_mlp <= 0:
            raise ValueError("steps and learning rates must be positive")
        if self.lambda_rgb < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be >= 0")
        self.blocks = tuple(self.blocks)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class RayBatch:
    """Rays with fixed sample depths plus their per-pixel targets."""

    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray
    deltas: np.ndarray
    color: np.ndarray = None
    feat: np.ndarray = None
    sem: np.ndarray = None


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def tv_regularizer(grids):
    """Mean squared difference of axis-adjacent cells pooled over every plane.

    Returns ``(value, grads)`` with ``grads`` one array per plane, in order.
    """
    total, count = 0.0, 0
    diffs = []
    for g in grids:
        for p in g.planes:
            d0 = p[1:] - p[:-1]
            d1 = p[:, 1:] - p[:, :-1]
            total += float((d0 * d0).sum() + (d1 * d1).sum())
            count += d0.size + d1.size
            diffs.append((d0, d1))
    if count == 0:
        return 0.0, [np.zeros_like(p) for g in grids for p in g.planes]
    grads = []
    scale = 2.0 / count
    for (d0, d1), p in zip(diffs, (p for g in grids for p in g.planes)):
        gp = np.zeros_like(p)
        gp[1:] += scale * d0
        gp[:-1] -= scale * d0
        gp[:, 1:] += scale * d1
        gp[:, :-1] -= scale * d1
        grads.append(gp)
    return total / count, grads


def _sample_points(layout, batch: RayBatch):
    B, K = batch.t.shape
    X = batch.origins[:, None, :] + batch.t[..., None].astype(np.float64) * batch.dirs[:, None, :]
    Xf = X.reshape(-1, 3)
    idx = np.flatnonzero(layout.contains(Xf, tol=0.0))
    return Xf, idx


def _content_pass(content, decoder, batch: RayBatch):
    B, K = batch.t.shape
    dtype = content.trunk.weights[0].dtype
    Xf, idx = _sample_points(content.layout, batch)
    C = content.feature_dim
    vals = np.zeros((B * K, C + 3), dtype=dtype)
    sig = np.zeros(B * K, dtype=dtype)
    cache = dcache = None
    if idx.size:
        D = np.repeat(batch.dirs, K, axis=0)[idx]
        s_in, f_in, cache = content_forward(content, Xf[idx], D)
        rgb_in, dcache = mlp_forward(decoder.mlp, f_in)
        sig[idx] = s_in
        vals[idx, :C] = f_in
        vals[idx, C:] = rgb_in
    sig = sig.reshape(B, K)
    vals = vals.reshape(B, K, C + 3)
    deltas = batch.deltas.astype(dtype)
    w, _ = render_weights(sig, deltas)
    out = np.einsum("bk,bkc->bc", w, vals)
    return {"Xf": Xf, "idx": idx, "sig": sig, "vals": vals, "w": w, "out": out,
            "cache": cache, "dcache": dcache, "deltas": deltas}


def _content_grads(content, decoder, fw, g_out, need_decoder=False):
    B, K = fw["sig"].shape
    C = content.feature_dim
    gv, gs = volume_render_backward(fw["vals"], fw["sig"], fw["deltas"], g_out)
    idx = fw["idx"]
    zero = {k: [np.zeros_like(a) for a in v] for k, v in content.param_groups().items()}
    dec_grads = [np.zeros_like(a) for a in decoder.mlp.arrays()] if need_decoder else None
    if idx.size == 0:
        return zero, dec_grads
    gv = gv.reshape(B * K, C + 3)[idx]
    g_f = gv[:, :C].copy()
    g_rgb = gv[:, C:]
    dg, g_f_dec = mlp_backward(decoder.mlp, fw["dcache"], np.ascontiguousarray(g_rgb), need_params=need_decoder)
    g_f += g_f_dec
    grads = content_backward(content, fw["cache"], gs.reshape(-1)[idx], g_f)
    return grads, dg


def content_loss(batch: RayBatch, content, decoder, lambda_rgb=1.0, lambda_reg=0.0, need_decoder=False):
    """Feature distillation + photometric + TV loss, summed over rays.

    Returns ``(loss, grads, aux)``; ``grads`` mirrors ``content.param_groups()``
    and ``aux`` carries the rendered features (and decoder gradients when
    ``need_decoder``).
    """
    if batch.color is None or batch.feat is None:
        raise ValueError("content loss needs color and feature targets")
    fw = _content_pass(content, decoder, batch)
    C = content.feature_dim
    F_hat, C_hat = fw["out"][:, :C], fw["out"][:, C:]
    dF = F_hat - batch.feat
    dC = C_hat - batch.color
    loss = float((dF * dF).sum() + lambda_rgb * (dC * dC).sum())
    g_out = np.concatenate([2 * dF, 2 * lambda_rgb * dC], axis=1).astype(F_hat.dtype)
    grads, dgrads = _content_grads(content, decoder, fw, g_out, need_decoder)
    if lambda_reg > 0:
        reg, rgrads = tv_regularizer(content.grids)
        loss += lambda_reg * reg
        for g, r in zip(grads["grid"], rgrads):
            g += lambda_reg * r
    return loss, grads, {"F_hat": F_hat, "C_hat": C_hat, "weights": fw["w"], "decoder_grads": dgrads, "fw": fw}


def semantic_loss(batch: RayBatch, semantic, content, weights=None, points=None):
    """L1 distillation of rendered semantic features.

    Densities come from ``content`` and are treated as constants, so no
    gradient reaches the content field. Returns ``(loss, grads, aux)``.
    """
    if batch.sem is None:
        raise ValueError("semantic loss needs semantic targets")
    B, K = batch.t.shape
    if weights is None or points is None:
        Xf, idx = _sample_points(content.layout, batch)
        dtype = content.trunk.weights[0].dtype
        sig = np.zeros(B * K, dtype=dtype)
        if idx.size:
            D = np.repeat(batch.dirs, K, axis=0)[idx]
            sig[idx], _, _ = content_forward(content, Xf[idx], D)
        weights, _ = render_weights(sig.reshape(B, K), batch.deltas.astype(dtype))
    else:
        Xf, idx = points
    Cd = semantic.feature_dim
    s_all = np.zeros((B * K, Cd), dtype=weights.dtype)
    cache = None
    if idx.size:
        s_in, cache = semantic_forward(semantic, Xf[idx])
        s_all[idx] = s_in
    S_hat = np.einsum("bk,bkc->bc", weights, s_all.reshape(B, K, Cd))
    diff = S_hat - batch.sem
    loss = float(np.abs(diff).sum())
    if idx.size == 0:
        return loss, {k: [np.zeros_like(a) for a in v] for k, v in semantic.param_groups().items()}, {"S_hat": S_hat}
    g_s = (weights[..., None] * np.sign(diff)[:, None, :]).reshape(B * K, Cd)[idx]
    grads = semantic_backward(semantic, cache, g_s.astype(S_hat.dtype))
    return loss, grads, {"S_hat": S_hat}


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def view_targets(image, labels, sty, sem, cache_dir="", view_id=None):
    """Pixel-resolution guided-filtered style and semantic targets for one view."""
    paths = None
    if cache_dir and view_id is not None:
        paths = (os.path.join(cache_dir, f"vgg_{view_id:04d}.fpt"), os.path.join(cache_dir, f"dino_{view_id:04d}.fpt"))
        if all(os.path.isfile(p) and os.path.isfile(p + ".json") for p in paths):
            return read_feature_image(paths[0]).flat(), read_feature_image(paths[1]).flat()
    f_v = upsample_to_pixels(encode_style(sty, image), image)
    f_d = upsample_to_pixels(encode_semantic(sem, image, labels), image)
    if paths is not None:
        os.makedirs(cache_dir, exist_ok=True)
        write_feature_image(paths[0], f_v)
        write_feature_image(paths[1], f_d)
    return f_v.flat(), f_d.flat()


def split_views(n, holdout_every):
    held = [i for i in range(n) if holdout_every > 0 and i % holdout_every == 0]
    if len(held) >= n:
        held = []
    train = [i for i in range(n) if i not in held]
    return train, held


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    content: object
    semantic: object
    stats: ContentStats
    decoder: object
    adam_content: AdamState
    adam_semantic: AdamState
    adam_decoder: AdamState = None
    step: int = 0
    report: list = field(default_factory=list)


def init_state(dataset, decoder, config: TrainConfig):
    layout = BlockLayout(dataset.aabb_min, dataset.aabb_max, config.blocks, config.overlap_frac)
    r = config.content_resolution
    content = init_content_field(layout, (r, r, r), config.grid_channels, config.feature_dim, seed=config.seed)
    rs = config.semantic_resolution
    semantic = init_semantic_field(layout, (rs, rs, rs), config.grid_channels, config.semantic_dim,
                                   seed=config.seed + 1)
    if config.learn_decoder:
        decoder = init_decoder(config.feature_dim, seed=config.seed + 2)
    adam_c = AdamState.for_params(sum(content.param_groups().values(), []))
    adam_s = AdamState.for_params(sum(semantic.param_groups().values(), []))
    adam_d = AdamState.for_params(decoder.mlp.arrays()) if config.learn_decoder else None
    stats = ContentStats.empty(config.feature_dim, config.ema_decay)
    return TrainState(content, semantic, stats, decoder, adam_c, adam_s, adam_d)


def _group_lrs(groups, config):
    return [config.lr_grid] * len(groups["grid"]) + [config.lr_mlp] * len(groups["mlp"])


def evaluate_views(state: TrainState, dataset, views, K, threads=None):
    scores = []
    for i in views:
        img = render_image(state.content, None, dataset.cameras[i], "color", state.decoder, K, threads)
        scores.append(psnr(np.clip(img, 0, 1), dataset.images[i]))
    return float(np.mean(scores)) if scores else float("nan")


def train_scene(dataset, decoder, config: TrainConfig = None, state: TrainState = None, threads=None,
                style_encoder=None, semantic_encoder=None, on_log=None):
    """Jointly fit both fields; returns the final :class:`TrainState`.

    ``decoder`` stays frozen unless ``config.learn_decoder``, in which case a
    fresh decoder is trained alongside the fields. Passing ``state`` resumes
    from a checkpoint; the step counter continues.
    """
    config = config or TrainConfig()
    if len(dataset) < 2:
        raise ValueError("training needs at least two views")
    sty = style_encoder or style_spec(channels=config.feature_dim)
    sem = semantic_encoder or semantic_spec(channels=config.semantic_dim, kind=config.semantic_encoder)
    if sem.kind == "oracle_semantic" and dataset.labels is None:
        raise ValueError("oracle semantic targets need label maps")
    train_ids, held_ids = split_views(len(dataset), config.holdout_every)
    if state is None:
        state = init_state(dataset, decoder, config)
    t_start = time.perf_counter()

    # ray pool over training views
    O, Dr, NEAR, FAR, COL, FV, FD = [], [], [], [], [], [], []
    for i in train_ids:
        cam, img = dataset.cameras[i], dataset.images[i]
        o, d = ray_bundle(cam)
        labels = None if dataset.labels is None else dataset.labels[i]
        fv, fd = view_targets(img, labels, sty, sem, config.cache_dir, i)
        O.append(o), Dr.append(d)
        NEAR.append(np.full(len(o), cam.near)), FAR.append(np.full(len(o), cam.far))
        COL.append(img.reshape(-1, 3)), FV.append(fv), FD.append(fd)
    O, Dr, NEAR, FAR = map(np.concatenate, (O, Dr, NEAR, FAR))
    COL, FV, FD = (np.concatenate(a).astype(np.float32) for a in (COL, FV, FD))
    n_rays = len(O)

    c_params = sum(state.content.param_groups().values(), [])
    s_params = sum(state.semantic.param_groups().values(), [])
    c_lrs = _group_lrs(state.content.param_groups(), config)
    s_lrs = _group_lrs(state.semantic.param_groups(), config)
    betas = (config.beta1, config.beta2)
    window = []
    first = state.step
    for step in range(first, config.steps):
        # per-step stream: a resumed run draws exactly what an uninterrupted one would
        rng = np.random.default_rng([config.seed, step])
        sel = rng.integers(0, n_rays, config.rays_per_batch)
        t, deltas = sample_depths(NEAR[sel], FAR[sel], config.samples, len(sel), True, rng, np.float32)
        batch = RayBatch(O[sel], Dr[sel], t, deltas, COL[sel], FV[sel], FD[sel])
        lc, gc, aux = content_loss(batch, state.content, state.decoder, config.lambda_rgb, config.lambda_reg,
                                   need_decoder=config.learn_decoder)
        fw = aux["fw"]
        ls, gs, _ = semantic_loss(batch, state.semantic, state.content, fw["w"], (fw["Xf"], fw["idx"]))
        reg_s, rg = tv_regularizer(state.semantic.grids)
        for g, r in zip(gs["grid"], rg):
            g += config.lambda_reg * r
        ls += config.lambda_reg * reg_s
        total = lc + ls
        flat_c = gc["grid"] + gc["mlp"]
        flat_s = gs["grid"] + gs["mlp"]
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in flat_c + flat_s):
            raise TrainingDiverged(
                f"non-finite loss or gradient at step {step} (content={lc}, semantic={ls}); "
                "lower the learning rates or check the targets"
            )
        adam_step(c_params, flat_c, state.adam_content, c_lrs, betas, config.adam_eps)
        adam_step(s_params, flat_s, state.adam_semantic, s_lrs, betas, config.adam_eps)
        if config.learn_decoder:
            adam_step(state.decoder.mlp.arrays(), aux["decoder_grads"], state.adam_decoder, config.lr_mlp,
                      betas, config.adam_eps)
        state.stats = update_content_stats(state.stats, aux["F_hat"])
        state.step = step + 1
        window.append((lc, ls))
        last = state.step == config.steps
        if state.step % config.log_every == 0 or last:
            arr = np.array(window)
            rec = {"step": state.step, "loss_content": float(arr[:, 0].mean()),
                   "loss_semantic": float(arr[:, 1].mean()),
                   "loss_total": float(arr.sum(1).mean()), "rays": config.rays_per_batch}
            window = []
            if held_ids and (state.step % config.eval_every == 0 or last):
                rec["psnr_heldout"] = evaluate_views(state, dataset, held_ids, config.samples, threads)
            # wall time is reported to the callback only; persisted records stay deterministic
            elapsed = time.perf_counter() - t_start
            state.report.append(rec)
            log.info("step %d %s (%.1fs)", state.step, rec, elapsed)
            if on_log is not None:
                on_log(rec, elapsed)
    return state
