"""Semantic style attention, local AdaIN and stylized rendering."""

from __future__ import annotations

import numpy as np

from .core_math import channel_stats, mlp_forward, softmax_rows
from .decoder import ContentStats, _affine_restyle
from .encoder import EncoderSpec, encode_style
from .renderer import render_camera

# samples below this weight are left black; K * SKIP_WEIGHT stays under 1e-6
SKIP_WEIGHT = 1e-9


def style_attention(F_dino, keys, temperature=1.0):
    """Row-softmax of the point/key cross-correlation ``F_dino @ keys.T``."""
    F_dino, keys = np.asarray(F_dino), np.asarray(keys)
    if F_dino.ndim != 2 or keys.ndim != 2 or F_dino.shape[1] != keys.shape[1]:
        raise ValueError(f"feature dims differ: {F_dino.shape} vs {keys.shape}")
    return softmax_rows(F_dino @ keys.T, temperature)


def weighted_style_codes(R_S, style_dict):
    R_S = np.asarray(R_S)
    if R_S.ndim != 2 or R_S.shape[1] != len(style_dict):
        raise ValueError(f"attention has {R_S.shape[-1]} columns, dictionary has {len(style_dict)} entries")
    return R_S @ style_dict.means, R_S @ style_dict.stds


def local_adain(f_vgg, stats: ContentStats, M_w, Sigma_w):
    """AdaIN with a target mean/std row per point."""
    if not stats.initialized:
        raise ValueError("content statistics are not initialized")
    return _affine_restyle(np.asarray(f_vgg), stats.mu_c, stats.sigma_c, M_w, Sigma_w)


class LocalStylizer:
    """Per-sample color function for :func:`render_camera`.

    Dictionary matrices are stacked once at construction.
    """

    def __init__(self, style_dict, stats: ContentStats, decoder, temperature=1.0):
        self.keys = style_dict.keys
        self.means = style_dict.means
        self.stds = style_dict.stds
        self.stats = stats
        self.decoder = decoder
        self.temperature = temperature
        if not stats.initialized:
            raise ValueError("content statistics are not initialized")

    def codes(self, sem):
        R_S = style_attention(sem, self.keys, self.temperature)
        return R_S, R_S @ self.means, R_S @ self.stds

    def __call__(self, f, sem):
        if sem is None:
            raise ValueError("local stylization needs semantic features")
        _, M_w, S_w = self.codes(sem)
        g = local_adain(f, self.stats, M_w, S_w)
        return mlp_forward(self.decoder.mlp, g)[0]


def render_stylized(content, semantic, style_dict, stats, decoder, cam, K=64, threads=None,
                    temperature=1.0):
    if semantic is None:
        raise ValueError("multi-reference stylization needs a semantic field")
    fn = LocalStylizer(style_dict, stats, decoder, temperature)
    r = render_camera(content, cam, K, ("color",), semantic=semantic, color_fn=fn,
                      skip_weight=SKIP_WEIGHT, threads=threads)
    return r["color"]


def global_style_stats(style_image, encoder_spec: EncoderSpec):
    return channel_stats(encode_style(encoder_spec, np.asarray(style_image, dtype=np.float32)).flat())


def render_stylized_global(content, stats, decoder, cam, style_image, encoder_spec, K=64, threads=None):
    """Single-reference AdaIN path with the reference's global feature statistics."""
    if not stats.initialized:
        raise ValueError("content statistics are not initialized")
    mu_s, sigma_s = global_style_stats(style_image, encoder_spec)

    def fn(f, _sem):
        g = _affine_restyle(f, stats.mu_c, stats.sigma_c, mu_s, sigma_s)
        return mlp_forward(decoder.mlp, g)[0]

    r = render_camera(content, cam, K, ("color",), color_fn=fn, skip_weight=SKIP_WEIGHT, threads=threads)
    return r["color"]
