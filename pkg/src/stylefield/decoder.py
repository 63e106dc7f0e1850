"""AdaIN, the scene-agnostic color decoder and running content statistics."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .core_math import MlpParams, channel_stats, init_mlp, mlp_backward, mlp_forward
from .encoder import (
    EncoderSpec,
    encode_style,
    random_conv_backward,
    random_conv_forward,
    conv_weights,
    upsample_to_pixels,
    upsample_to_pixels_adjoint,
    FeatureImage,
)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

DECODER_HIDDEN = (64, 64)


@dataclass
class ColorDecoder:
    mlp: MlpParams
    frozen: bool = False

    def freeze(self):
        for a in self.mlp.arrays():
            a.flags.writeable = False
        self.frozen = True
        return self

    def param_hash(self):
        h = hashlib.sha256()
        for a in self.mlp.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init_decoder(feature_dim=32, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return ColorDecoder(init_mlp([feature_dim, *DECODER_HIDDEN, 3], rng, out_act="sigmoid", dtype=dtype))


def decode_color(dec: ColorDecoder, f):
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[1] != dec.mlp.dims[0]:
        raise ValueError(f"decoder expects [n, {dec.mlp.dims[0]}], got {f.shape}")
    y, _ = mlp_forward(dec.mlp, f)
    return y


# ---------------------------------------------------------------------------
# AdaIN
# ---------------------------------------------------------------------------


def _affine_restyle(F, mu_c, sigma_c, mu_s, sigma_s):
    sigma_c = np.asarray(sigma_c)
    if np.any(sigma_c <= 0):
        raise ValueError("content sigma must be positive")
    out = sigma_s * (F - mu_c) / sigma_c + mu_s
    # matched statistics are an exact identity
    same = (np.asarray(mu_s) == mu_c) & (np.asarray(sigma_s) == sigma_c)
    if np.any(same):
        out = np.where(same, F, out)
    return out.astype(np.asarray(F).dtype, copy=False)


def adain(F, mu_c, sigma_c, mu_s, sigma_s):
    """Per-channel ``sigma_s * (F - mu_c) / sigma_c + mu_s`` on ``[n, C]`` features."""
    return _affine_restyle(np.asarray(F), mu_c, sigma_c, mu_s, sigma_s)


@dataclass
class ContentStats:
    mu_c: np.ndarray
    sigma_c: np.ndarray
    decay: float = 0.99
    initialized: bool = False

    @classmethod
    def empty(cls, dim, decay=0.99):
        return cls(np.zeros(dim, np.float32), np.ones(dim, np.float32), decay, False)


def update_content_stats(stats: ContentStats, F_batch) -> ContentStats:
    mu_b, sigma_b = channel_stats(np.asarray(F_batch))
    if not stats.initialized:
        return ContentStats(mu_b.copy(), sigma_b.copy(), stats.decay, True)
    d = stats.decay
    mu = d * stats.mu_c + (1 - d) * mu_b
    sigma = d * stats.sigma_c + (1 - d) * sigma_b
    return ContentStats(mu.astype(stats.mu_c.dtype), sigma.astype(stats.sigma_c.dtype), d, True)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pixel_features(spec: EncoderSpec, image, weights=None):
    """Style-encoder features upsampled to ``[H*W, C]`` with the image as guide."""
    f, _ = random_conv_forward(spec, image, weights)
    up = upsample_to_pixels(FeatureImage(f, spec.stride), image)
    return up.flat()


def style_statistics(spec: EncoderSpec, image):
    return channel_stats(encode_style(spec, image).flat())


def pretrain_decoder(content_corpus, style_corpus, encoder_spec: EncoderSpec, lambda_s=1.0,
                     steps=1000, seed=0, lr=2e-3, log_every=0):
    """Fit the color decoder against the frozen style encoder.

    Each step draws a content/style pair, re-styles the content's pixel
    features with AdaIN, decodes them to an image and penalises (a) the
    distance between the re-encoded image features and the AdaIN target and
    (b) the mismatch of the re-encoded channel statistics with the style's.
    The upsampling guide of the re-encoded image is treated as constant.

    Returns ``(frozen_decoder, loss_history)``.
    """
    if len(content_corpus) == 0 or len(style_corpus) == 0:
        raise ValueError("content and style corpora must be non-empty")
    if lambda_s < 0:
        raise ValueError("lambda_s must be >= 0")
    rng = np.random.default_rng(seed)
    ws = conv_weights(encoder_spec)
    dec = init_decoder(encoder_spec.channels, seed=int(rng.integers(2**31)))
    params = dec.mlp.arrays()
    state = AdamState.for_params(params)
    style_cache = {}
    history = []
    for step in range(steps):
        ci = int(rng.integers(len(content_corpus)))
        si = int(rng.integers(len(style_corpus)))
        c = np.asarray(content_corpus[ci], dtype=np.float32)
        H, W = c.shape[:2]
        Fc = pixel_features(encoder_spec, c, ws)
        mu_c, sig_c = channel_stats(Fc)
        if si not in style_cache:
            f_s, _ = random_conv_forward(encoder_spec, np.asarray(style_corpus[si], dtype=np.float32), ws)
            style_cache[si] = channel_stats(f_s.reshape(-1, f_s.shape[2]))
        mu_s, sig_s = style_cache[si]
        t = adain(Fc, mu_c, sig_c, mu_s, sig_s)

        rgb, dcache = mlp_forward(dec.mlp, t)
        img = rgb.reshape(H, W, 3)
        fg, ecache = random_conv_forward(encoder_spec, img, ws)
        fmap_hw = fg.shape[:2]
        up = upsample_to_pixels(FeatureImage(fg, encoder_spec.stride), img).flat()
        diff = up - t
        loss_c = float(np.mean(diff * diff))
        fg_flat = fg.reshape(-1, fg.shape[2])
        n, C = fg_flat.shape
        mu_g, sig_g = channel_stats(fg_flat)
        loss_s = float(np.mean((mu_g - mu_s) ** 2) + np.mean((sig_g - sig_s) ** 2))
        history.append(loss_c + lambda_s * loss_s)

        g_up = (2.0 / diff.size) * diff
        g_fg = upsample_to_pixels_adjoint(g_up.reshape(H, W, -1), encoder_spec.stride, fmap_hw, img)
        g_mu = lambda_s * 2.0 * (mu_g - mu_s) / C
        g_sig = lambda_s * 2.0 * (sig_g - sig_s) / C
        g_flat = g_mu / n + g_sig * (fg_flat - mu_g) / (n * sig_g)
        g_fg = g_fg + g_flat.reshape(fg.shape)
        g_img = random_conv_backward(encoder_spec, ecache, g_fg.astype(np.float32))
        grads, _ = mlp_backward(dec.mlp, dcache, g_img.reshape(-1, 3).astype(np.float32))
        adam_step(params, grads, state, lr)
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.5f", step + 1, history[-1])
    return dec.freeze(), history


# ---------------------------------------------------------------------------
# Procedural corpora
# ---------------------------------------------------------------------------


def _value_noise(rng, size, octaves=4):
    out = np.zeros((size, size, 3))
    amp = 1.0
    for o in range(octaves):
        cells = 2 ** (o + 1) + 1
        grid = rng.random((cells, cells, 3))
        xs = np.linspace(0, cells - 1, size)
        i0 = np.minimum(np.floor(xs).astype(int), cells - 2)
        f = xs - i0
        f = f * f * (3 - 2 * f)
        rows = grid[i0] * (1 - f)[:, None, None] + grid[i0 + 1] * f[:, None, None]
        layer = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
        out += amp * layer
        amp *= 0.5
    out -= out.min()
    out /= max(out.max(), 1e-8)
    return out


def _procedural_image(rng, size, kind):
    c1, c2 = rng.random(3), rng.random(3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "noise":
        img = _value_noise(rng, size)
        lo, hi = np.minimum(c1, c2), np.maximum(c1, c2) + 0.2
        img = lo + img * (hi - lo)
    elif kind == "stripes":
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 8)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy))
        img = c1 * s[..., None] + c2 * (1 - s[..., None])
    elif kind == "checkers":
        n = int(rng.integers(2, 9))
        m = ((np.floor(xx * n) + np.floor(yy * n)) % 2)[..., None]
        img = c1 * m + c2 * (1 - m)
    else:
        ang = rng.uniform(0, 2 * np.pi)
        s = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)[..., None]
        img = c1 * s + c2 * (1 - s)
    shade = rng.uniform(0.3, 1.0)
    return np.clip(img * shade, 0, 1).astype(np.float32)


def procedural_corpus(n, size=64, seed=0):
    """Seeded color fields, stripes, checkers and gradients."""
    rng = np.random.default_rng(seed)
    kinds = ("noise", "stripes", "checkers", "gradient")
    return [_procedural_image(rng, size, kinds[i % 4]) for i in range(n)]
