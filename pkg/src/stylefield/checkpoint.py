"""Checkpoint and decoder files built on the sectioned FPRF container.

A scene checkpoint holds the sections META, CGRD, SGRD, CMLP, SMLP, STAT,
DVGG and ADAM. A pretrained decoder file holds a single DVGG section.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .core_math import MlpParams
from .decoder import ColorDecoder, ContentStats
from .field import BlockLayout, SceneContentField, SceneSemanticField, TriPlaneGrid
from .optim import AdamState
from .tensor_io import ContainerError, read_container, write_container
from .train import TrainConfig, TrainState

CHECKPOINT_FORMAT = "scene-checkpoint"


def _mlp_section(mlps):
    meta = {"layers": [len(m.weights) for m in mlps], "out_act": [m.out_act for m in mlps]}
    tensors = []
    for m in mlps:
        tensors.extend(m.arrays())
    return meta, tensors


def _mlps_from_section(meta, tensors):
    out, pos = [], 0
    for n, act in zip(meta["layers"], meta["out_act"]):
        arr = tensors[pos : pos + 2 * n]
        if len(arr) != 2 * n:
            raise ContainerError("MLP section is short of tensors")
        out.append(MlpParams(list(arr[0::2]), list(arr[1::2]), act))
        pos += 2 * n
    if pos != len(tensors):
        raise ContainerError("MLP section has extra tensors")
    return out


def _grid_section(grids):
    return {"blocks": len(grids)}, [p for g in grids for p in g.planes]


def _grids_from_section(meta, tensors):
    if len(tensors) != 3 * meta["blocks"]:
        raise ContainerError("grid section has the wrong number of planes")
    return [TriPlaneGrid(list(tensors[3 * i : 3 * i + 3])) for i in range(meta["blocks"])]


def decoder_section(dec: ColorDecoder):
    meta, tensors = _mlp_section([dec.mlp])
    meta["frozen"] = bool(dec.frozen)
    return meta, tensors


def decoder_from_section(meta, tensors) -> ColorDecoder:
    (mlp,) = _mlps_from_section(meta, tensors)
    dec = ColorDecoder(mlp)
    return dec.freeze() if meta.get("frozen", True) else dec


def save_decoder(path, dec: ColorDecoder, extra_meta=None):
    meta, tensors = decoder_section(dec)
    if extra_meta:
        meta = {**meta, "info": extra_meta}
    write_container(path, {"DVGG": (meta, tensors)})


def load_decoder(path) -> ColorDecoder:
    sections = read_container(path)
    if "DVGG" not in sections:
        raise ContainerError(f"{path}: no DVGG section")
    return decoder_from_section(*sections["DVGG"])


def save_checkpoint(path, state: TrainState, config: TrainConfig, extra_meta=None):
    c, s = state.content, state.semantic
    lay = c.layout
    config_d = asdict(config)
    config_d["blocks"] = list(config.blocks)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "config": config_d,
        "layout": {
            "aabb_min": lay.aabb_min.tolist(),
            "aabb_max": lay.aabb_max.tolist(),
            "blocks": list(lay.blocks),
            "overlap_frac": lay.overlap_frac,
        },
        "n_freq": c.n_freq,
        "report": state.report,
    }
    if extra_meta:
        meta["info"] = extra_meta
    adam_meta = {"content_step": state.adam_content.step, "semantic_step": state.adam_semantic.step,
                 "n_content": len(state.adam_content.m), "n_semantic": len(state.adam_semantic.m),
                 "decoder_step": None if state.adam_decoder is None else state.adam_decoder.step}
    adam_t = state.adam_content.m + state.adam_content.v + state.adam_semantic.m + state.adam_semantic.v
    if state.adam_decoder is not None:
        adam_meta["n_decoder"] = len(state.adam_decoder.m)
        adam_t += state.adam_decoder.m + state.adam_decoder.v
    sections = {
        "META": (meta, []),
        "CGRD": _grid_section(c.grids),
        "SGRD": _grid_section(s.grids),
        "CMLP": _mlp_section([c.trunk, c.head]),
        "SMLP": _mlp_section([s.head]),
        "STAT": ({"decay": state.stats.decay, "initialized": state.stats.initialized},
                 [state.stats.mu_c, state.stats.sigma_c]),
        "DVGG": decoder_section(state.decoder),
        "ADAM": (adam_meta, adam_t),
    }
    write_container(path, sections)


def _split(seq, n):
    return list(seq[:n]), seq[n:]


def load_checkpoint(path):
    """Returns ``(TrainState, TrainConfig)``; raises :class:`ContainerError` on any corruption."""
    sections = read_container(path)
    missing = {"META", "CGRD", "SGRD", "CMLP", "SMLP", "STAT", "DVGG", "ADAM"} - set(sections)
    if missing:
        raise ContainerError(f"{path}: missing sections {sorted(missing)}")
    meta, _ = sections["META"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ContainerError(f"{path}: not a scene checkpoint")
    try:
        cfg = dict(meta["config"])
        cfg["blocks"] = tuple(cfg["blocks"])
        config = TrainConfig(**cfg)
        lm = meta["layout"]
        layout = BlockLayout(np.array(lm["aabb_min"]), np.array(lm["aabb_max"]), tuple(lm["blocks"]),
                             lm["overlap_frac"])
        trunk, head = _mlps_from_section(*sections["CMLP"])
        content = SceneContentField(layout, _grids_from_section(*sections["CGRD"]), trunk, head, meta["n_freq"])
        (shead,) = _mlps_from_section(*sections["SMLP"])
        semantic = SceneSemanticField(layout, _grids_from_section(*sections["SGRD"]), shead)
        smeta, (mu, sigma) = sections["STAT"]
        stats = ContentStats(mu, sigma, smeta["decay"], smeta["initialized"])
        decoder = decoder_from_section(*sections["DVGG"])
        am, at = sections["ADAM"]
        n_c, n_s = am["n_content"], am["n_semantic"]
        cm, at = _split(at, n_c)
        cv, at = _split(at, n_c)
        sm, at = _split(at, n_s)
        sv, at = _split(at, n_s)
        adam_d = None
        if am.get("decoder_step") is not None:
            n_d = am["n_decoder"]
            dm, at = _split(at, n_d)
            dv, at = _split(at, n_d)
            adam_d = AdamState(dm, dv, am["decoder_step"])
        if len(at):
            raise ContainerError("ADAM section has extra tensors")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"{path}: malformed checkpoint ({e})") from e
    state = TrainState(content, semantic, stats, decoder, AdamState(cm, cv, am["content_step"]),
                       AdamState(sm, sv, am["semantic_step"]), adam_d, meta["step"], list(meta["report"]))
    return state, config
