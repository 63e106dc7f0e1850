"""Command-line entry point: ``stylefield <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint error. Every command is deterministic given ``--seed``.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import data_eval as de
from .checkpoint import load_checkpoint, load_decoder, save_checkpoint, save_decoder
from .config import ConfigError, load_config, train_config
from .decoder import pretrain_decoder, procedural_corpus
from .encoder import semantic_spec, style_spec
from .plots import plot_pretrain_history, plot_train_report
from .renderer import MODES, CameraModel, render_image, resolve_threads
from .style_dict import build_dictionary, load_dictionary, save_dictionary
from .stylize import render_stylized, render_stylized_global
from .tensor_io import ContainerError, write_tensor
from .train import TrainingDiverged, train_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


EVAL_SCHEMA = {
    "type": "object",
    "required": ["metric", "results", "mean"],
    "properties": {
        "metric": {"enum": ["psnr", "warp"]},
        "mean": {"type": "number"},
        "results": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["a", "b", "value"],
                "properties": {
                    "a": {"type": "string"},
                    "b": {"type": "string"},
                    "value": {"type": "number"},
                    "valid_pixels": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


def _emit(rec):
    print(json.dumps(rec, sort_keys=True), flush=True)


def _seed(args, cfg):
    return cfg["general"]["seed"] if args.seed is None else args.seed


def _threads(args, cfg):
    if args.threads is not None:
        return resolve_threads(args.threads)
    if cfg["general"]["threads"] > 0:
        return cfg["general"]["threads"]
    return resolve_threads(None)


def _stem(path):
    root, _ = os.path.splitext(path)
    return root


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_corpus(directory, size):
    from PIL import Image

    paths = sorted(glob.glob(os.path.join(directory, "*.png")) + glob.glob(os.path.join(directory, "*.jpg")))
    out = []
    for p in paths:
        with Image.open(p) as im:
            out.append(np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR), np.float32) / 255.0)
    return out


def cmd_pretrain_decoder(args, cfg):
    pc = cfg["pretrain"]
    seed = _seed(args, cfg)
    steps = pc["steps"] if args.steps is None else args.steps
    corpus_dir = args.corpus_dir if args.corpus_dir is not None else pc["corpus_dir"]
    corpus = []
    if corpus_dir:
        if os.path.isdir(corpus_dir):
            corpus = _load_corpus(corpus_dir, pc["image_size"])
        if not corpus and not pc["procedural_fallback"]:
            raise CliError(f"corpus directory {corpus_dir!r} has no images and procedural_fallback is off",
                           EXIT_USAGE)
    elif not pc["procedural_fallback"]:
        raise CliError("no corpus_dir given and procedural_fallback is off", EXIT_USAGE)
    if corpus:
        content, styles = corpus, corpus
    else:
        content = procedural_corpus(pc["corpus_size"], pc["image_size"], seed=2 * seed + 1)
        styles = procedural_corpus(pc["corpus_size"], pc["image_size"], seed=2 * seed + 2)
    dec, hist = pretrain_decoder(content, styles, style_spec(), pc["lambda_s"], steps, seed, pc["lr"])
    save_decoder(args.out, dec, {"steps": steps, "seed": seed, "lambda_s": pc["lambda_s"]})
    stem = _stem(args.out)
    with open(stem + ".loss.json", "w") as f:
        json.dump({"loss": [float(x) for x in hist]}, f)
    plot_pretrain_history(stem + ".loss.png", hist)
    _emit({"command": "pretrain-decoder", "out": args.out, "steps": steps, "final_loss": float(np.mean(hist[-50:])),
           "param_hash": dec.param_hash()})


def _scene_spec(kind, spec_path):
    if spec_path:
        try:
            with open(spec_path) as f:
                return de.SyntheticSceneSpec.from_dict(json.load(f))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise CliError(f"bad scene spec {spec_path}: {e}", EXIT_USAGE) from e
    if kind == "toy":
        return de.toy_scene_spec()
    if kind == "two_region":
        return de.two_region_spec()
    raise CliError(f"unknown scene kind {kind!r}", EXIT_USAGE)


def cmd_synth_scene(args, cfg):
    sc = cfg["scene"]
    n = sc["n_views"] if args.views is None else args.views
    size = sc["size"] if args.size is None else args.size
    if n < 2:
        raise CliError("a scene needs at least two views", EXIT_USAGE)
    spec = _scene_spec(args.kind or sc["kind"], args.spec)
    ds = de.generate_synthetic_scene(spec, n, (size, size))
    de.save_dataset(ds, args.out)
    _emit({"command": "synth-scene", "out": args.out, "views": n, "size": size})


def cmd_validate_dataset(args, cfg):
    problems = de.validate_dataset(args.data)
    _emit({"command": "validate-dataset", "data": args.data, "valid": not problems, "problems": problems})
    if problems:
        raise CliError(f"{len(problems)} problem(s) in {args.data}", EXIT_DATA)


def cmd_train(args, cfg):
    tc = train_config(cfg, _seed(args, cfg))
    if args.steps is not None:
        tc.steps = args.steps
    if args.learn_decoder:
        tc.learn_decoder = True
    ds = de.load_dataset(args.data)
    state = None
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        tc.learn_decoder = saved.learn_decoder
        decoder = state.decoder
    else:
        if not args.decoder:
            raise CliError("--decoder is required unless resuming", EXIT_USAGE)
        decoder = load_decoder(args.decoder)
    threads = _threads(args, cfg)
    stem = _stem(args.out)

    def on_log(rec, elapsed):
        print(f"step {rec['step']} loss {rec['loss_total']:.4f} ({elapsed:.1f}s)", file=sys.stderr, flush=True)

    try:
        state = train_scene(ds, decoder, tc, state, threads=threads, on_log=on_log)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_DATA) from e
    save_checkpoint(args.out, state, tc)
    with open(stem + ".report.jsonl", "w") as f:
        for rec in state.report:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    plot_train_report(stem + ".loss.png", state.report)
    final = state.report[-1] if state.report else {}
    _emit({"command": "train", "out": args.out, "step": state.step, "psnr_heldout": final.get("psnr_heldout")})


def cmd_build_dict(args, cfg):
    M = cfg["dict"]["clusters"] if args.clusters is None else args.clusters
    refs = [de.load_png(p) for p in args.references]
    labels = None
    if args.labels:
        if len(args.labels) != len(refs):
            raise CliError("one label map per reference is required", EXIT_USAGE)
        from PIL import Image

        labels = [np.asarray(Image.open(p).convert("RGB"))[..., 0].astype(np.int64) for p in args.labels]
    sem = semantic_spec(kind="oracle_semantic" if labels else cfg["train"]["semantic_encoder"])
    t0 = time.perf_counter()
    try:
        d = build_dictionary(refs, M, style_spec(), sem, _seed(args, cfg), labels)
    except ValueError as e:
        raise CliError(str(e), EXIT_DATA) from e
    save_dictionary(args.out, d)
    _emit({"command": "build-dict", "out": args.out, "entries": len(d), "references": len(refs), "clusters": M})
    print(f"build time {time.perf_counter() - t0:.3f}s", file=sys.stderr)


def _cameras(args):
    if args.camera:
        try:
            with open(args.camera) as f:
                data = json.load(f)
            views = data["views"] if isinstance(data, dict) and "views" in data else data
            views = views if isinstance(views, list) else [views]
            return [(f"cam{i:04d}", CameraModel.from_dict(v)) for i, v in enumerate(views)]
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise CliError(f"bad camera file {args.camera}: {e}", EXIT_USAGE) from e
    if not args.data:
        raise CliError("give --camera or --data", EXIT_USAGE)
    with open(os.path.join(args.data, "poses.json")) as f:
        views = json.load(f)["views"]
    idx = range(len(views)) if not args.views else [int(v) for v in args.views.split(",")]
    out = []
    for i in idx:
        if not 0 <= i < len(views):
            raise CliError(f"view index {i} out of range", EXIT_USAGE)
        out.append((f"{i:04d}", CameraModel.from_dict(views[i])))
    return out


def _samples(args, cfg):
    return cfg["render"]["samples"] if args.samples is None else args.samples


def cmd_render(args, cfg):
    if args.mode not in MODES:
        raise CliError(f"unknown mode {args.mode!r}; choose from {', '.join(MODES)}", EXIT_USAGE)
    state, _ = load_checkpoint(args.ckpt)
    threads, K = _threads(args, cfg), _samples(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for name, cam in _cameras(args):
        img = render_image(state.content, state.semantic, cam, args.mode, state.decoder, K, threads)
        if args.mode == "color":
            path = os.path.join(args.out, f"{name}.png")
            de.save_png(path, img)
        elif args.mode == "depth":
            depth, valid = img
            path = os.path.join(args.out, f"{name}.depth.fpt")
            write_tensor(path, np.where(valid, depth, np.inf).astype(np.float32))
        else:
            path = os.path.join(args.out, f"{name}.{args.mode}.fpt")
            write_tensor(path, img.astype(np.float32))
        written.append(path)
    _emit({"command": "render", "mode": args.mode, "files": written})


def cmd_stylize(args, cfg):
    if bool(args.dict) == bool(args.style):
        raise CliError("give exactly one of --dict or --style", EXIT_USAGE)
    state, _ = load_checkpoint(args.ckpt)
    if not state.stats.initialized:
        raise CliError(f"{args.ckpt}: checkpoint has no content statistics", EXIT_DATA)
    threads, K = _threads(args, cfg), _samples(args, cfg)
    temp = cfg["stylize"]["temperature"]
    os.makedirs(args.out, exist_ok=True)
    sd = load_dictionary(args.dict) if args.dict else None
    style_img = de.load_png(args.style) if args.style else None
    written = []
    for name, cam in _cameras(args):
        if sd is not None:
            img = render_stylized(state.content, state.semantic, sd, state.stats, state.decoder, cam, K, threads, temp)
        else:
            img = render_stylized_global(state.content, state.stats, state.decoder, cam, style_img, style_spec(), K,
                                         threads)
        path = os.path.join(args.out, f"{name}.png")
        de.save_png(path, img)
        written.append(path)
    _emit({"command": "stylize", "files": written})


def _pairs(text, n):
    pairs = []
    for tok in text.split(","):
        a, _, b = tok.partition(":")
        try:
            a, b = int(a), int(b)
        except ValueError:
            raise CliError(f"bad pair {tok!r}; expected i:j", EXIT_USAGE) from None
        if not (0 <= a < n and 0 <= b < n):
            raise CliError(f"pair {tok} out of range", EXIT_USAGE)
        pairs.append((a, b))
    return pairs


def cmd_eval(args, cfg):
    results = []
    if args.metric == "psnr":
        if not (args.images and args.reference):
            raise CliError("psnr needs --images and --reference directories", EXIT_USAGE)
        names = sorted(os.path.basename(p) for p in glob.glob(os.path.join(args.images, "*.png")))
        if not names:
            raise CliError(f"no PNG images in {args.images}", EXIT_DATA)
        for nm in names:
            ref = os.path.join(args.reference, nm)
            if not os.path.isfile(ref):
                raise CliError(f"reference image {ref} missing", EXIT_DATA)
            v = de.psnr(de.load_png(os.path.join(args.images, nm)), de.load_png(ref))
            results.append({"a": nm, "b": nm, "value": 1e9 if v == de.PSNR_INF else v})
    else:
        if not (args.images and args.data and args.pairs):
            raise CliError("warp needs --images, --data and --pairs", EXIT_USAGE)
        ds = de.load_dataset(args.data)
        if args.ckpt:
            state, _ = load_checkpoint(args.ckpt)
            threads, K = _threads(args, cfg), _samples(args, cfg)
            depths, valids = [], []
            for cam in ds.cameras:
                d, v = render_image(state.content, None, cam, "depth", None, K, threads)
                depths.append(d)
                valids.append(v)
        elif ds.depths is not None:
            depths, valids = ds.depths, [None] * len(ds)
        else:
            raise CliError("warp needs depth: pass --ckpt or a dataset with depth maps", EXIT_DATA)
        tau = 0.01 * ds.diagonal
        for a, b in _pairs(args.pairs, len(ds)):
            Ia = de.load_png(os.path.join(args.images, f"{a:04d}.png"))
            Ib = de.load_png(os.path.join(args.images, f"{b:04d}.png"))
            warped, mask = de.warp_image(Ib, depths[a], ds.cameras[a], ds.cameras[b], tau, depths[b], valids[a],
                                         valids[b])
            try:
                v = de.warp_error(Ia, Ib, depths[a], depths[b], ds.cameras[a], ds.cameras[b], tau, valids[a],
                                  valids[b])
            except de.EmptyMaskError as e:
                raise CliError(f"pair {a}:{b}: {e}", EXIT_DATA) from e
            results.append({"a": f"{a:04d}", "b": f"{b:04d}", "value": v, "valid_pixels": int(mask.sum())})
    report = {"metric": args.metric, "results": results, "mean": float(np.mean([r["value"] for r in results]))}
    jsonschema.validate(report, EVAL_SCHEMA)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
    _emit(report)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file; flags override its values")
    common.add_argument("--seed", type=int, help="random seed (default: [general] seed)")
    common.add_argument("--threads", type=int, help="render worker threads (fallback: FPRF_THREADS, then 1)")

    p = argparse.ArgumentParser(prog="stylefield", description="Feed-forward 3D style transfer on radiance fields.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-decoder", parents=[common], help="pretrain the feature-to-color decoder")
    s.add_argument("--out", required=True, help="decoder file to write")
    s.add_argument("--steps", type=int, help="override [pretrain] steps")
    s.add_argument("--corpus-dir", help="directory of training images (override [pretrain] corpus_dir)")
    s.set_defaults(func=cmd_pretrain_decoder)

    s = sub.add_parser("synth-scene", parents=[common], help="render a synthetic multi-view dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--kind", choices=["toy", "two_region"], help="built-in scene (override [scene] kind)")
    s.add_argument("--spec", help="scene spec JSON (overrides --kind)")
    s.add_argument("--views", type=int, help="number of views (>= 2)")
    s.add_argument("--size", type=int, help="image side length in pixels")
    s.set_defaults(func=cmd_synth_scene)

    s = sub.add_parser("validate-dataset", parents=[common], help="check a dataset directory")
    s.add_argument("data", help="dataset directory")
    s.set_defaults(func=cmd_validate_dataset)

    s = sub.add_parser("train", parents=[common], help="fit content and semantic fields to a dataset")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--decoder", help="pretrained decoder file")
    s.add_argument("--out", required=True, help="checkpoint to write; report and plot go next to it")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--steps", type=int, help="total step count (override [train] steps)")
    s.add_argument("--learn-decoder", action="store_true", help="ablation: train a decoder with the scene")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-dict", parents=[common], help="cluster reference images into a style dictionary")
    s.add_argument("references", nargs="+", help="reference images (PNG)")
    s.add_argument("--out", required=True, help="dictionary file")
    s.add_argument("--clusters", "-M", type=int, help="clusters per reference (override [dict] clusters)")
    s.add_argument("--labels", nargs="*", help="region label PNGs (red channel) for oracle semantics")
    s.set_defaults(func=cmd_build_dict)

    for name, fn, helptext in (("render", cmd_render, "render views of a trained scene"),
                               ("stylize", cmd_stylize, "render stylized views")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ckpt", required=True, help="scene checkpoint")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--data", help="dataset directory providing cameras")
        s.add_argument("--views", help="comma-separated view indices (default: all)")
        s.add_argument("--camera", help="camera JSON file (one camera or a list)")
        s.add_argument("--samples", type=int, help="samples per ray (override [render] samples)")
        if name == "render":
            s.add_argument("--mode", default="color", help=f"one of {', '.join(MODES)}")
        else:
            s.add_argument("--dict", help="style dictionary file")
            s.add_argument("--style", help="single style image (global AdaIN path)")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", parents=[common], help="PSNR or warp-error report as JSON")
    s.add_argument("--metric", choices=["psnr", "warp"], required=True)
    s.add_argument("--images", help="directory of images to evaluate (NNNN.png)")
    s.add_argument("--reference", help="psnr: directory of reference images with matching names")
    s.add_argument("--data", help="warp: dataset directory with cameras (and depth)")
    s.add_argument("--ckpt", help="warp: take depth from this checkpoint instead of the dataset")
    s.add_argument("--pairs", help="warp: view pairs as i:j,i:j")
    s.add_argument("--samples", type=int, help="samples per ray for rendered depth")
    s.add_argument("--out", help="also write the report to this file")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, de.EmptyMaskError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
