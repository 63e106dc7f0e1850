"""One INI-style configuration file shared by every command.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Values are parsed to the type of the key's default.
Unknown sections or keys are errors, so typos never pass silently.
"""

from __future__ import annotations

import configparser
from dataclasses import fields

from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _train_defaults():
    out = {}
    for f in fields(TrainConfig):
        v = f.default
        out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
    return out


SCHEMA = {
    "general": {"seed": 0, "threads": 0},
    "pretrain": {
        "steps": 1000,
        "lambda_s": 1.0,
        "lr": 0.002,
        "corpus_dir": "",
        "procedural_fallback": True,
        "corpus_size": 256,
        "image_size": 64,
        "log_every": 100,
    },
    "scene": {"kind": "toy", "n_views": 32, "size": 64},
    "train": _train_defaults(),
    "dict": {"clusters": 10},
    "render": {"samples": 64},
    "stylize": {"temperature": 1.0},
}


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def default_config():
    return {s: dict(keys) for s, keys in SCHEMA.items()}


def parse_config(text, source="<string>"):
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    cfg = default_config()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(section, key, raw, SCHEMA[section][key])
    return cfg


def load_config(path=None):
    if not path:
        return default_config()
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))


def train_config(cfg, seed=None) -> TrainConfig:
    d = dict(cfg["train"])
    try:
        d["blocks"] = tuple(int(b) for b in str(d["blocks"]).split(","))
        if len(d["blocks"]) != 3:
            raise ValueError("blocks needs three comma-separated counts")
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)
    except ValueError as e:
        raise ConfigError(f"[train] {e}") from e


def render_config_text(cfg):
    """Serialise a config dict back to the INI grammar (used to document defaults)."""
    lines = []
    for section, keys in cfg.items():
        lines.append(f"[{section}]")
        for k, v in keys.items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
