"""Shared helpers: central finite differences, seeded fixtures and the session-wide trained scenes."""

import time

import numpy as np
import pytest

from stylefield.checkpoint import load_decoder
from stylefield.cli import main
from stylefield.config import default_config, train_config
from stylefield.data_eval import generate_synthetic_scene, load_dataset, two_region_spec
from stylefield.train import TrainConfig, train_scene


def fd_check(loss_fn, params, grads, rng, n_probe=8, h=1e-6):
    """Max relative error between analytic ``grads`` and central differences.

    ``params`` are float64 arrays mutated in place; ``loss_fn()`` re-evaluates
    the scalar loss. A handful of random entries per array is probed.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in rng.choice(flat_p.size, size=min(n_probe, flat_p.size), replace=False):
            old = flat_p[i]
            flat_p[i] = old + h
            up = loss_fn()
            flat_p[i] = old - h
            down = loss_fn()
            flat_p[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - flat_g[i]) / max(1.0, abs(num), abs(flat_g[i])))
    return worst


def fd_input(fn, x, grad, h=1e-6):
    """Relative error of ``grad`` as the gradient of scalar ``fn(x)`` (all entries)."""
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        num.reshape(-1)[i] = (up - down) / (2 * h)
    return float(np.max(np.abs(num - grad) / np.maximum(1.0, np.abs(num))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Session-wide end-to-end fixtures (minutes of CPU; built once, on demand)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("end_to_end")


@pytest.fixture(scope="session")
def decoder(workdir):
    """Decoder pretrained by the CLI with the default configuration."""
    assert main(["pretrain-decoder", "--out", str(workdir / "decoder.fprf")]) == 0
    return load_decoder(workdir / "decoder.fprf")


@pytest.fixture(scope="session")
def toy(workdir):
    """The default synthetic scene (three objects, 32 views at 64x64)."""
    assert main(["synth-scene", "--out", str(workdir / "toy")]) == 0
    return load_dataset(workdir / "toy")


def _timed_train(dataset, decoder, cfg):
    t0 = time.perf_counter()
    state = train_scene(dataset, decoder, cfg)
    return state, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_runs(toy, decoder):
    """Default-config runs keyed by ``learn_decoder``: ``(state, wall seconds)``."""
    runs = {}
    for learn in (False, True):
        cfg = train_config(default_config())
        cfg.learn_decoder = learn
        runs[learn] = _timed_train(toy, decoder, cfg)
    return runs


@pytest.fixture(scope="session")
def frozen_state(toy_runs):
    return toy_runs[False][0]


@pytest.fixture(scope="session")
def two_region(decoder):
    """Two-region scene trained with oracle semantic targets (smaller than the toy run)."""
    ds = generate_synthetic_scene(two_region_spec(), 16, (48, 48))
    cfg = TrainConfig(steps=400, semantic_encoder="oracle_semantic", eval_every=400)
    return ds, _timed_train(ds, decoder, cfg)[0]
