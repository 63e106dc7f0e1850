"""Checkpoint round trips and the shared configuration file."""

import numpy as np
import pytest

from stylefield.checkpoint import load_checkpoint, load_decoder, save_checkpoint, save_decoder
from stylefield.config import ConfigError, default_config, parse_config, render_config_text, train_config
from stylefield.data_eval import generate_synthetic_scene, toy_scene_spec
from stylefield.decoder import init_decoder
from stylefield.tensor_io import ContainerError
from stylefield.train import TrainConfig, train_scene


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds = generate_synthetic_scene(toy_scene_spec(), 4, (16, 16))
    cfg = TrainConfig(steps=4, rays_per_batch=32, samples=6, content_resolution=6, semantic_resolution=5,
                      log_every=2, eval_every=2, holdout_every=0)
    st = train_scene(ds, init_decoder(32, seed=0).freeze(), cfg)
    path = tmp_path_factory.mktemp("ck") / "scene.fprf"
    save_checkpoint(path, st, cfg)
    return st, cfg, path


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        st, cfg, path = trained
        back, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg and back.step == st.step and back.report == st.report
        pairs = [(st.content.param_groups(), back.content.param_groups()),
                 (st.semantic.param_groups(), back.semantic.param_groups())]
        for a, b in pairs:
            for x, y in zip(a["grid"] + a["mlp"], b["grid"] + b["mlp"]):
                np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(back.stats.mu_c, st.stats.mu_c)
        np.testing.assert_array_equal(back.adam_content.v[3], st.adam_content.v[3])
        assert back.decoder.param_hash() == st.decoder.param_hash() and back.decoder.frozen
        save_checkpoint(tmp_path / "again.fprf", back, cfg2)
        assert (tmp_path / "again.fprf").read_bytes() == path.read_bytes()

    def test_corruption_detected(self, trained, tmp_path):
        _, _, path = trained
        buf = bytearray(path.read_bytes())
        buf[len(buf) // 2] ^= 0x55
        bad = tmp_path / "bad.fprf"
        bad.write_bytes(bytes(buf))
        with pytest.raises(ContainerError):
            load_checkpoint(bad)
        bad.write_bytes(path.read_bytes()[:100])
        with pytest.raises(ContainerError):
            load_checkpoint(bad)

    def test_decoder_file_is_not_a_checkpoint(self, tmp_path):
        save_decoder(tmp_path / "d.fprf", init_decoder(32).freeze())
        assert load_decoder(tmp_path / "d.fprf").frozen
        with pytest.raises(ContainerError, match="missing sections"):
            load_checkpoint(tmp_path / "d.fprf")


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = default_config()
        assert parse_config(render_config_text(cfg)) == cfg

    def test_types_and_overrides(self):
        cfg = parse_config("[train]\nsteps = 12\nlambda_rgb = 2.5\nlearn_decoder = yes\nblocks = 2,1,2\n")
        tc = train_config(cfg, seed=9)
        assert (tc.steps, tc.lambda_rgb, tc.learn_decoder, tc.blocks, tc.seed) == (12, 2.5, True, (2, 1, 2), 9)

    def test_comments_allowed(self):
        cfg = parse_config("# top\n[render]\nsamples = 16  # fewer\n")
        assert cfg["render"]["samples"] == 16

    @pytest.mark.parametrize("text", ["[train]\nstepz = 3\n", "[nope]\na = 1\n", "[train]\nsteps = many\n",
                                      "[pretrain]\nprocedural_fallback = maybe\n", "steps = 1\n"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_invalid_train_values(self):
        with pytest.raises(ConfigError):
            train_config(parse_config("[train]\nblocks = 2,2\n"))
        with pytest.raises(ConfigError):
            train_config(parse_config("[train]\nlr_grid = -1\n"))
