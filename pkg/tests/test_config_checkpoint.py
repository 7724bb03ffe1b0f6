import numpy as np
import pytest

from seqdit import checkpoint, config
from seqdit.checkpoint import CheckpointError, ConfigHashMismatch
from seqdit.optim import AdamWState
from seqdit.tensor import Tensor


class TestConfig:
    def test_text_round_trip(self):
        cfg = config.RunConfig()
        cfg.model.dim = 48
        cfg.model.n_heads = 3
        cfg.diffusion.loss_region = "all"
        cfg.conditioning_mode = "channel_concat"
        cfg.optimizer.lr = 3e-4
        back = config.from_text(config.to_text(cfg))
        assert config.to_text(back) == config.to_text(cfg)
        assert back.model.dim == 48
        assert back.optimizer.lr == 3e-4
        assert back.conditioning_mode == "channel_concat"

    def test_hash_stable_and_sensitive(self):
        a = config.RunConfig()
        b = config.RunConfig()
        assert config.config_hash(a) == config.config_hash(b)
        assert len(config.config_hash(a)) == 16
        b.seed = 43
        assert config.config_hash(a) != config.config_hash(b)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            config.from_text("model.dimension = 64\n")
        with pytest.raises(ValueError):
            config.from_text("banana = 1\n")
        with pytest.raises(ValueError):
            config.from_text("sampler.steps = 10\n")

    def test_comments_and_blanks_ignored(self):
        cfg = config.from_text("# a comment\n\nseed = 7  # trailing\n")
        assert cfg.seed == 7

    def test_malformed_line(self):
        with pytest.raises(ValueError):
            config.from_text("seed 7\n")

    def test_validate_rejects_bad_values(self):
        cfg = config.RunConfig()
        cfg.conditioning_mode = "cross_attention"
        with pytest.raises(ValueError):
            cfg.validate()
        cfg = config.RunConfig()
        cfg.diffusion.loss_region = "quarter"
        with pytest.raises(ValueError):
            cfg.validate()
        cfg = config.RunConfig()
        cfg.optimizer.batch = 2
        with pytest.raises(ValueError):
            cfg.validate()

    def test_defaults_match_training_recipe(self):
        cfg = config.RunConfig()
        assert cfg.optimizer.lr == 1e-4
        assert cfg.model.lora_rank == 128
        assert cfg.model.lora_alpha == 128.0
        assert cfg.diffusion.schedule_steps == 1000
        assert cfg.diffusion.inference_steps == 50
        assert cfg.data.patch == 4

    def test_dit_and_lora_views(self):
        cfg = config.RunConfig()
        cfg.tuning = "lora"
        assert cfg.dit_config().dim == 64
        lora = cfg.lora_config()
        assert lora.enabled and lora.scale == 1.0

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 9\nmodel.dim = 32\nmodel.head_dim = 8\n")
        cfg = config.load(str(p))
        assert cfg.seed == 9 and cfg.model.dim == 32


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "a.w": Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
        "a.b": Tensor(rng.normal(size=(4,)).astype(np.float32)),
        "scalar": Tensor(np.float32(rng.normal()).reshape(())),
    }


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = _params()
        path = str(tmp_path / "m.ckpt")
        checkpoint.save(path, params, "deadbeef00000000")
        loaded, h, opt = checkpoint.load(path, expect_hash="deadbeef00000000")
        assert h == "deadbeef00000000"
        assert opt is None
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].tobytes() == params[k].data.tobytes()
            assert loaded[k].shape == params[k].data.shape

    def test_optimizer_state_round_trip(self, tmp_path):
        params = _params(1)
        state = AdamWState(lr=2e-3, weight_decay=0.01, step=17)
        rng = np.random.default_rng(2)
        for k, p in params.items():
            state.m[k] = rng.normal(size=p.data.shape).astype(np.float32)
            state.v[k] = rng.random(p.data.shape).astype(np.float32)
        path = str(tmp_path / "m.ckpt")
        checkpoint.save(path, params, "h", opt_state=state)
        _, _, opt = checkpoint.load(path)
        assert opt.step == 17 and opt.lr == 2e-3 and opt.weight_decay == 0.01
        for k in params:
            assert opt.m[k].tobytes() == state.m[k].tobytes()
            assert opt.v[k].tobytes() == state.v[k].tobytes()

    def test_hash_mismatch(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        checkpoint.save(path, _params(), "aaaa")
        with pytest.raises(ConfigHashMismatch):
            checkpoint.load(path, expect_hash="bbbb")
        # override is explicit
        _, h, _ = checkpoint.load(path, expect_hash="bbbb",
                                  allow_hash_mismatch=True)
        assert h == "aaaa"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            checkpoint.load(str(path))

    def test_restore_into(self, tmp_path):
        params = _params(3)
        path = str(tmp_path / "m.ckpt")
        checkpoint.save(path, params, "h")
        loaded, _, _ = checkpoint.load(path)
        fresh = _params(99)
        checkpoint.restore_into(fresh, loaded)
        for k in params:
            assert fresh[k].data.tobytes() == params[k].data.tobytes()

    def test_restore_shape_mismatch(self):
        fresh = _params()
        with pytest.raises(CheckpointError):
            checkpoint.restore_into(fresh, {"a.w": np.zeros((2, 2),
                                                            dtype=np.float32)})
        with pytest.raises(CheckpointError):
            checkpoint.restore_into(fresh, {"missing": np.zeros(2,
                                                                dtype=np.float32)})

    def test_no_temp_files_left(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        checkpoint.save(path, _params(), "h")
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []
