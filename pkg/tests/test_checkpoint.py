import numpy as np
import pytest

from keyprop.model import Checkpoint, CheckpointError, ModelConfig, checkpoint_load, checkpoint_save, init_params


@pytest.fixture
def ckpt(tiny_cfg, rng):
    params = init_params(tiny_cfg, 3)
    opt = {f"{k}.m": rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    return Checkpoint.from_tensors(tiny_cfg, params, step=17, opt=opt, train={"lr": 1e-3})


class TestCheckpoint:
    def test_round_trip_bit_exact(self, ckpt, tmp_path):
        path = tmp_path / "c.kpt"
        checkpoint_save(ckpt, path)
        back = checkpoint_load(path)
        assert back.config == ckpt.config and back.step == 17 and back.train == {"lr": 1e-3}
        for k, v in ckpt.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        for k, v in ckpt.opt.items():
            assert back.opt[k].tobytes() == v.tobytes()

    def test_save_is_a_snapshot(self, tiny_cfg):
        params = init_params(tiny_cfg, 0)
        c = Checkpoint.from_tensors(tiny_cfg, params)
        params["gif.init"].data += 1
        assert not np.array_equal(c.params["gif.init"], params["gif.init"].data)

    def test_truncated_file(self, ckpt, tmp_path):
        path = tmp_path / "c.kpt"
        checkpoint_save(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            checkpoint_load(path)

    def test_wider_config_refuses_checkpoint(self, tmp_path):
        small = ModelConfig(lif_channels=32)
        checkpoint_save(Checkpoint.from_tensors(small, init_params(small, 0)), tmp_path / "c.kpt")
        with pytest.raises(CheckpointError, match="shape"):
            checkpoint_load(tmp_path / "c.kpt", expect=ModelConfig(lif_channels=64))

    def test_parameter_shape_tampering(self, ckpt, tmp_path):
        ckpt.params["gif.init"] = np.zeros((3, 3), np.float32)
        checkpoint_save(ckpt, tmp_path / "c.kpt")
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "c.kpt")

    def test_missing_parameter(self, ckpt, tmp_path):
        del ckpt.params["gif.init"]
        checkpoint_save(ckpt, tmp_path / "c.kpt")
        with pytest.raises(CheckpointError, match="missing"):
            checkpoint_load(tmp_path / "c.kpt")

    def test_version_mismatch(self, ckpt, tmp_path):
        from keyprop import archive

        checkpoint_save(ckpt, tmp_path / "c.kpt")
        e = archive.load(tmp_path / "c.kpt")
        e["config.version"] = np.array(99.0)
        archive.save(tmp_path / "c.kpt", e)
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(tmp_path / "c.kpt")

    def test_block_order_and_ablation_stored(self, tmp_path):
        cfg = ModelConfig(block_order="CIIIIC", ablation="gif_only")
        checkpoint_save(Checkpoint.from_tensors(cfg, init_params(cfg, 0)), tmp_path / "c.kpt")
        back = checkpoint_load(tmp_path / "c.kpt")
        assert back.config.order() == "CIIIIC" and back.config.ablation == "gif_only"
