import numpy as np
import pytest

from keyprop import tensor as T
from keyprop.harness.data import stack_samples
from keyprop.harness.train import (
    Adam,
    TrainConfig,
    TrainingError,
    batch_indices,
    evaluate,
    reconstruction_loss,
    train,
)
from keyprop.model import checkpoint_load
from keyprop.synthdata import make_sample
from keyprop.tensor import Tensor


@pytest.fixture(scope="module")
def small_data():
    return stack_samples([make_sample(s, 16, 16, 2) for s in range(6)], dtype=np.float64)


def _f64(**kw):
    return TrainConfig(batch=2, dtype="float64", lr=1e-3, **kw)


class TestLoss:
    def test_zero_weight_is_plain_l1(self, rng):
        gt = rng.random((2, 4, 4, 3))
        pred = rng.random((2, 4, 4, 3))
        mask = (rng.random((2, 4, 4, 1)) < 0.5).astype(float)
        loss = reconstruction_loss(Tensor(pred), gt, mask, 0.0)
        assert float(loss.data) == pytest.approx(np.abs(pred - gt).mean())

    def test_hole_term(self):
        gt = np.zeros((1, 2, 2, 3))
        pred = np.zeros((1, 2, 2, 3))
        pred[0, 0, 0] = 1.0
        mask = np.zeros((1, 2, 2, 1))
        mask[0, 0, 0] = 1
        loss = reconstruction_loss(Tensor(pred), gt, mask, 2.0)
        assert float(loss.data) == pytest.approx(0.25 + 2.0 * 1.0)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
        p["w"].grad = np.array([0.5, -3.0])
        Adam(p, TrainConfig(lr=0.1)).update(p)
        np.testing.assert_allclose(p["w"].data, [0.9, -0.9], atol=1e-6)

    def test_minimises_quadratic(self):
        p = {"w": Tensor(np.array([3.0]), requires_grad=True)}
        opt = Adam(p, TrainConfig(lr=0.1))
        for _ in range(300):
            p["w"].grad = None
            T.sum(T.mul(p["w"], p["w"])).backward()
            opt.update(p)
        assert abs(p["w"].data[0]) < 0.05


class TestTrainLoop:
    def test_batches_depend_on_seed_and_step(self):
        a = batch_indices(0, 5, 100, 8)
        np.testing.assert_array_equal(a, batch_indices(0, 5, 100, 8))
        assert not np.array_equal(a, batch_indices(0, 6, 100, 8))
        assert len(set(a.tolist())) == 8

    def test_resume_is_bit_exact(self, tiny_cfg, small_data):
        full = train(tiny_cfg, _f64(steps=4), small_data)
        half = train(tiny_cfg, _f64(steps=4), small_data, until=2)
        rest = train(tiny_cfg, _f64(steps=4), small_data, resume=half.checkpoint)
        assert [l for _, l in rest.losses] == [l for _, l in full.losses[2:]]
        for k, v in full.checkpoint.params.items():
            assert v.tobytes() == rest.checkpoint.params[k].tobytes()

    def test_resume_through_file(self, tiny_cfg, small_data, tmp_path):
        full = train(tiny_cfg, _f64(steps=3), small_data)
        train(tiny_cfg, _f64(steps=3, ckpt_every=1), small_data, out_dir=tmp_path, until=1)
        rest = train(tiny_cfg, _f64(steps=3), small_data, resume=checkpoint_load(tmp_path / "ckpt_1.kpt"))
        assert rest.losses == full.losses[1:]

    def test_training_is_deterministic(self, tiny_cfg, small_data):
        a = train(tiny_cfg, _f64(steps=2), small_data)
        b = train(tiny_cfg, _f64(steps=2), small_data)
        assert a.losses == b.losses

    def test_checkpoints_written(self, tiny_cfg, small_data, tmp_path):
        train(tiny_cfg, _f64(steps=4, ckpt_every=2), small_data, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["ckpt_2.kpt", "ckpt_4.kpt", "final.kpt"]
        assert checkpoint_load(tmp_path / "final.kpt").step == 4

    def test_logging_interval(self, tiny_cfg, small_data):
        seen = []
        train(tiny_cfg, _f64(steps=5, log_every=2), small_data, on_log=lambda s, l: seen.append(s))
        assert seen == [0, 2, 4]

    def test_nonfinite_aborts_with_dump(self, tiny_cfg, small_data, tmp_path):
        bad = small_data.take(np.arange(len(small_data)))
        bad.target = bad.target.copy()
        bad.target[:, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="batch seed"):
            train(tiny_cfg, _f64(steps=1), bad, out_dir=tmp_path)
        assert any(p.name.startswith("nonfinite_step_0") for p in tmp_path.iterdir())

    def test_invalid_config(self, tiny_cfg, small_data):
        with pytest.raises(ValueError):
            train(tiny_cfg, TrainConfig(lr=-1.0), small_data)

    def test_evaluate_reports_every_sample(self, tiny_cfg, small_data):
        res = train(tiny_cfg, _f64(steps=1), small_data)
        report = evaluate(res.checkpoint, small_data, t=1)
        assert len(report) == len(small_data)
        assert np.all(np.isfinite(report.hole_l1))
