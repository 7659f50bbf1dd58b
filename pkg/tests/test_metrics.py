import numpy as np
import pytest

from keyprop.harness.metrics import PSNR_CAP, compute_metrics, full_l1, hf_error, hole_l1, psnr


class TestMetrics:
    def test_perfect_prediction(self, rng):
        gt = rng.random((3, 16, 16, 3))
        mask = (rng.random((3, 16, 16, 1)) < 0.3).astype(float)
        r = compute_metrics(gt, gt, mask)
        agg = r.aggregate()
        assert agg["hole_l1"] == 0 and agg["hf_error"] == 0 and agg["psnr"] == PSNR_CAP

    def test_hole_l1_counts_hole_only(self):
        gt = np.zeros((4, 4, 3))
        pred = np.zeros((4, 4, 3))
        mask = np.zeros((4, 4, 1))
        mask[:2] = 1
        pred[:2] = 0.5
        pred[2:] = 9.0  # outside the hole, ignored
        assert hole_l1(pred, gt, mask) == pytest.approx(0.5)

    def test_full_l1_and_psnr(self):
        gt = np.zeros((2, 2, 3))
        pred = np.full((2, 2, 3), 0.1)
        assert full_l1(pred, gt) == pytest.approx(0.1)
        assert psnr(pred, gt) == pytest.approx(20.0)

    def test_hf_error_ignores_low_frequencies(self, rng):
        gt = rng.random((32, 32, 3))
        assert hf_error(gt + 0.3, gt) == pytest.approx(0.0, abs=1e-12)
        ys, xs = np.mgrid[0:32, 0:32]
        smooth = 0.1 * np.cos(2 * np.pi * xs / 32)[..., None]
        assert hf_error(gt + smooth, gt) == pytest.approx(0.0, abs=1e-12)

    def test_hf_error_sees_checkerboard(self, rng):
        gt = rng.random((32, 32, 1))
        ys, xs = np.mgrid[0:32, 0:32]
        checker = 0.1 * ((xs + ys) % 2)[..., None]
        assert hf_error(gt + checker, gt) > 0.1

    def test_report_formats(self, rng):
        gt = rng.random((2, 8, 8, 3))
        r = compute_metrics(gt * 0.9, gt, np.ones((2, 8, 8, 1)))
        lines = dict(line.split("=") for line in r.key_values().splitlines())
        assert set(lines) == {"hole_l1", "full_l1", "psnr", "hf_error"}
        float(lines["hole_l1"])
        assert "mean" in r.table()
