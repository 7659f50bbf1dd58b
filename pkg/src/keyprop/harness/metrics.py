"""Reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..spectral import _fft2_array, _pad_pow2
from ..synthdata import radial_frequency

PSNR_CAP = 99.0
HF_CUTOFF = 0.25  # cycles per pixel, half the Nyquist radius

METRIC_NAMES = ("hole_l1", "full_l1", "psnr", "hf_error")


def hole_l1(pred, gt, mask) -> float:
    m = np.broadcast_to(mask, gt.shape)
    n = m.sum()
    return float((np.abs(pred - gt) * m).sum() / n) if n else 0.0


def full_l1(pred, gt) -> float:
    return float(np.abs(np.asarray(pred, np.float64) - gt).mean())


def psnr(pred, gt) -> float:
    mse = float(((np.asarray(pred, np.float64) - gt) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def hf_error(pred, gt, cutoff: float = HF_CUTOFF) -> float:
    """Relative L2 error of the DFT coefficients above ``cutoff`` cycles/px."""
    p = _pad_pow2(np.asarray(pred, np.float64))
    g = _pad_pow2(np.asarray(gt, np.float64))
    band = radial_frequency(*g.shape[:2]) > cutoff
    fp, fg = _fft2_array(p)[band], _fft2_array(g)[band]
    num = np.sqrt((np.abs(fp - fg) ** 2).sum())
    den = np.sqrt((np.abs(fg) ** 2).sum())
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


@dataclass
class MetricsReport:
    """Per-sample metrics (arrays of length N) and their means."""

    hole_l1: np.ndarray
    full_l1: np.ndarray
    psnr: np.ndarray
    hf_error: np.ndarray

    def aggregate(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in METRIC_NAMES}

    def __len__(self) -> int:
        return len(self.hole_l1)

    def key_values(self) -> str:
        return "\n".join(f"{k}={v:.6g}" for k, v in self.aggregate().items())

    def table(self) -> str:
        rows = [f"{'sample':>6} " + " ".join(f"{k:>10}" for k in METRIC_NAMES)]
        for i in range(len(self)):
            rows.append(f"{i:>6} " + " ".join(f"{getattr(self, k)[i]:>10.4f}" for k in METRIC_NAMES))
        agg = self.aggregate()
        rows.append(f"{'mean':>6} " + " ".join(f"{agg[k]:>10.4f}" for k in METRIC_NAMES))
        return "\n".join(rows)


def compute_metrics(pred, gt, mask) -> MetricsReport:
    """``pred``/``gt`` are ``N×H×W×3`` (already composited), ``mask`` ``N×H×W×1``."""
    pred, gt, mask = (np.asarray(a, np.float64) for a in (pred, gt, mask))
    rows = [
        (hole_l1(p, g, m), full_l1(p, g), psnr(p, g), hf_error(p, g))
        for p, g, m in zip(pred, gt, mask)
    ]
    cols = np.array(rows, dtype=np.float64).reshape(-1, 4).T
    return MetricsReport(*cols)
