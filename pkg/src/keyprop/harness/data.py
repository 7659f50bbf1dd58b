"""Stacking samples into the dense arrays the model consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..flow import fb_consistency
from ..synthdata import FrameSample


@dataclass
class SampleArrays:
    """``N`` samples with ``T`` keyframes each, channels-last."""

    target: np.ndarray  # N×H×W×4
    keys: np.ndarray  # N×T×H×W×4
    flows: np.ndarray  # N×T×H×W×2
    fb: np.ndarray  # N×T×H×W×1
    gt: np.ndarray  # N×H×W×3
    mask: np.ndarray  # N×H×W×1

    def __len__(self) -> int:
        return self.target.shape[0]

    @property
    def num_keyframes(self) -> int:
        return self.keys.shape[1]

    def take(self, idx) -> "SampleArrays":
        idx = np.asarray(idx)
        return SampleArrays(*(a[idx] for a in self._fields()))

    def with_keyframes(self, t: int) -> "SampleArrays":
        if t > self.num_keyframes:
            raise ValueError(f"only {self.num_keyframes} keyframes available, asked for {t}")
        return SampleArrays(self.target, self.keys[:, :t], self.flows[:, :t], self.fb[:, :t], self.gt, self.mask)

    def astype(self, dtype) -> "SampleArrays":
        return SampleArrays(*(a.astype(dtype) for a in self._fields()))

    def _fields(self):
        return (self.target, self.keys, self.flows, self.fb, self.gt, self.mask)


def sample_fb(sample: FrameSample) -> np.ndarray:
    """``T×H×W×1`` consistency of the filled flows the model sees."""
    return np.stack(
        [fb_consistency(f, b).data for f, b in zip(sample.flows_fwd_filled, sample.flows_bwd_filled)]
    )


def stack_samples(samples, t: int | None = None, dtype=np.float32) -> SampleArrays:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to stack")
    if t is not None:
        samples = [s.subset(t) for s in samples]
    return SampleArrays(
        np.stack([s.target_in for s in samples]).astype(dtype),
        np.stack([s.keyframes_in for s in samples]).astype(dtype),
        np.stack([np.stack([f.offsets for f in s.flows_fwd_filled]) for s in samples]).astype(dtype),
        np.stack([sample_fb(s) for s in samples]).astype(dtype),
        np.stack([s.gt for s in samples]).astype(dtype),
        np.stack([s.mask for s in samples]).astype(dtype),
    )
