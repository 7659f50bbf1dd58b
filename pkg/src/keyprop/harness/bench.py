"""Wall-clock medians for the hot operations."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..flow import pixel_grid
from ..model import deformable_write, gif_attention
from ..spectral import _fft2_array, naive_dft2
from ..tensor import Tensor, no_grad

MIN_REPS = 20
FFT_SPEEDUP_MIN = 10.0
BENCH_OPS = ("conv2d", "fft2", "gif_attention", "deformable_write")


class BenchError(AssertionError):
    pass


@dataclass
class BenchRow:
    op: str
    size: str
    elements: int
    median_s: float

    @property
    def ns_per_element(self) -> float:
        return 1e9 * self.median_s / max(self.elements, 1)


def median_time(fn, reps: int = MIN_REPS) -> float:
    fn()  # warm caches
    times = []
    for _ in range(max(reps, MIN_REPS)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _cases(op: str, rng):
    f32 = np.float32
    if op == "conv2d":
        for n in (16, 32, 64):
            x = Tensor(rng.standard_normal((n, n, 16)).astype(f32))
            k = Tensor(rng.standard_normal((3, 3, 16, 16)).astype(f32))
            yield f"{n}x{n}x16", x.size, lambda x=x, k=k: T.conv2d(x, k, pad=1)
    elif op == "fft2":
        for n in (16, 32, 64):
            x = rng.standard_normal((n, n, 1))
            yield f"{n}x{n}", x.size, lambda x=x: _fft2_array(x)
    elif op == "gif_attention":
        for m, d in ((16, 32), (64, 64)):
            g = Tensor(rng.standard_normal((m, d)).astype(f32))
            ctx = [Tensor(rng.standard_normal((m, d)).astype(f32)) for _ in range(2)]
            p = {k: Tensor(rng.standard_normal((d, d)).astype(f32) * 0.1) for k in ("wq", "wk", "wv")}
            yield f"M={m},d={d},T=2", g.size, lambda g=g, ctx=ctx, p=p: gif_attention(g, ctx, p, 4)
    elif op == "deformable_write":
        for n in (16, 32):
            c = 32
            tgt = Tensor(rng.standard_normal((n, n, c)).astype(f32))
            keys = Tensor(rng.standard_normal((2, n, n, c)).astype(f32))
            flows = rng.uniform(-2, 2, (2, n, n, 2)).astype(f32)
            fb = rng.uniform(0, 1, (2, n, n, 1)).astype(f32)
            p = {"wq": Tensor(rng.standard_normal((c + 1, c)).astype(f32) * 0.1),
                 "wv": Tensor(rng.standard_normal((c, c)).astype(f32) * 0.1)}
            yield f"{n}x{n}x{c},T=2", tgt.size, lambda a=tgt, k=keys, f=flows, b=fb, p=p: deformable_write(a, k, f, b, p)
    else:
        raise ValueError(f"unknown bench op {op!r}; choose from {BENCH_OPS}")


def bench(ops=None, reps: int = MIN_REPS, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    with no_grad():
        for op in ops or BENCH_OPS:
            for size, n, fn in _cases(op, rng):
                rows.append(BenchRow(op, size, n, median_time(fn, reps)))
    return rows


def fft_speedup(n: int = 64, reps: int = MIN_REPS, seed: int = 0) -> tuple:
    """``(fft median, naive median, ratio)`` at ``n×n``."""
    x = np.random.default_rng(seed).standard_normal((n, n, 1))
    fast = median_time(lambda: _fft2_array(x), reps)
    slow = median_time(lambda: naive_dft2(x), max(MIN_REPS, reps // 4))
    return fast, slow, slow / fast


def check_fft_speedup(n: int = 64) -> float:
    fast, slow, ratio = fft_speedup(n)
    if ratio < FFT_SPEEDUP_MIN:
        raise BenchError(f"fft2 only {ratio:.1f}x faster than the naive DFT at {n}x{n}")
    return ratio


def format_rows(rows) -> str:
    out = [f"{'op':<18}{'size':<18}{'median_ms':>12}{'ns/element':>14}"]
    for r in rows:
        out.append(f"{r.op:<18}{r.size:<18}{1e3 * r.median_s:>12.4f}{r.ns_per_element:>14.1f}")
    return "\n".join(out)
