"""Finite-difference checks for every differentiable operation.

Each case builds a small random float64 problem and returns the scalar
function plus the tensors to differentiate. The same registry backs the
``gradcheck`` subcommand and the test suite.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .. import tensor as T
from ..flow import bilinear_sample
from ..gradcheck import check_gradients
from ..model import ModelConfig, gif_attention, init_params, intra_frame_block, read_op, scope, write_op
from ..model import StreamState, deformable_write, lif_resblock, model_forward, patchify
from ..spectral import ffc_param_shapes, ffc_resblock
from ..tensor import Tensor

TINY = ModelConfig(
    stride=2,
    lif_channels=8,
    gif_dim=8,
    key_dim=8,
    grid=2,
    read_heads=2,
    write_heads=2,
    attn_heads=2,
    intra_blocks=1,
    cross_blocks=1,
)


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(y: Tensor, rng) -> Callable[[], Tensor]:
    """Random linear functional so every output coordinate matters."""
    w = Tensor(rng.standard_normal(y.shape))
    return lambda out: T.sum(T.mul(out, w))


def _case(build):
    """``build(rng)`` returns ``(forward, inputs)``; forward takes no arguments."""
    return build


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    c = _t(rng, 2, 5, 3)
    w = Tensor(rng.standard_normal((2, 3, 3)))
    return (lambda: T.sum(T.mul(T.matmul(T.matmul(a, b), c), w))), [a, b, c]


def _softmax(rng):
    x = _t(rng, 3, 4, 5)
    w = Tensor(rng.standard_normal((3, 4, 5)))
    return (lambda: T.sum(T.mul(T.softmax(x, axis=1), w))), [x]


def _layer_norm(rng):
    x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
    w = Tensor(rng.standard_normal((4, 6)))
    return (lambda: T.sum(T.mul(T.layer_norm(x, g, b), w))), [x, g, b]


def _conv2d(rng):
    x, k, b = _t(rng, 2, 7, 6, 3), _t(rng, 3, 3, 3, 4), _t(rng, 4)
    w = Tensor(rng.standard_normal((2, 4, 3, 4)))
    return (lambda: T.sum(T.mul(T.conv2d(x, k, b, stride=2, pad=1), w))), [x, k, b]


def _conv_transpose2d(rng):
    x, k, b = _t(rng, 2, 3, 3, 4), _t(rng, 4, 4, 3, 4), _t(rng, 3)
    w = Tensor(rng.standard_normal((2, 6, 6, 3)))
    return (lambda: T.sum(T.mul(T.conv_transpose2d(x, k, b, stride=2, pad=1), w))), [x, k, b]


def _elementwise(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    w = Tensor(rng.standard_normal((3, 4)))

    def f():
        y = T.add(T.mul(T.sigmoid(a), T.gelu(b)), T.scale(T.sub(a, b), 0.3))
        y = T.add(y, T.absolute(T.add(a, 3.0)))
        return T.sum(T.mul(y, w))

    return f, [a, b]


def _bilinear_sample(rng):
    feat = _t(rng, 2, 5, 6, 3)
    # stay clear of integer coordinates where the interpolant has kinks
    base = rng.integers(0, 4, size=(2, 3, 4, 2)).astype(np.float64)
    pos = Tensor(base + rng.uniform(0.15, 0.85, size=base.shape), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4, 3)))
    return (lambda: T.sum(T.mul(bilinear_sample(feat, pos), w))), [feat, pos]


def _read_op(rng):
    P = _t(rng, 4, 6, 8)
    p = {"ws": _t(rng, 8, 2), "wv": _t(rng, 8, 6)}
    w = Tensor(rng.standard_normal((4, 6)))
    return (lambda: T.sum(T.mul(read_op(P, p, 2), w))), [P, p["ws"], p["wv"]]


def _write_op(rng):
    P, G = _t(rng, 4, 6, 8), _t(rng, 4, 6)
    p = {"ws": _t(rng, 8, 2), "wv": _t(rng, 6, 8)}
    w = Tensor(rng.standard_normal((4, 6, 8)))
    return (lambda: T.sum(T.mul(write_op(P, G, p, 2), w))), [P, G, p["ws"], p["wv"]]


def _gif_attention(rng):
    g, k1, k2 = _t(rng, 4, 8), _t(rng, 4, 8), _t(rng, 4, 8)
    p = {"wq": _t(rng, 8, 6, scale=0.5), "wk": _t(rng, 8, 6, scale=0.5), "wv": _t(rng, 8, 8)}
    w = Tensor(rng.standard_normal((4, 8)))
    return (lambda: T.sum(T.mul(gif_attention(g, [k1, k2], p, 2), w))), [g, k1, k2] + list(p.values())


def _deformable_write(rng):
    tgt, keys = _t(rng, 5, 6, 4), _t(rng, 2, 5, 6, 4)
    base = rng.integers(-1, 2, size=(2, 5, 6, 2)).astype(np.float64)
    flows = base + rng.uniform(0.15, 0.85, size=base.shape)
    # keep every sample position strictly inside the map
    grid = np.stack(np.meshgrid(np.arange(6.0), np.arange(5.0)), axis=-1)
    pos = np.clip(grid + flows, 0.1, [5 - 0.1, 4 - 0.1])
    flows = pos - grid
    flows = np.where(np.abs(pos - np.round(pos)) < 0.1, flows + 0.2, flows)
    fb = np.abs(rng.standard_normal((2, 5, 6, 1)))
    p = {"wq": _t(rng, 5, 4), "wv": _t(rng, 4, 4)}
    w = Tensor(rng.standard_normal((5, 6, 4)))
    return (lambda: T.sum(T.mul(deformable_write(tgt, keys, flows, fb, p), w))), [tgt, keys, p["wq"], p["wv"]]


def _lif_resblock(rng):
    x = _t(rng, 6, 6, 4)
    p = {"c1.w": _t(rng, 3, 3, 4, 4, scale=0.3), "c1.b": _t(rng, 4), "c2.w": _t(rng, 3, 3, 4, 4, scale=0.3), "c2.b": _t(rng, 4)}
    w = Tensor(rng.standard_normal((6, 6, 4)))
    return (lambda: T.sum(T.mul(lif_resblock(x, p, use_ffc=False), w))), [x] + list(p.values())


def _ffc_resblock(rng):
    x = _t(rng, 6, 5, 4)  # non power-of-two extents exercise the padding path
    p = {k: _t(rng, *s, scale=0.4) for k, s in ffc_param_shapes(4).items()}
    w = Tensor(rng.standard_normal((6, 5, 4)))
    return (lambda: T.sum(T.mul(ffc_resblock(x, p), w))), [x] + list(p.values())


def _randomised_params(cfg, rng, scale=0.3):
    params = init_params(cfg, 0, np.float64)
    for v in params.values():
        v.data = rng.standard_normal(v.shape) * scale
    return params


def _intra_block(rng):
    cfg = TINY.replace(stride=2).validate()
    params = _randomised_params(cfg, rng)
    p = scope(params, "blocks.0.")
    lif, gif = _t(rng, 8, 8, 8), _t(rng, 4, 8)
    w1, w2 = Tensor(rng.standard_normal((8, 8, 8))), Tensor(rng.standard_normal((4, 8)))

    def f():
        s = intra_frame_block(StreamState(lif, gif), p, cfg)
        return T.add(T.sum(T.mul(s.lif, w1)), T.sum(T.mul(s.gif, w2)))

    return f, [lif, gif] + [p[k] for k in ("read.ws", "read.wv", "attn.wq", "write.ws", "lif.spec.w")]


CASES = {
    "matmul": _matmul,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "elementwise": _elementwise,
    "bilinear_sample": _bilinear_sample,
    "read_op": _read_op,
    "write_op": _write_op,
    "gif_attention": _gif_attention,
    "deformable_write": _deformable_write,
    "lif_resblock": _lif_resblock,
    "ffc_resblock": _ffc_resblock,
    "intra_frame_block": _intra_block,
}


def run_gradcheck(name: str, seed: int = 0, eps: float = 1e-6, max_coords: int | None = 64) -> float:
    rng = np.random.default_rng(seed)
    fn, inputs = CASES[name](rng)
    return check_gradients(fn, inputs, eps=eps, max_coords=max_coords, rng=rng)


def run_all(names=None, seed: int = 0, tol: float = 1e-4):
    """Yield ``(name, worst relative error, passed, seconds)``."""
    for name in names or CASES:
        t0 = time.perf_counter()
        err = run_gradcheck(name, seed)
        yield name, err, err < tol, time.perf_counter() - t0
