"""Stream-exchange operators and the residual sublayers built from them.

Operators receive a small parameter dict with local names (``ws``, ``wv``,
...). :func:`scope` cuts such a view out of the full model parameter dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..flow import FlowField, bilinear_sample, pixel_grid
from ..spectral import ffc_resblock
from ..tensor import DimensionError, Tensor


def scope(params: dict, prefix: str) -> dict:
    """Parameters under ``prefix`` with the prefix stripped."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class StreamState:
    """LIF map ``...×h×w×c`` and GIF tokens ``...×M×d`` of one frame (or stack)."""

    lif: Tensor
    gif: Tensor


# ---------------------------------------------------------------------------
# patches


def patchify(x, m: int) -> Tensor:
    """``...×h×w×c`` to ``...×M×n_p×c`` with M = m² row-major patches."""
    x = T.tensor(x)
    *lead, h, w, c = x.shape
    if h % m or w % m:
        raise DimensionError(f"LIF extents {(h, w)} are not divisible by the grid {m}")
    ph, pw = h // m, w // m
    k = len(lead)
    y = T.reshape(x, tuple(lead) + (m, ph, m, pw, c))
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    return T.reshape(T.transpose(y, axes), tuple(lead) + (m * m, ph * pw, c))


def unpatchify(p, m: int, h: int, w: int) -> Tensor:
    p = T.tensor(p)
    *lead, mm, n_p, c = p.shape
    ph, pw = h // m, w // m
    if mm != m * m or n_p != ph * pw:
        raise DimensionError(f"patch tensor {p.shape} does not tile {(h, w)} with grid {m}")
    k = len(lead)
    y = T.reshape(p, tuple(lead) + (m, m, ph, pw, c))
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    return T.reshape(T.transpose(y, axes), tuple(lead) + (h, w, c))


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """``...×n×(heads·e)`` to ``...×heads×n×e``."""
    *lead, n, f = x.shape
    k = len(lead)
    y = T.reshape(x, tuple(lead) + (n, heads, f // heads))
    return T.transpose(y, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, e = x.shape
    k = len(lead)
    y = T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return T.reshape(y, tuple(lead) + (n, heads * e))


# ---------------------------------------------------------------------------
# read / write


def read_op(P, params: dict, heads: int) -> Tensor:
    """Pool LIF patches into one GIF vector per patch.

    ``P`` is ``...×M×n_p×c``. Each head scores every patch position with its
    own column of ``ws`` (c×heads), normalises the scores over the ``n_p``
    positions and pools its slice of the values ``P @ wv`` (c×d).
    """
    P = T.tensor(P)
    *lead, mm, n_p, c = P.shape
    d = params["wv"].shape[-1]
    if d % heads:
        raise DimensionError(f"GIF dim {d} is not divisible by {heads} read heads")
    attn = T.softmax(T.matmul(P, params["ws"]), axis=-2)  # ...×M×n_p×heads
    vals = T.matmul(P, params["wv"])  # ...×M×n_p×d
    vals = T.reshape(vals, tuple(lead) + (mm, n_p, heads, d // heads))
    k = len(lead) + 1
    vals = T.transpose(vals, tuple(range(k)) + (k + 1, k, k + 2))  # ...×M×heads×n_p×e
    a = T.reshape(_swap_last(attn), tuple(lead) + (mm, heads, 1, n_p))
    pooled = T.matmul(a, vals)  # ...×M×heads×1×e
    return T.reshape(pooled, tuple(lead) + (mm, d))


def write_op(P, G, params: dict, heads: int) -> Tensor:
    """Broadcast each GIF vector back onto its patch.

    Position ``j`` of patch ``i`` receives ``sigmoid(P_ij @ ws)`` per head times
    that head's channel slice of ``G_i @ wv`` (d×c). Output ``...×M×n_p×c``.
    """
    P, G = T.tensor(P), T.tensor(G)
    *lead, mm, n_p, c = P.shape
    if c % heads:
        raise DimensionError(f"LIF channels {c} are not divisible by {heads} write heads")
    if G.shape[:-1] != tuple(lead) + (mm,):
        raise DimensionError(f"write_op: GIF {G.shape} does not match patches {P.shape}")
    gate = T.sigmoid(T.matmul(P, params["ws"]))  # ...×M×n_p×heads
    value = T.matmul(G, params["wv"])  # ...×M×c
    value = T.reshape(value, tuple(lead) + (mm, heads, c // heads))
    k = len(lead) + 1
    # per head: (n_p×1) @ (1×e) outer product
    g = T.reshape(_swap_last(gate), tuple(lead) + (mm, heads, n_p, 1))
    v = T.reshape(value, tuple(lead) + (mm, heads, 1, c // heads))
    out = T.matmul(g, v)  # ...×M×heads×n_p×e
    out = T.transpose(out, tuple(range(k)) + (k + 1, k, k + 2))
    return T.reshape(out, tuple(lead) + (mm, n_p, c))


# ---------------------------------------------------------------------------
# attention over GIF tokens


def gif_attention(g_q, g_kv_list: Sequence, params: dict, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over GIF tokens.

    With an empty ``g_kv_list`` the tokens attend to themselves; otherwise
    keys and values come from ``concat(g_q, *g_kv_list)`` along the token
    axis. ``wq``/``wk`` are d×d_k and ``wv`` is d×d. The head outputs are
    concatenated; the output projection belongs to the enclosing block.
    """
    g_q = T.tensor(g_q)
    kv = T.concat([g_q] + list(g_kv_list), axis=-2) if len(g_kv_list) else g_q
    dk = params["wq"].shape[-1]
    if dk % heads or params["wv"].shape[-1] % heads:
        raise DimensionError(f"projection widths {dk}/{params['wv'].shape[-1]} not divisible by {heads} heads")
    if params["wq"].shape[0] != g_q.shape[-1] or params["wk"].shape[0] != kv.shape[-1]:
        raise DimensionError(f"attention projections do not accept tokens of width {g_q.shape[-1]}")
    q = _split_heads(T.matmul(g_q, params["wq"]), heads)
    k = _split_heads(T.matmul(kv, params["wk"]), heads)
    v = _split_heads(T.matmul(kv, params["wv"]), heads)
    scores = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(dk // heads))
    return _merge_heads(T.matmul(T.softmax(scores, axis=-1), v))


def feed_forward(g, params: dict) -> Tensor:
    h = T.gelu(T.linear(T.layer_norm(g, params["ln.g"], params["ln.b"]), params["w1"], params["b1"]))
    return T.add(g, T.linear(h, params["w2"], params["b2"]))


# ---------------------------------------------------------------------------
# deformable write


def _stack_flows(flows, dtype) -> np.ndarray:
    if isinstance(flows, np.ndarray):
        return flows.astype(dtype, copy=False)
    return np.stack([f.offsets if isinstance(f, FlowField) else np.asarray(f) for f in flows]).astype(dtype)


def deformable_write(target_lif, key_lifs, flows, fb, params: dict) -> Tensor:
    """Add flow-aligned keyframe features onto the target LIF.

    ``key_lifs`` is ``...×T×h×w×c`` (or a list of ``h×w×c``), ``flows`` the
    matching target-to-keyframe offsets at LIF resolution and ``fb`` the
    forward-backward consistency ``...×T×h×w×1``. Each keyframe is sampled at
    ``p + flow(p)``; per channel, softmax over keyframes of
    ``[sample, fb] @ wq`` weights the values ``sample @ wv``.
    """
    target_lif = T.tensor(target_lif)
    if isinstance(key_lifs, (list, tuple)):
        key_lifs = T.stack(key_lifs, axis=-4)
    key_lifs = T.tensor(key_lifs)
    dt = target_lif.dtype
    off = _stack_flows(flows, dt)
    fb = np.asarray(fb.data if isinstance(fb, Tensor) else (np.stack(fb) if isinstance(fb, (list, tuple)) else fb)).astype(dt)
    h, w = key_lifs.shape[-3:-1]
    if off.shape != key_lifs.shape[:-1] + (2,) or fb.shape != key_lifs.shape[:-1] + (1,):
        raise DimensionError(
            f"deformable_write: keyframes {key_lifs.shape}, flows {off.shape}, fb {fb.shape}"
        )
    pos = pixel_grid(h, w, dt) + off
    sampled = bilinear_sample(key_lifs, pos)
    score = T.matmul(T.concat([sampled, Tensor(fb)], axis=-1), params["wq"])
    attn = T.softmax(score, axis=-4)
    vals = T.matmul(sampled, params["wv"])
    return T.add(target_lif, T.sum(T.mul(attn, vals), axis=-4))


# ---------------------------------------------------------------------------
# LIF residual block


def lif_resblock(x, params: dict, use_ffc: bool) -> Tensor:
    if use_ffc:
        return ffc_resblock(x, params)
    y = T.gelu(T.conv2d(x, params["c1.w"], params["c1.b"], stride=1, pad=1))
    return T.add(T.tensor(x), T.conv2d(y, params["c2.w"], params["c2.b"], stride=1, pad=1))
