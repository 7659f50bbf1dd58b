"""Parameter layout, encoder/decoder and the full two-stream forward pass."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..flow import FlowField, resize_map
from ..spectral import ffc_param_shapes
from ..tensor import DimensionError, Tensor
from .config import ModelConfig
from .layers import (
    StreamState,
    deformable_write,
    feed_forward,
    gif_attention,
    lif_resblock,
    patchify,
    read_op,
    scope,
    unpatchify,
    write_op,
)

# initialisation kinds
CONV, TCONV, LINEAR, ZERO, ONE = "conv", "tconv", "linear", "zero", "one"


def _widths(cfg: ModelConfig) -> list:
    """Channel count after each encoder stage, ending at ``lif_channels``."""
    n = cfg.stages
    return [cfg.lif_channels >> (n - 1 - i) for i in range(n)]


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``name -> (shape, init kind)`` for every trainable tensor."""
    cfg.validate()
    c, d, dk = cfg.lif_channels, cfg.gif_dim, cfg.key_dim
    out = {}

    def put(name, shape, kind):
        out[name] = (tuple(shape), kind)

    widths = _widths(cfg)
    cin = cfg.input_channels
    for i, co in enumerate(widths):
        put(f"enc.{i}.w", (4, 4, cin, co), CONV)
        put(f"enc.{i}.b", (co,), ZERO)
        cin = co
    dec_out = widths[-2::-1] + [3]
    ci = c
    for i, co in enumerate(dec_out):
        put(f"dec.{i}.w", (4, 4, co, ci), TCONV)
        put(f"dec.{i}.b", (co,), ZERO)
        ci = co
    put("gif.init", (cfg.tokens, d), LINEAR)

    def ln(name, n):
        put(f"{name}.g", (n,), ONE)
        put(f"{name}.b", (n,), ZERO)

    for j, kind in enumerate(cfg.order()):
        b = f"blocks.{j}."
        if kind == "C":
            put(b + "dw.wq", (c + 1, c), LINEAR)
            put(b + "dw.wv", (c, c), ZERO)
        ln(b + "read.ln", c)
        put(b + "read.ws", (c, cfg.read_heads), LINEAR)
        put(b + "read.wv", (c, d), LINEAR)
        put(b + "read.proj.w", (d, d), ZERO)
        put(b + "read.proj.b", (d,), ZERO)
        if cfg.use_ffc:
            for k, shape in ffc_param_shapes(c).items():
                init = ZERO if k.endswith(".b") or k == "proj.w" else CONV
                put(b + "lif." + k, shape, init)
        else:
            put(b + "lif.c1.w", (3, 3, c, c), CONV)
            put(b + "lif.c1.b", (c,), ZERO)
            put(b + "lif.c2.w", (3, 3, c, c), ZERO)
            put(b + "lif.c2.b", (c,), ZERO)
        ln(b + "attn.ln", d)
        put(b + "attn.wq", (d, dk), LINEAR)
        put(b + "attn.wk", (d, dk), LINEAR)
        put(b + "attn.wv", (d, d), LINEAR)
        put(b + "attn.wo", (d, d), ZERO)
        ln(b + "ff.ln", d)
        put(b + "ff.w1", (d, cfg.ff_mult * d), LINEAR)
        put(b + "ff.b1", (cfg.ff_mult * d,), ZERO)
        put(b + "ff.w2", (cfg.ff_mult * d, d), ZERO)
        put(b + "ff.b2", (d,), ZERO)
        ln(b + "write.ln", c)
        ln(b + "write.gln", d)
        put(b + "write.ws", (c, cfg.write_heads), LINEAR)
        put(b + "write.wv", (d, c), LINEAR)
        put(b + "write.proj.w", (c, c), ZERO)
        put(b + "write.proj.b", (c,), ZERO)
    return out


def _truncated_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fresh parameters.

    Convolutions use He-normal scaling by fan-in, dense projections a
    truncated normal with std 0.02. Projections that feed a residual add start
    at zero so that every block is initially the identity and the untrained
    network reduces to encoder plus decoder.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == CONV:
            fan_in = int(np.prod(shape[:-1]))
            v = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif kind == TCONV:
            # a stride-2 4×4 transpose conv touches each output from 2×2 taps
            fan_in = shape[0] * shape[1] * shape[3] // 4
            v = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif kind == LINEAR:
            v = _truncated_normal(rng, shape, 0.02)
        elif kind == ONE:
            v = np.ones(shape)
        else:
            v = np.zeros(shape)
        params[name] = Tensor(v.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# encoder / decoder


def lif_encode(x, params: dict, cfg: ModelConfig) -> Tensor:
    """``...×H×W×4`` to ``...×H/s×W/s×c`` through strided 4×4 convs."""
    y = T.tensor(x)
    h, w = y.shape[-3:-1]
    if h % cfg.stride or w % cfg.stride:
        raise DimensionError(f"input extents {(h, w)} are not divisible by the stride {cfg.stride}")
    n = cfg.stages
    for i in range(n):
        y = T.conv2d(y, params[f"enc.{i}.w"], params[f"enc.{i}.b"], stride=2, pad=1)
        if i < n - 1:
            y = T.gelu(y)
    return y


def lif_decode(lif, params: dict, cfg: ModelConfig) -> Tensor:
    """Mirror of :func:`lif_encode` ending in a sigmoid over three channels."""
    y = T.tensor(lif)
    n = cfg.stages
    for i in range(n):
        y = T.conv_transpose2d(y, params[f"dec.{i}.w"], params[f"dec.{i}.b"], stride=2, pad=1)
        y = T.gelu(y) if i < n - 1 else T.sigmoid(y)
    return y


def gif_init(params: dict) -> Tensor:
    """The shared learned initial GIF tokens (``M×d``)."""
    return params["gif.init"]


# ---------------------------------------------------------------------------
# blocks


def _ln(x, p, name):
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"])


def _read_update(lif, gif, p, cfg):
    P = patchify(_ln(lif, p, "read.ln"), cfg.grid)
    r = read_op(P, scope(p, "read."), cfg.read_heads)
    return T.add(gif, T.linear(r, p["read.proj.w"], p["read.proj.b"]))


def _write_update(lif, gif, p, cfg):
    h, w = lif.shape[-3:-1]
    P = patchify(_ln(lif, p, "write.ln"), cfg.grid)
    wr = write_op(P, _ln(gif, p, "write.gln"), scope(p, "write."), cfg.write_heads)
    wr = unpatchify(wr, cfg.grid, h, w)
    return T.add(lif, T.linear(wr, p["write.proj.w"], p["write.proj.b"]))


def _block(lif, gif, p, cfg, context_fn):
    gif = _read_update(lif, gif, p, cfg)
    lif = lif_resblock(lif, scope(p, "lif."), cfg.use_ffc)
    gif = T.add(gif, T.matmul(context_fn(_ln(gif, p, "attn.ln")), p["attn.wo"]))
    gif = feed_forward(gif, scope(p, "ff."))
    if cfg.ablation != "gif_only":
        lif = _write_update(lif, gif, p, cfg)
    return lif, gif


def _intra(lif, gif, p, cfg):
    attn = scope(p, "attn.")
    return _block(lif, gif, p, cfg, lambda g: gif_attention(g, [], attn, cfg.attn_heads))


def _cross(lif, gif, flows, fb, p, cfg):
    """Cross-frame block on frame stacks ``B×F×...`` with the target at index 0."""
    B, F = lif.shape[:2]
    if F == 1:
        return _intra(lif, gif, p, cfg)
    if cfg.ablation == "none":
        tgt = deformable_write(lif[:, 0], lif[:, 1:], flows, fb, scope(p, "dw."))
        lif = T.concat([T.reshape(tgt, (B, 1) + tgt.shape[1:]), lif[:, 1:]], axis=1)
    attn = scope(p, "attn.")
    heads = cfg.attn_heads
    M, d = gif.shape[-2:]

    def context(g):
        # keyframes attend to themselves, the target to every frame
        keys = gif_attention(g[:, 1:], [], attn, heads)
        ctx = T.reshape(g[:, 1:], (B, 1, (F - 1) * M, d))
        tgt = gif_attention(g[:, :1], [ctx], attn, heads)
        return T.concat([tgt, keys], axis=1)

    return _block(lif, gif, p, cfg, context)


def intra_frame_block(state: StreamState, params: dict, cfg: ModelConfig) -> StreamState:
    lif, gif = _intra(state.lif, state.gif, params, cfg)
    return StreamState(lif, gif)


def cross_frame_block(
    target: StreamState,
    keys: Sequence[StreamState],
    flows,
    fb,
    params: dict,
    cfg: ModelConfig,
) -> tuple:
    """One cross-frame block on a target and its keyframes.

    ``flows``/``fb`` give per keyframe the target-to-keyframe offsets and
    consistency at LIF resolution. Returns ``(target, keys)`` updated.
    """
    frames = [target] + list(keys)
    lif = T.stack([s.lif for s in frames], axis=-4)
    gif = T.stack([s.gif for s in frames], axis=-3)
    single = lif.ndim == 4
    if single:
        lif = T.reshape(lif, (1,) + lif.shape)
        gif = T.reshape(gif, (1,) + gif.shape)
    fl = _as_array(flows, lif.dtype)
    fbv = _as_array(fb, lif.dtype)
    if single and len(keys):
        fl, fbv = fl[None], fbv[None]
    lif, gif = _cross(lif, gif, fl, fbv, params, cfg)
    out = []
    for i in range(len(frames)):
        li, gi = lif[:, i], gif[:, i]
        if single:
            li, gi = T.reshape(li, li.shape[1:]), T.reshape(gi, gi.shape[1:])
        out.append(StreamState(li, gi))
    return out[0], out[1:]


def _as_array(x, dtype):
    if isinstance(x, Tensor):
        return x.data.astype(dtype, copy=False)
    if isinstance(x, (list, tuple)):
        if not x:
            return np.zeros((0,))
        return np.stack([v.offsets if isinstance(v, FlowField) else _as_array(v, dtype) for v in x]).astype(dtype)
    if isinstance(x, FlowField):
        return x.offsets.astype(dtype)
    return np.asarray(x, dtype=dtype)


# ---------------------------------------------------------------------------
# full model


def lif_flows(flows: np.ndarray, fb: np.ndarray, h: int, w: int) -> tuple:
    """Resize ``...×H×W×2`` flows and ``...×H×W×1`` consistency to ``h×w``."""
    H, W = flows.shape[-3:-1]
    f = resize_map(flows, h, w)
    f[..., 0] *= w / W
    f[..., 1] *= h / H
    g = resize_map(fb, h, w) * (0.5 * (w / W + h / H))
    return f, g


def model_forward(cfg: ModelConfig, params: dict, target, keys, flows, fb) -> Tensor:
    """Inpaint the target frame.

    ``target`` is the masked target ``[B×]H×W×4`` (RGB with holes zeroed,
    then the mask), ``keys`` the masked keyframes ``[B×]T×H×W×4``, ``flows``
    the target-to-keyframe offsets ``[B×]T×H×W×2`` and ``fb`` their
    forward-backward consistency ``[B×]T×H×W×1``, all at input resolution.
    Returns ``[B×]H×W×3``: predictions inside the hole, input pixels outside.
    """
    dt = params["gif.init"].dtype
    tgt = _as_array(target, dt)
    single = tgt.ndim == 3
    if single:
        tgt = tgt[None]
    B, H, W, C = tgt.shape
    if C != cfg.input_channels:
        raise DimensionError(f"target has {C} channels, expected {cfg.input_channels}")
    cfg.check_input(H, W)
    kf = _as_array(keys, dt) if keys is not None and len(keys) else np.zeros((B, 0, H, W, C), dt)
    fl = _as_array(flows, dt) if flows is not None and len(flows) else np.zeros((B, 0, H, W, 2), dt)
    fbv = _as_array(fb, dt) if fb is not None and len(fb) else np.zeros((B, 0, H, W, 1), dt)
    if single and kf.ndim == 4:
        kf, fl, fbv = kf[None], fl[None], fbv[None]
    nk = kf.shape[1]
    if kf.shape != (B, nk, H, W, C) or fl.shape != (B, nk, H, W, 2) or fbv.shape != (B, nk, H, W, 1):
        raise DimensionError(
            f"model_forward: target {tgt.shape}, keys {kf.shape}, flows {fl.shape}, fb {fbv.shape}"
        )
    F = 1 + nk
    frames = np.concatenate([tgt[:, None], kf], axis=1).reshape(B * F, H, W, C)
    lif = lif_encode(Tensor(frames), params, cfg)
    h, w, c = lif.shape[-3:]
    g0 = gif_init(params)
    gif = T.broadcast_to(g0, (B * F,) + g0.shape)
    lfl, lfb = lif_flows(fl, fbv, h, w) if nk else (fl, fbv)

    for j, kind in enumerate(cfg.order()):
        pj = scope(params, f"blocks.{j}.")
        if kind == "I":
            lif, gif = _intra(lif, gif, pj, cfg)
        else:
            lif = T.reshape(lif, (B, F, h, w, c))
            gif = T.reshape(gif, (B, F) + g0.shape)
            lif, gif = _cross(lif, gif, lfl, lfb, pj, cfg)
            lif = T.reshape(lif, (B * F, h, w, c))
            gif = T.reshape(gif, (B * F,) + g0.shape)

    target_lif = T.reshape(lif, (B, F, h, w, c))[:, 0]
    pred = lif_decode(target_lif, params, cfg)
    hole = tgt[..., 3:4] > 0.5
    out = T.where(hole, pred, Tensor(np.ascontiguousarray(tgt[..., :3])))
    return T.reshape(out, out.shape[1:]) if single else out
