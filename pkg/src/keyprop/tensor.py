"""Dense float tensors with a recorded graph for reverse-mode differentiation.

Feature maps are channels-last (``...×H×W×c``). Any leading dimensions are
treated as batch dimensions by the spatial and matrix operations, so a stack
of frames can go through one graph.

Broadcasting is deliberately limited: elementwise operations accept either two
tensors of identical shape or a tensor and a scalar. Everything else must be
aligned explicitly with :func:`broadcast_to`, :func:`reshape` or
:func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "DimensionError",
    "GraphError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "set_check_finite",
    "make_op",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "gelu",
    "absolute",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "broadcast_to",
    "getitem",
    "where",
    "matmul",
    "add_bias",
    "linear",
    "softmax",
    "layer_norm",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
]


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the recording graph (non-scalar loss, consumed graph...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()
_check_finite = os.environ.get("KEYPROP_CHECK_FINITE", "1") != "0"


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def set_check_finite(flag: bool) -> bool:
    """Toggle the NaN/Inf assertion on every op; returns the previous value."""
    global _check_finite
    prev, _check_finite = _check_finite, bool(flag)
    return prev


class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("op", "inputs", "backward", "consumed")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise DimensionError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation -----------------------------------------------
    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Without ``retain_graph`` the recorded nodes are released afterwards and
        a second call raises :class:`GraphError`.
        """
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")
        if self.node is None:
            if not self.requires_grad:
                raise GraphError("tensor is not part of a recorded graph")
            _accumulate(self, grad)
            return
        if self.node.consumed:
            raise GraphError("graph already consumed; pass retain_graph=True to backward twice")

        order = _topological_order(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                _accumulate(t, g)
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        if not retain_graph:
            for t in order:
                if t.node is not None:
                    t.node.consumed = True
                    t.node.backward = _consumed


def _consumed(g):
    raise GraphError("graph already consumed")


def _accumulate(leaf: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=leaf.dtype)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def _topological_order(root: Tensor) -> list:
    """Reverse-postorder DFS; inputs precede consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


# ---------------------------------------------------------------------------
# op construction


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward(g)`` must return one gradient (or None) per input. Other modules
    (flow sampling, spectral transforms) register their differentiable
    primitives through this function.
    """
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


def tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _unreduce(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _pair(a, b, op: str):
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = tensor(a)
        return make_op("add", a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = _pair(a, b, "add")
    return make_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unreduce(g, a.shape), _unreduce(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unreduce(g * bd, a.shape), _unreduce(g * ad, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return make_op("gelu", y, (a,), backward)


def absolute(a) -> Tensor:
    a = tensor(a)
    s = np.sign(a.data)
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * s,))


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "gelu": gelu, "scale": scale}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``sigmoid``, ``gelu``, ``scale``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return make_op(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    return make_op("concat", data, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    axis = axis % (ts[0].ndim + 1)
    data = np.stack([t.data for t in ts], axis=axis)
    return make_op(
        "stack",
        data,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the only place broadcasting happens."""
    a = tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise DimensionError(f"broadcast_to: {e}") from None
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_op("broadcast_to", data, (a,), backward)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing only."""
    a = tensor(a)
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (int, slice, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("only basic indexing is differentiable")
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return make_op("getitem", np.ascontiguousarray(a.data[idx]), (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``. ``cond`` is constant data and may
    broadcast against the operands, which must share a shape."""
    a, b = _pair(a, b, "where")
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return make_op(
        "where",
        np.where(c, a.data, b.data),
        (a, b),
        lambda g: (np.where(c, g, 0.0).astype(g.dtype), np.where(c, 0.0, g).astype(g.dtype)),
    )


# ---------------------------------------------------------------------------
# matrix products and normalisation


def matmul(a, b) -> Tensor:
    """``a[...×m×k] @ b[k×n]`` or ``a[...×m×k] @ b[...×k×n]`` with equal batch dims."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return make_op("matmul", np.matmul(ad, bd), (a, b), backward)


def add_bias(x, bias) -> Tensor:
    """Add a vector along the last axis."""
    x, bias = tensor(x), tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias {bias.shape} does not match last axis of {x.shape}")
    n = bias.shape[0]
    return make_op(
        "add_bias",
        x.data + bias.data,
        (x, bias),
        lambda g: (g, g.reshape(-1, n).sum(axis=0)),
    )


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs last axis {d}")
    xd = x.data
    # statistics accumulate in 64-bit regardless of storage precision
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(xd.dtype)
    inv = inv.astype(xd.dtype)
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return make_op("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding, channels-last)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _flatten_batch(x: np.ndarray):
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, ::stride, ::stride]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _conv_fwd(x, k, stride, pad):
    kh, kw = k.shape[:2]
    win = _windows(_pad(x, pad), kh, kw, stride)
    return np.tensordot(win, k, axes=([3, 4, 5], [2, 0, 1]))


def _conv_dx(g, k, stride, pad, in_hw):
    """Adjoint of :func:`_conv_fwd` with respect to its input."""
    kh, kw, cin, _ = k.shape
    n, ho, wo, _ = g.shape
    h, w = in_hw
    gk = np.tensordot(g, k, axes=([3], [3]))  # n×ho×wo×kh×kw×cin
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((n, max(hp, (ho - 1) * stride + kh), max(wp, (wo - 1) * stride + kw), cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gk[:, :, :, i, j]
    return dxp[:, pad : pad + h, pad : pad + w]


def _conv_dk(x, g, stride, pad, kh, kw):
    win = _windows(_pad(x, pad), kh, kw, stride)
    ho, wo = g.shape[1:3]
    win = win[:, :ho, :wo]
    return np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)


def _conv_args(x, k, stride, pad, op):
    if stride < 1 or pad < 0:
        raise ValueError(f"{op}: stride must be >= 1 and pad >= 0")
    if k.ndim != 4:
        raise DimensionError(f"{op}: kernel must be kh×kw×cin×cout, got {k.shape}")
    if x.ndim < 3:
        raise DimensionError(f"{op}: input must be [...×]H×W×c, got {x.shape}")


def conv2d(x, k, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """``x[...×H×W×cin]`` cross-correlated with ``k[kh×kw×cin×cout]``."""
    x, k = tensor(x), tensor(k)
    _conv_args(x, k, stride, pad, "conv2d")
    kh, kw, cin, cout = k.shape
    h, w, c = x.shape[-3:]
    if c != cin:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {k.shape}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {k.shape[:2]} larger than padded input {x.shape} (pad {pad})")
    xf, lead = _flatten_batch(x.data)
    kd = k.data
    out = _conv_fwd(xf, kd, stride, pad)
    oshape = lead + out.shape[1:]

    def backward(g):
        gf = g.reshape((-1,) + g.shape[-3:])
        gx = _conv_dx(gf, kd, stride, pad, (h, w)).reshape(x.shape) if x.requires_grad else None
        gk = _conv_dk(xf, gf, stride, pad, kh, kw) if k.requires_grad else None
        return gx, gk

    y = make_op("conv2d", out.reshape(oshape), (x, k), backward)
    return y if bias is None else add_bias(y, bias)


def conv_transpose2d(x, k, bias=None, stride: int = 1, pad: int = 0, output_size=None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``(k, stride, pad)``.

    Maps ``...×H'×W'×cout`` to ``...×H×W×cin`` where by default
    ``H = (H'-1)·stride - 2·pad + kh``; ``output_size`` selects another ``H``
    that conv2d would map to ``H'``.
    """
    x, k = tensor(x), tensor(k)
    _conv_args(x, k, stride, pad, "conv_transpose2d")
    kh, kw, cin, cout = k.shape
    ho, wo, c = x.shape[-3:]
    if c != cout:
        raise DimensionError(f"conv_transpose2d: input channels {x.shape} vs kernel {k.shape}")
    if output_size is None:
        h, w = (ho - 1) * stride - 2 * pad + kh, (wo - 1) * stride - 2 * pad + kw
    else:
        h, w = output_size
    if h < 1 or w < 1 or conv_output_size(h, kh, stride, pad) != ho or conv_output_size(w, kw, stride, pad) != wo:
        raise DimensionError(f"conv_transpose2d: output size {(h, w)} inconsistent with input {x.shape}")
    xf, lead = _flatten_batch(x.data)
    kd = k.data
    out = _conv_dx(xf, kd, stride, pad, (h, w))

    def backward(g):
        gf = g.reshape((-1,) + g.shape[-3:])
        gx = _conv_fwd(gf, kd, stride, pad).reshape(x.shape) if x.requires_grad else None
        gk = _conv_dk(gf, xf, stride, pad, kh, kw) if k.requires_grad else None
        return gx, gk

    y = make_op("conv_transpose2d", out.reshape(lead + out.shape[1:]), (x, k), backward)
    return y if bias is None else add_bias(y, bias)
