"""2-D Fourier transforms and the fast-Fourier-convolution residual block.

The transform is an iterative radix-2 Cooley-Tukey FFT. Extents that are not
powers of two are zero-padded up to the next power before the forward
transform, and the inverse crops back to the recorded size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_op


class ConfigError(ValueError):
    pass


class ImaginaryResidualError(ArithmeticError):
    """ifft2 of a supposedly real signal left a significant imaginary part."""


# ---------------------------------------------------------------------------
# numeric core


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(half: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(half) / (2 * half))


def _complex_dtype(dt) -> np.dtype:
    return np.dtype(np.complex64) if np.dtype(dt) in (np.float32, np.complex64) else np.dtype(np.complex128)


def fft_axis(a: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    """Unnormalised 1-D DFT along ``axis``; length must be a power of two.

    Single-precision input stays in complex64, everything else runs in
    complex128.
    """
    a = np.asarray(a)
    cdt = _complex_dtype(a.dtype)
    axis = axis % a.ndim
    n = a.shape[axis]
    if n & (n - 1):
        raise ValueError(f"fft length {n} is not a power of two")
    moved = np.moveaxis(a, axis, 0)
    rest = moved.shape[1:]
    # transform axis first, everything else flattened and contiguous
    x = moved.reshape(n, -1)[_bit_reverse(n)].astype(cdt)
    r = x.shape[1]
    size = 2
    while size <= n:
        half = size // 2
        w = _twiddles(half).astype(cdt)
        if inverse:
            w = np.conj(w)
        blocks = x.reshape(n // size, size, r)
        even = blocks[:, :half]
        odd = blocks[:, half:] * w[None, :, None]
        out = np.empty_like(blocks)
        np.add(even, odd, out=out[:, :half])
        np.subtract(even, odd, out=out[:, half:])
        x = out.reshape(n, r)
        size *= 2
    return np.moveaxis(x.reshape((n,) + rest), 0, axis)


def _fft2_array(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised transform over the H, W axes of ``...×H×W×c``."""
    return fft_axis(fft_axis(x, -2, inverse), -3, inverse)


def _pad_pow2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-3:-1]
    ph, pw = _next_pow2(h), _next_pow2(w)
    if (ph, pw) == (h, w):
        return x
    pad = [(0, 0)] * x.ndim
    pad[-3] = (0, ph - h)
    pad[-2] = (0, pw - w)
    return np.pad(x, pad)


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Direct double sum F[u,v] = Σ_y Σ_x x[y,x]·exp(-2πi(uy/H + vx/W)).

    O((H·W)²); kept as the reference the FFT is tested against.
    """
    x = np.asarray(x)
    h, w = x.shape[-3:-1]
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    vs = np.arange(w)[:, None, None]
    out = np.empty(x.shape[:-3] + (h, w, x.shape[-1]), dtype=np.complex128)
    for u in range(h):
        # phase[v, y, x]
        phase = np.exp(-2j * np.pi * (u * ys / h + vs * xs / w))
        out[..., u, :, :] = np.einsum("vyx,...yxc->...vc", phase, x)
    return out


# ---------------------------------------------------------------------------
# differentiable transforms


def spectral_forward(x) -> Tensor:
    """``...×H×W×c`` real map to ``...×H'×W'×2c`` (real channels, then imag).

    H', W' are the power-of-two padded extents.
    """
    x = T.tensor(x)
    h, w = x.shape[-3:-1]
    xp = _pad_pow2(x.data)
    hp, wp = xp.shape[-3:-1]
    f = _fft2_array(xp)
    c = x.shape[-1]
    out = np.concatenate([f.real, f.imag], axis=-1).astype(x.dtype)

    def backward(g):
        # adjoint of Re/Im of the DFT: Re(conj(F) (gR + i gI)), F symmetric
        z = g[..., :c] + 1j * g[..., c:]
        gx = _fft2_array(z, inverse=True).real.astype(g.dtype)
        return (gx[..., :h, :w, :],)

    return make_op("fft2", out, (x,), backward)


def spectral_inverse(z, out_hw=None, check_real: bool = False, tol: float = 1e-5) -> Tensor:
    """Inverse of :func:`spectral_forward`: real part of the normalised inverse
    DFT, cropped to ``out_hw``.

    With ``check_real`` an imaginary residual above ``tol`` (relative to the
    signal magnitude) raises :class:`ImaginaryResidualError`.
    """
    z = T.tensor(z)
    c = z.shape[-1] // 2
    hp, wp = z.shape[-3:-1]
    h, w = out_hw or (hp, wp)
    n = hp * wp
    full = _fft2_array(z.data[..., :c] + 1j * z.data[..., c:], inverse=True) / n
    if check_real:
        resid = np.abs(full.imag).max(initial=0.0)
        ref = max(1.0, np.abs(full.real).max(initial=0.0))
        if resid > tol * ref:
            raise ImaginaryResidualError(f"imaginary residual {resid:.3g} exceeds {tol:g}")
    out = full.real[..., :h, :w, :].astype(z.dtype)

    def backward(g):
        gp = np.zeros(g.shape[:-3] + (hp, wp, c), dtype=g.dtype)
        gp[..., :h, :w, :] = g
        t = _fft2_array(gp, inverse=True) / n
        return (np.concatenate([t.real, -t.imag], axis=-1).astype(g.dtype),)

    return make_op("ifft2", out, (z,), backward)


@dataclass
class ComplexMap:
    real: Tensor
    imag: Tensor
    size: tuple  # spatial extents of the signal before padding

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def fft2(x) -> ComplexMap:
    x = T.tensor(x)
    z = spectral_forward(x)
    c = x.shape[-1]
    return ComplexMap(z[..., :c], z[..., c:], tuple(x.shape[-3:-1]))


def ifft2(f: ComplexMap, check_real: bool = True, tol: float = 1e-5) -> Tensor:
    z = T.concat([f.real, f.imag], axis=-1)
    return spectral_inverse(z, f.size, check_real=check_real, tol=tol)


# ---------------------------------------------------------------------------
# FFC residual block


def ffc_param_shapes(c: int) -> dict:
    if c % 2:
        raise ConfigError(f"FFC needs an even channel count, got {c}")
    h = c // 2
    return {
        "l2l.w": (3, 3, h, h),
        "l2l.b": (h,),
        "g2l.w": (h, h),
        "l2g.w": (h, h),
        "spec.w": (2 * h, 2 * h),
        "spec.b": (2 * h,),
        "proj.w": (c, c),
        "proj.b": (c,),
    }


def ffc_resblock(x, params: dict, prefix: str = "") -> Tensor:
    """Fast-Fourier-convolution residual block on ``...×H×W×c``.

    The first half of the channels is the local branch (3×3 conv), the second
    half the global branch (1×1 conv + GELU in the orthonormally scaled
    frequency domain). The halves exchange information through 1×1 convs and
    the fused result is projected and added back onto the input.
    """
    x = T.tensor(x)
    c = x.shape[-1]
    if c % 2:
        raise ConfigError(f"FFC needs an even channel count, got {c}")
    p = lambda k: params[prefix + k]  # noqa: E731
    h = c // 2
    xl, xg = x[..., :h], x[..., h:]

    hh, ww = x.shape[-3:-1]
    norm = float(np.sqrt(_next_pow2(hh) * _next_pow2(ww)))
    freq = T.scale(spectral_forward(xg), 1.0 / norm)
    freq = T.gelu(T.linear(freq, p("spec.w"), p("spec.b")))
    glob = spectral_inverse(T.scale(freq, norm), (hh, ww))

    yl = T.add(T.conv2d(xl, p("l2l.w"), p("l2l.b"), stride=1, pad=1), T.matmul(xg, p("g2l.w")))
    yg = T.add(glob, T.matmul(xl, p("l2g.w")))
    fused = T.gelu(T.concat([yl, yg], axis=-1))
    return T.add(x, T.linear(fused, p("proj.w"), p("proj.b")))
