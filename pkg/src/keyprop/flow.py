"""Flow fields, bilinear warping, forward-backward consistency, masked-flow
infill and flow resizing.

A flow ``phi`` is an ``H×W×2`` array of pixel offsets ordered ``(dx, dy)``;
target pixel ``p = (x, y)`` corresponds to source position ``p + phi(p)``.
Sampling clamps to the border everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, make_op

JACOBI_TOL = 1e-4
JACOBI_MAX_ITERS = 10_000


@dataclass
class FlowField:
    offsets: np.ndarray  # H×W×2, (dx, dy) in pixels of this resolution
    degenerate: bool = False

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets)
        if self.offsets.ndim != 3 or self.offsets.shape[-1] != 2:
            raise DimensionError(f"flow must be H×W×2, got {self.offsets.shape}")

    @property
    def resolution(self) -> tuple:
        return self.offsets.shape[:2]

    def positions(self) -> np.ndarray:
        return pixel_grid(*self.resolution, self.offsets.dtype) + self.offsets


def pixel_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """``H×W×2`` array of ``(x, y)`` pixel coordinates."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([xs, ys], axis=-1)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(feat, positions) -> Tensor:
    """Sample ``feat[...×H×W×c]`` at continuous ``positions[...×H'×W'×2]``.

    Differentiable in both arguments. Positions outside the map are clamped to
    the border, where the positional gradient is zero.
    """
    feat, positions = T.tensor(feat), T.tensor(positions)
    f = feat.data
    pos = positions.data
    if f.ndim < 3 or pos.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: feat {f.shape}, positions {pos.shape}")
    if f.shape[:-3] != pos.shape[:-3]:
        raise DimensionError(f"bilinear_sample: batch extents differ {f.shape} vs {pos.shape}")
    h, w, c = f.shape[-3:]
    lead = f.shape[:-3]
    n = int(np.prod(lead, dtype=np.int64))
    ff = f.reshape(n, h * w, c)
    ho, wo = pos.shape[-3:-1]
    pf = pos.reshape(n, ho * wo, 2)

    px = np.clip(pf[..., 0], 0, w - 1)
    py = np.clip(pf[..., 1], 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0).astype(f.dtype)[..., None]
    wy = (py - y0).astype(f.dtype)[..., None]
    bidx = np.arange(n)[:, None]
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    f00, f01, f10, f11 = ff[bidx, i00], ff[bidx, i01], ff[bidx, i10], ff[bidx, i11]
    top = (1 - wx) * f00 + wx * f01
    bot = (1 - wx) * f10 + wx * f11
    out = (1 - wy) * top + wy * bot

    def backward(g):
        g = g.reshape(n, ho * wo, c)
        gf = gp = None
        if feat.requires_grad:
            acc = np.zeros((n * h * w, c), dtype=g.dtype)
            base = (np.arange(n) * (h * w))[:, None]
            for idx, wgt in (
                (i00, (1 - wy) * (1 - wx)),
                (i01, (1 - wy) * wx),
                (i10, wy * (1 - wx)),
                (i11, wy * wx),
            ):
                np.add.at(acc, (base + idx).ravel(), (g * wgt).reshape(-1, c))
            gf = acc.reshape(f.shape)
        if positions.requires_grad:
            inx = ((pf[..., 0] >= 0) & (pf[..., 0] <= w - 1)).astype(g.dtype)
            iny = ((pf[..., 1] >= 0) & (pf[..., 1] <= h - 1)).astype(g.dtype)
            dvx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
            dvy = bot - top
            gx = (g * dvx).sum(-1) * inx
            gy = (g * dvy).sum(-1) * iny
            gp = np.stack([gx, gy], axis=-1).reshape(pos.shape).astype(pos.dtype)
        return gf, gp

    return make_op("bilinear_sample", out.reshape(lead + (ho, wo, c)), (feat, positions), backward)


def warp(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward warp: ``out(p) = image(p + flow(p))``."""
    with T.no_grad():
        return bilinear_sample(image, flow.positions().astype(np.asarray(image).dtype)).data


# ---------------------------------------------------------------------------
# consistency, infill, resizing


def fb_consistency(fwd: FlowField, bwd: FlowField) -> Tensor:
    """Per-pixel ``‖fwd(p) + bwd(p + fwd(p))‖₂`` as ``H×W×1``."""
    if fwd.resolution != bwd.resolution:
        raise DimensionError(f"fb_consistency: resolutions {fwd.resolution} vs {bwd.resolution}")
    back = warp(bwd.offsets, fwd)
    resid = fwd.offsets + back
    return Tensor(np.sqrt((resid**2).sum(-1, keepdims=True)))


def _jacobi(u: np.ndarray, unknown: np.ndarray, tol: float, max_iters: int) -> tuple:
    """4-neighbour Jacobi relaxation of the Laplace equation on ``unknown``
    pixels with Neumann image borders. Returns (field, iterations)."""
    if not unknown.any():
        return u, 0
    u = u.copy()
    sel = unknown[..., 0]
    for it in range(1, max_iters + 1):
        p = np.pad(u, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = ((p[:-2, 1:-1] + p[2:, 1:-1]) + (p[1:-1, :-2] + p[1:-1, 2:])) * 0.25
        change = np.abs(avg[sel] - u[sel]).max()
        u[sel] = avg[sel]
        if change < tol:
            return u, it
    return u, max_iters


def _coarse_guess(u: np.ndarray, unknown: np.ndarray, tol: float) -> np.ndarray:
    """Initial values for unknown pixels from a recursively solved half-size
    problem. Injection in both directions keeps constant fields exact."""
    h, w = unknown.shape[:2]
    known = ~unknown[..., 0]
    if min(h, w) <= 4:
        fill = u[known][0]
        out = u.copy()
        out[~known] = fill
        return out
    hc, wc = (h + 1) // 2, (w + 1) // 2
    cu = np.zeros((hc, wc, u.shape[-1]), dtype=u.dtype)
    cknown = np.zeros((hc, wc), dtype=bool)
    # first known fine pixel of each 2×2 cell (scan order) defines the cell
    for dy in (1, 0):
        for dx in (1, 0):
            sub_k = known[dy::2, dx::2]
            sub_u = u[dy::2, dx::2]
            hs, ws = sub_k.shape
            cu[:hs, :ws][sub_k] = sub_u[sub_k]
            cknown[:hs, :ws] |= sub_k
    cunknown = ~cknown[..., None]
    cu = _coarse_guess(cu, cunknown, tol) if cunknown.any() else cu
    cu, _ = _jacobi(cu, cunknown, tol, JACOBI_MAX_ITERS)
    up = np.repeat(np.repeat(cu, 2, axis=0), 2, axis=1)[:h, :w]
    out = u.copy()
    out[~known] = up[~known]
    return out


def _neighbour_sum(v: np.ndarray) -> np.ndarray:
    p = np.pad(v, ((1, 1), (1, 1)))
    return (p[:-2, 1:-1] + p[2:, 1:-1]) + (p[1:-1, :-2] + p[1:-1, 2:])


def _conjugate_gradient(u: np.ndarray, unknown: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Solve the same masked Laplace system as :func:`_jacobi` to ``rtol``.

    With out-of-image neighbours dropped (the Neumann condition) the operator
    is a graph Laplacian restricted to the hole, which is SPD whenever every
    hole component touches a known pixel.
    """
    sel = unknown[..., 0]
    h, w = sel.shape
    n_in = _neighbour_sum(np.ones((h, w)))[sel]
    u = u.copy()

    def apply(v):
        full = np.zeros((h, w))
        full[sel] = v
        return n_in * v - _neighbour_sum(full)[sel]

    for ch in range(u.shape[-1]):
        known = np.where(sel, 0.0, u[..., ch])
        b = _neighbour_sum(known)[sel]
        x = u[..., ch][sel]
        r = b - apply(x)
        stop = rtol * max(np.linalg.norm(b), 1e-300)
        rr = r @ r
        if np.sqrt(rr) <= stop:
            continue
        d = r.copy()
        for _ in range(4 * x.size + 100):
            ad = apply(d)
            alpha = rr / (d @ ad)
            x += alpha * d
            r -= alpha * ad
            rr_new = r @ r
            if np.sqrt(rr_new) <= stop:
                break
            d = r + (rr_new / rr) * d
            rr = rr_new
        u[..., ch][sel] = x
    return u


def fill_masked_flow(flow: FlowField, mask, tol: float = JACOBI_TOL, max_iters: int = JACOBI_MAX_ITERS) -> FlowField:
    """Replace flow under ``mask == 1`` by its harmonic extension.

    Known entries are left untouched. The solution is warm-started from a
    coarse-to-fine estimate, converged with conjugate gradients, and finished
    with 4-neighbour Jacobi sweeps until the largest per-iteration change drops
    below ``tol`` pixels. An all-hole mask yields zero flow with
    ``degenerate=True``.
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if mask.ndim == 2:
        mask = mask[..., None]
    if mask.shape[:2] != flow.resolution:
        raise DimensionError(f"mask {mask.shape} vs flow {flow.offsets.shape}")
    unknown = mask > 0.5
    if not unknown.any():
        return FlowField(flow.offsets.copy())
    if unknown.all():
        return FlowField(np.zeros_like(flow.offsets), degenerate=True)
    u = flow.offsets.astype(np.float64)
    u = _coarse_guess(u, unknown, tol)
    u = _conjugate_gradient(u, unknown)
    u, _ = _jacobi(u, unknown, tol, max_iters)
    out = np.where(unknown, u, flow.offsets).astype(flow.offsets.dtype)
    return FlowField(out)


def resize_map(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize of ``...×H×W×c`` using pixel-centre alignment."""
    x = np.asarray(x)
    h, w = x.shape[-3:-1]
    if (h, w) == (new_h, new_w):
        return x.copy()
    ys = (np.arange(new_h, dtype=np.float64) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w, dtype=np.float64) + 0.5) * (w / new_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pos = np.stack([gx, gy], axis=-1).astype(x.dtype)
    pos = np.broadcast_to(pos, x.shape[:-3] + pos.shape)
    with T.no_grad():
        return bilinear_sample(x, np.ascontiguousarray(pos)).data


def resize_flow(flow: FlowField, new_h: int, new_w: int) -> FlowField:
    """Bilinear resize, then rescale offsets into the new pixel units."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"resize_flow: target extents must be positive, got {(new_h, new_w)}")
    h, w = flow.resolution
    if (h, w) == (new_h, new_w):
        return FlowField(flow.offsets.copy())
    out = resize_map(flow.offsets, new_h, new_w)
    out[..., 0] *= new_w / w
    out[..., 1] *= new_h / h
    return FlowField(out)


def affine_flow(A, h: int, w: int, dtype=np.float64) -> tuple:
    """Forward/backward flows of ``p -> A·(p, 1)``."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (2, 3):
        raise ValueError(f"affine matrix must be 2×3, got {A.shape}")
    lin = A[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("affine transform has a singular linear part")
    inv_lin = np.linalg.inv(lin)
    inv = np.concatenate([inv_lin, -inv_lin @ A[:, 2:]], axis=1)
    grid = pixel_grid(h, w)
    fwd = grid @ A[:, :2].T + A[:, 2] - grid
    bwd = grid @ inv[:, :2].T + inv[:, 2] - grid
    return FlowField(fwd.astype(dtype)), FlowField(bwd.astype(dtype))


def valid_region(flow: FlowField, margin: float = 2.0) -> np.ndarray:
    """Pixels at least ``margin`` from the border whose target position also
    lands at least ``margin`` inside the source frame."""
    h, w = flow.resolution
    pos = flow.positions()
    grid = pixel_grid(h, w)
    inside = lambda q: (  # noqa: E731
        (q[..., 0] >= margin) & (q[..., 0] <= w - 1 - margin) & (q[..., 1] >= margin) & (q[..., 1] <= h - 1 - margin)
    )
    return inside(grid) & inside(pos)


def degrade_flow(flow: FlowField, sigma: float, rng: np.random.Generator, mask=None) -> FlowField:
    """Add white noise of standard deviation ``sigma`` px outside ``mask``.

    Uniform noise is used so the result is platform independent.
    """
    if sigma <= 0:
        return FlowField(flow.offsets.copy())
    half = sigma * np.sqrt(3.0)
    noise = rng.uniform(-half, half, size=flow.offsets.shape)
    if mask is not None:
        noise = noise * (np.asarray(mask) < 0.5)
    return FlowField((flow.offsets + noise).astype(flow.offsets.dtype))

