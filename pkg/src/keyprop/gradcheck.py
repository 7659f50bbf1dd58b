"""Central finite differences as an independent oracle for ``backward``."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def finite_diff_grad(f: Callable, x: Tensor, eps: float = 1e-5, coords=None) -> Tensor:
    """Estimate df/dx with ``(f(x+eps·e) - f(x-eps·e)) / (2·eps)`` per coordinate.

    ``f`` is called with ``x`` (perturbed in place) and must return a scalar.
    ``coords`` restricts the estimate to a subset of flat indices; the others
    are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(x.shape).astype(x.dtype))


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``fn()`` w.r.t. ``inputs`` against finite
    differences and return the worst relative error.

    With ``max_coords`` the comparison uses a random subset of at most that many
    coordinates per input.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = finite_diff_grad(lambda _: fn(), t, eps, coords).data
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, rel_error(analytic, numeric))
    return worst
