"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param.data``.

    When ``indices`` is given only those entries are perturbed; the rest of
    the returned array is NaN.
    """
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    flat_idx = indices if indices is not None else list(np.ndindex(param.shape))
    for idx in flat_idx:
        orig = param.data[idx]
        param.data[idx] = orig + h
        fp = float(loss_fn().data)
        param.data[idx] = orig - h
        fm = float(loss_fn().data)
        param.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max|a-n| / max(max|a|, max|n|, floor)`` over the finite entries of ``numeric``.

    The floor sits above central-difference roundoff (~eps*|loss|/h), so a
    gradient that is exactly zero by symmetry is not scored against noise.
    """
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    denom = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Relative error per parameter (keyed by position in ``params``).

    ``max_entries`` caps how many coordinates of each parameter are probed;
    they are chosen with ``rng`` and always include the largest-gradient entry.
    """
    grads = analytic_grads(loss_fn, params)
    errors = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        indices = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=max_entries - 1, replace=False).tolist()
            flat.append(int(np.argmax(np.abs(g))))
            indices = [np.unravel_index(k, p.shape) for k in flat]
        num = numerical_grad(loss_fn, p, h, indices)
        errors[i] = relative_error(g, num)
    return errors
