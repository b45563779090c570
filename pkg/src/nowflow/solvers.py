"""Fixed-step and embedded-pair adaptive integrators for dz/dt = f(z, t) on [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FIXED = ("euler", "midpoint", "rk4")
ADAPTIVE = ("dopri5", "adaptive_heun")
EVALS_PER_STEP = {"euler": 1, "midpoint": 2, "rk4": 4}

Field = Callable[[np.ndarray, float], np.ndarray]


class SolverError(RuntimeError):
    """Integration failed: non-finite state, step underflow, or NFE budget exhausted."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    steps: int = 10
    rtol: float = 1e-2
    atol: float = 1e-3
    max_nfe: int = 10_000
    initial_step: float = 1e-2
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    min_step: float = 1e-10

    def __post_init__(self):
        if self.method not in FIXED + ADAPTIVE:
            raise ValueError(f"unknown solver method {self.method!r}; choose from {FIXED + ADAPTIVE}")
        if self.method in FIXED and self.steps < 1:
            raise ValueError("fixed-step methods need steps >= 1")
        if self.method in ADAPTIVE and (self.rtol <= 0 or self.atol <= 0):
            raise ValueError("adaptive methods need rtol > 0 and atol > 0")

    @property
    def adaptive(self) -> bool:
        return self.method in ADAPTIVE


@dataclass
class IntegrationResult:
    z: np.ndarray
    nfe: int
    accepted: int = 0
    rejected: int = 0


def _check(z: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise SolverError(f"non-finite state after step {step}")


def integrate_fixed(field: Field, z0: np.ndarray, config: SolverConfig) -> IntegrationResult:
    """Uniform grid t_i = i/steps; classical Euler, midpoint or RK4 updates."""
    if config.method not in FIXED:
        raise ValueError(f"{config.method} is not a fixed-step method")
    n = config.steps
    dt = 1.0 / n
    z = np.array(z0, copy=True)
    nfe = 0
    for i in range(n):
        t = i / n
        if config.method == "euler":
            z = z + dt * field(z, t)
        elif config.method == "midpoint":
            k1 = field(z, t)
            z = z + dt * field(z + 0.5 * dt * k1, t + 0.5 * dt)
        else:
            k1 = field(z, t)
            k2 = field(z + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = field(z + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = field(z + dt * k3, t + dt)
            z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        nfe += EVALS_PER_STEP[config.method]
        _check(z, i)
    return IntegrationResult(z, nfe, accepted=n)


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_step(field, z, t, h, k1):
    """One DP5(4) trial; returns (z_new, err, k_last, evals). Uses FSAL for the next k1."""
    ks = [k1]
    for i in range(1, 7):
        zi = z + h * sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0.0)
        ks.append(field(zi, t + _DP_C[i] * h))
    z_new = z + h * sum(b * k for b, k in zip(_DP_B5, ks) if b != 0.0)
    err = h * sum((b5 - b4) * k for b5, b4, k in zip(_DP_B5, _DP_B4, ks) if b5 != b4)
    return z_new, err, ks[-1], 6


def _heun_step(field, z, t, h, k1):
    """Euler predictor / trapezoid corrector pair; error is their difference."""
    k2 = field(z + h * k1, t + h)
    z_new = z + 0.5 * h * (k1 + k2)
    err = 0.5 * h * (k2 - k1)
    return z_new, err, None, 1


def error_norm(err: np.ndarray, z: np.ndarray, z_new: np.ndarray, rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_adaptive(field: Field, z0: np.ndarray, config: SolverConfig) -> IntegrationResult:
    """Error-controlled integration from t=0 to exactly t=1."""
    if config.method not in ADAPTIVE:
        raise ValueError(f"{config.method} is not an adaptive method")
    step_fn = _dopri_step if config.method == "dopri5" else _heun_step
    exponent = 1 / 5 if config.method == "dopri5" else 1 / 2
    z = np.array(z0, copy=True)
    t, h = 0.0, config.initial_step
    k1 = field(z, t)
    nfe, accepted, rejected = 1, 0, 0
    while t < 1.0:
        if h < config.min_step:
            raise SolverError(f"step size underflow ({h:.3e}) at t={t:.6f}")
        if nfe > config.max_nfe:
            raise SolverError(f"exceeded max_nfe={config.max_nfe} at t={t:.6f}")
        last = t + h >= 1.0
        if last:
            h = 1.0 - t
        z_new, err, k_last, evals = step_fn(field, z, t, h, k1)
        nfe += evals
        e = error_norm(err, z, z_new, config.rtol, config.atol)
        if not np.isfinite(e):
            e = np.inf
        if e <= 1.0:
            t = 1.0 if last else t + h
            z = z_new
            _check(z, accepted)
            accepted += 1
            if t < 1.0:
                if k_last is not None:
                    k1 = k_last
                else:
                    k1 = field(z, t)
                    nfe += 1
        else:
            rejected += 1
        factor = config.max_factor if e == 0 else config.safety * e ** (-exponent)
        h *= min(config.max_factor, max(config.min_factor, factor))
    return IntegrationResult(z, nfe, accepted, rejected)


def integrate(field: Field, z0: np.ndarray, config: SolverConfig) -> IntegrationResult:
    if config.adaptive:
        return integrate_adaptive(field, z0, config)
    return integrate_fixed(field, z0, config)
