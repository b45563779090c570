"""DDPM noise schedule, forward process, eps-MSE objective and deterministic DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .solvers import SolverError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is the clean state (alpha_bar = 1); indices 1..T are diffusion steps."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t)]


@dataclass(frozen=True)
class DDIMConfig:
    sample_steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 2e-2, spacing: str = "linear") -> NoiseSchedule:
    if spacing != "linear":
        raise ValueError(f"unsupported beta spacing {spacing!r}")
    if T < 1 or not (0 < beta_1 < 1 and 0 < beta_T < 1) or (T > 1 and not beta_1 < beta_T):
        raise ValueError(f"invalid schedule endpoints beta_1={beta_1}, beta_T={beta_T}, T={T}")
    betas = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    return t


def _bcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` is a scalar or one index per leading item."""
    ab = _bcast(schedule.alpha_bar(_check_t(t, schedule)), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, alpha_bar) -> np.ndarray:
    ab = _bcast(np.asarray(alpha_bar, dtype=np.float64), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_loss(eps_hat: Tensor, eps: Tensor) -> Tensor:
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    return T.mean(T.square(T.sub(eps_hat, eps)))


def timestep_sequence(T_: int, steps: int) -> np.ndarray:
    """Uniformly spaced integers from T_ down to 1, deduplicated, strictly decreasing."""
    if steps < 1 or steps > T_:
        raise ValueError(f"sample_steps must be in [1, {T_}]")
    seq = np.unique(np.round(np.linspace(1, T_, steps)).astype(int))[::-1]
    if steps == 1:
        seq = np.array([T_])
    return seq


@dataclass
class DDIMResult:
    x0: np.ndarray
    nfe: int


def ddim_sample(eps_model: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray,
                schedule: NoiseSchedule, config: DDIMConfig = DDIMConfig()) -> DDIMResult:
    """Deterministic DDIM from x_T down to the clean state; one model call per subsequence entry.

    ``eps_model(x_t, t)`` receives the integer timestep.
    """
    seq = timestep_sequence(schedule.T, config.sample_steps)
    x = np.array(x_T, copy=True)
    for i, t in enumerate(seq):
        t_next = seq[i + 1] if i + 1 < len(seq) else 0
        eps_hat = eps_model(x, int(t))
        x0_hat = predict_x0(x, eps_hat, schedule.alpha_bars[t])
        ab_next = schedule.alpha_bars[t_next]
        x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite DDIM state at step {i} (t={t})")
    return DDIMResult(x, len(seq))
