"""Gaussian test problems with closed-form optimal vector fields and eps-predictors.

Everything is built on one helper, the conditional mean of a jointly Gaussian
pair, applied per coordinate (the toy covariance is isotropic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, Parameter
from .tensor import Tensor


@dataclass(frozen=True)
class GaussianToy:
    """Target N(m, s^2 I) with a standard normal prior."""

    m: tuple[float, ...] = (2.0, -1.0)
    s: float = 0.5

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"target std must be positive, got {self.s}")

    @property
    def dim(self) -> int:
        return len(self.m)

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.m, dtype=np.float64)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.s * rng.standard_normal((n, self.dim))


def gaussian_conditional_mean(mean_a, mean_b, cov_ab, var_b, b):
    """E[a | b] = mean_a + cov_ab / var_b * (b - mean_b) for jointly Gaussian scalars (broadcast)."""
    return mean_a + cov_ab / var_b * (b - mean_b)


def _time(t, z):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (np.ndim(z) - t.ndim)) if t.ndim else t


def optimal_cfm_field(z, t, toy: GaussianToy, sigma: float = 0.0) -> np.ndarray:
    """E[x1 - x0 | x_t = z] for x_t = (1-t) x0 + t x1 + sigma*eps, x0 ~ N(0, I), x1 ~ N(m, s^2 I)."""
    z = np.asarray(z, dtype=np.float64)
    t = _time(t, z)
    s2 = toy.s ** 2
    var_xt = (1 - t) ** 2 + t ** 2 * s2 + sigma ** 2
    cov = t * s2 - (1 - t)
    return gaussian_conditional_mean(toy.mean, t * toy.mean, cov, var_xt, z)


def optimal_eps_predictor(x_t, alpha_bar, toy: GaussianToy) -> np.ndarray:
    """E[eps | x_t] for x_t = sqrt(ab) x0 + sqrt(1-ab) eps with x0 ~ N(m, s^2 I)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _time(alpha_bar, x_t)
    var_xt = ab * toy.s ** 2 + (1 - ab)
    return gaussian_conditional_mean(0.0, np.sqrt(ab) * toy.mean, np.sqrt(1 - ab), var_xt, x_t)


def hat_basis(t, n_basis: int) -> np.ndarray:
    """Piecewise-linear hat functions on a uniform knot grid over [0, 1]; rows sum to 1."""
    t = np.clip(np.atleast_1d(np.asarray(t, dtype=np.float64)), 0.0, 1.0)
    knots = np.linspace(0.0, 1.0, n_basis)
    width = knots[1] - knots[0]
    return np.maximum(0.0, 1.0 - np.abs(t[:, None] - knots[None, :]) / width)


class TimeLinearField(Module):
    """v(z, t) = sum_k phi_k(t) (W_k z + b_k): affine in z, piecewise linear in t.

    The optimal field of a Gaussian toy is affine in z, so this model class
    contains it up to the time discretisation.
    """

    def __init__(self, dim: int, n_basis: int = 11, dtype=np.float64):
        self.dim = dim
        self.n_basis = n_basis
        self.weight = Parameter(np.zeros((dim, n_basis * dim)), dtype)
        self.bias = Parameter(np.zeros((n_basis, dim)), dtype)

    def forward(self, z: Tensor, t, cond=None) -> Tensor:
        b = z.shape[0]
        k, d = self.n_basis, self.dim
        phi = hat_basis(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)), k).astype(z.dtype)
        per = T.reshape(T.matmul(z, self.weight), (b, k, d))
        per = T.add(per, T.expand(T.reshape(self.bias, (1, k, d)), (b, k, d)))
        weights = Tensor(np.broadcast_to(phi[:, :, None], (b, k, d)).copy())
        return T.sum(T.mul(per, weights), axis=1)
