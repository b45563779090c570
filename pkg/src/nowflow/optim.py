"""AdamW, global-norm clipping, warmup+cosine learning-rate schedule, EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled weight decay Adam operating in place on ``param.data``."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


@dataclass(frozen=True)
class WarmupCosine:
    """Linear warmup from ``warmup_start_ratio*peak`` to ``peak``, then cosine to ``min_ratio*peak``.

    Step indices run 0..total_steps-1; the last index lands exactly on the floor.
    """

    peak: float
    total_steps: int
    warmup_fraction: float = 0.01
    warmup_start_ratio: float = 0.1
    min_ratio: float = 0.01

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))

    def __call__(self, step: int) -> float:
        w = self.warmup_steps
        last = self.total_steps - 1
        if step < w and step < last:
            frac = step / w
            return self.peak * (self.warmup_start_ratio + (1.0 - self.warmup_start_ratio) * frac)
        if last <= w:
            return self.peak * self.min_ratio if step >= last else self.peak
        progress = min(1.0, (step - w) / (last - w))
        floor = self.peak * self.min_ratio
        return floor + (self.peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class EMA:
    """Shadow copy of parameters; ``shadow <- decay*shadow + (1-decay)*params``."""

    def __init__(self, params: dict[str, np.ndarray], decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {k: np.array(v, copy=True) for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray]) -> None:
        if params.keys() != self.shadow.keys():
            raise KeyError("EMA parameter names do not match")
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            if s.shape != p.shape:
                raise ValueError(f"{k}: EMA shape {s.shape} != {p.shape}")
            if d == 1.0:
                continue
            if d == 0.0:
                s[...] = p
            else:
                s *= d
                s += (1.0 - d) * p

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.shadow.items()}

