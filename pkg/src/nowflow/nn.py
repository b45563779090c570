"""Minimal module system on top of :mod:`nowflow.tensor`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def Parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Holds parameters and submodules as attributes, discovered in definition order."""

    training = False

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, dtype=np.float32):
        bound = 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero_init else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = Parameter(w, dtype)
        self.bias = Parameter(np.zeros(d_out), dtype) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, self.d_in)), self.weight)
        if self.bias is not None:
            y = y + T.expand(self.bias, y.shape)
        return T.reshape(y, (*lead, self.d_out))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim), dtype)
        self.beta = Parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        y = T.layer_norm(x, self.eps)
        return y * T.expand(self.gamma, x.shape) + T.expand(self.beta, x.shape)


class Conv2d(Module):
    """3x3 'same' convolution on (..., C, H, W) inputs, optional stride 2."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1,
                 zero_init: bool = False, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        bound = 1.0 / np.sqrt(c_in * 9)
        k = np.zeros((c_out, c_in, 3, 3)) if zero_init else rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
        self.weight = Parameter(k, dtype)
        self.bias = Parameter(np.zeros((c_out, 1, 1)), dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight)
        if self.stride == 2:
            y = T.downsample2(y)
        return y + T.expand(self.bias, y.shape)
