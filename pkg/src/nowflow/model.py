"""Time-conditioned vector field network over latent sequences.

A two-level U-shape: axial self-attention blocks at latent resolution, one
patch-merge downsample, blocks at half resolution, nearest upsample + conv,
additive skip, blocks, zero-initialised output projection. Flow time enters
every block through a residual fusion block.

Latent tensors are laid out (B, T, H, W, C).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    base_dim: int = 32
    time_embed_multiplier: int = 4
    attn_heads: int = 4
    dropout: float = 0.1
    depth: int = 1
    ffn_multiplier: int = 2
    t_in: int = 13
    t_out: int = 12
    latent_channels: int = 4
    latent_hw: tuple[int, int] = (4, 4)
    zero_init_output: bool = True

    def __post_init__(self):
        if self.base_dim % self.attn_heads:
            raise ValueError("base_dim must be divisible by attn_heads")
        if self.base_dim % 2:
            raise ValueError("base_dim must be even for the sinusoidal time embedding")
        if any(s % 2 for s in self.latent_hw):
            raise ValueError("latent extents must be even for the patch-merge stage")


def time_frequencies(dim: int) -> np.ndarray:
    """``dim/2`` frequencies spaced geometrically from 1 to 1e4."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return np.power(1e4, np.arange(half) / (half - 1))


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """(B,) flow times -> (B, dim) = [sin(t*w), cos(t*w)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ang = t[:, None] * time_frequencies(dim)[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimeEmbedding(Module):
    def __init__(self, dim: int, out_dim: int, rng, dtype=np.float32):
        self.dim = dim
        self.fc1 = Linear(dim, out_dim, rng, dtype=dtype)
        self.fc2 = Linear(out_dim, out_dim, rng, dtype=dtype)

    def forward(self, t) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self.dim).astype(self.fc1.weight.dtype))
        return self.fc2(T.silu(self.fc1(emb)))


class TimeEmbedResBlock(Module):
    """x + W2(drop(silu(W1(LN x) + Wt(silu(temb)))))."""

    def __init__(self, dim: int, temb_dim: int, dropout: float, rng, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim, rng, dtype=dtype)
        self.temb = Linear(temb_dim, dim, rng, dtype=dtype)
        self.fc2 = Linear(dim, dim, rng, dtype=dtype)
        self.dropout = dropout
        self.rng = rng

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        b = x.shape[0]
        h = self.fc1(self.norm(x))
        e = self.temb(T.silu(temb))
        e = T.expand(T.reshape(e, (b,) + (1,) * (x.ndim - 2) + (e.shape[-1],)), h.shape)
        h = T.silu(T.add(h, e))
        h = T.dropout(h, self.dropout, self.rng, self.training)
        return T.add(x, self.fc2(h))


class AxialAttention(Module):
    """Multi-head self-attention along T, then H, then W, each pre-normed with a residual."""

    AXES = (1, 2, 3)

    def __init__(self, dim: int, heads: int, dropout: float, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.dropout = dropout
        self.rng = rng
        self.norms = [LayerNorm(dim, dtype=dtype) for _ in self.AXES]
        self.q = [Linear(dim, dim, rng, dtype=dtype) for _ in self.AXES]
        self.k = [Linear(dim, dim, rng, dtype=dtype) for _ in self.AXES]
        self.v = [Linear(dim, dim, rng, dtype=dtype) for _ in self.AXES]
        self.proj = [Linear(dim, dim, rng, dtype=dtype) for _ in self.AXES]
        self.last_weights: dict[int, np.ndarray] = {}

    def _attend(self, x: Tensor, i: int) -> Tensor:
        """Self-attention over axis ``-2`` of a (N, L, D) tensor."""
        n, length, d = x.shape
        h, dh = self.heads, d // self.heads

        def heads(t):
            return T.reshape(T.transpose(T.reshape(t, (n, length, h, dh)), (0, 2, 1, 3)), (n * h, length, dh))

        q, k, v = heads(self.q[i](x)), heads(self.k[i](x)), heads(self.v[i](x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        w = T.softmax(scores, axis=-1)
        self.last_weights[self.AXES[i]] = w.data
        w = T.dropout(w, self.dropout, self.rng, self.training)
        out = T.matmul(w, v)
        out = T.reshape(T.transpose(T.reshape(out, (n, h, length, dh)), (0, 2, 1, 3)), (n, length, d))
        return T.dropout(self.proj[i](out), self.dropout, self.rng, self.training)

    def forward(self, x: Tensor) -> Tensor:
        for i, axis in enumerate(self.AXES):
            perm = [a for a in range(x.ndim) if a != axis and a != x.ndim - 1] + [axis, x.ndim - 1]
            inv = tuple(np.argsort(perm))
            moved = T.transpose(x, perm) if perm != list(range(x.ndim)) else x
            flat = T.reshape(self.norms[i](moved), (-1, moved.shape[-2], moved.shape[-1]))
            upd = T.reshape(self._attend(flat, i), moved.shape)
            upd = T.transpose(upd, inv) if perm != list(range(x.ndim)) else upd
            x = T.add(x, upd)
        return x


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, dropout: float, rng, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * mult, rng, dtype=dtype)
        self.fc2 = Linear(dim * mult, dim, rng, dtype=dtype)
        self.dropout = dropout
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc1(self.norm(x)))
        h = T.dropout(self.fc2(h), self.dropout, self.rng, self.training)
        return T.add(x, h)


class Block(Module):
    def __init__(self, dim: int, temb_dim: int, cfg: ModelConfig, rng, dtype=np.float32):
        self.time = TimeEmbedResBlock(dim, temb_dim, cfg.dropout, rng, dtype)
        self.attn = AxialAttention(dim, cfg.attn_heads, cfg.dropout, rng, dtype)
        self.ffn = FeedForward(dim, cfg.ffn_multiplier, cfg.dropout, rng, dtype)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        return self.ffn(self.attn(self.time(x, temb)))


class VectorFieldNet(Module):
    """v(z_t, t, z_past) with output shaped like z_t."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.rng = rng
        d, c = config.base_dim, config.latent_channels
        temb = d * config.time_embed_multiplier
        hz, wz = config.latent_hw
        self.past_proj = Linear(config.t_in, config.t_out, rng, dtype=dtype)
        self.stem = Linear(2 * c, d, rng, dtype=dtype)
        self.pos_t = Parameter(rng.normal(0, 0.02, (config.t_out, 1, 1, d)), dtype)
        self.pos_h = Parameter(rng.normal(0, 0.02, (1, hz, 1, d)), dtype)
        self.pos_w = Parameter(rng.normal(0, 0.02, (1, 1, wz, d)), dtype)
        self.time_embed = TimeEmbedding(d, temb, rng, dtype)
        self.enc = [Block(d, temb, config, rng, dtype) for _ in range(config.depth)]
        self.merge_norm = LayerNorm(4 * d, dtype=dtype)
        self.merge = Linear(4 * d, 2 * d, rng, dtype=dtype)
        self.mid = [Block(2 * d, temb, config, rng, dtype) for _ in range(config.depth)]
        self.up_conv = Conv2d(2 * d, d, rng, dtype=dtype)
        self.dec = [Block(d, temb, config, rng, dtype) for _ in range(config.depth)]
        self.out_norm = LayerNorm(d, dtype=dtype)
        self.out = Linear(d, c, rng, zero_init=config.zero_init_output, dtype=dtype)

    def _condition(self, z_past: Tensor) -> Tensor:
        """Learned 13 -> 12 temporal mixing of the past latents."""
        moved = T.transpose(z_past, (0, 2, 3, 4, 1))
        return T.transpose(self.past_proj(moved), (0, 4, 1, 2, 3))

    def _patch_merge(self, x: Tensor) -> Tensor:
        b, t, h, w, d = x.shape
        x = T.reshape(x, (b, t, h // 2, 2, w // 2, 2, d))
        x = T.transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = T.reshape(x, (b, t, h // 2, w // 2, 4 * d))
        return self.merge(self.merge_norm(x))

    def _upsample(self, x: Tensor) -> Tensor:
        b, t, h, w, d = x.shape
        y = T.transpose(T.reshape(x, (b * t, h, w, d)), (0, 3, 1, 2))
        y = self.up_conv(T.upsample2(y))
        return T.reshape(T.transpose(y, (0, 2, 3, 1)), (b, t, 2 * h, 2 * w, y.shape[1]))

    def forward(self, z_t: Tensor, t, z_past: Tensor) -> Tensor:
        cfg = self.config
        if z_t.ndim == 4:
            return T.reshape(self.forward(T.reshape(z_t, (1, *z_t.shape)), t,
                                          T.reshape(z_past, (1, *z_past.shape))), z_t.shape)
        b = z_t.shape[0]
        if z_t.shape[1] != cfg.t_out or z_past.shape[1] != cfg.t_in:
            raise ValueError(f"expected {cfg.t_out} noisy and {cfg.t_in} past frames, "
                             f"got {z_t.shape[1]} and {z_past.shape[1]}")
        if z_t.shape[2:] != z_past.shape[2:] or tuple(z_t.shape[2:4]) != tuple(cfg.latent_hw):
            raise ValueError(f"latent extents disagree: z_t {z_t.shape}, z_past {z_past.shape}, config {cfg.latent_hw}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = self.time_embed(t)
        x = T.concat([z_t, self._condition(z_past)], axis=-1)
        x = self.stem(x)
        pos = T.add(T.add(T.expand(self.pos_t, x.shape[1:]), T.expand(self.pos_h, x.shape[1:])),
                    T.expand(self.pos_w, x.shape[1:]))
        x = T.add(x, T.expand(pos, x.shape))
        for blk in self.enc:
            x = blk(x, temb)
        skip = x
        h = self._patch_merge(x)
        for blk in self.mid:
            h = blk(h, temb)
        x = T.add(self._upsample(h), skip)
        for blk in self.dec:
            x = blk(x, temb)
        return self.out(self.out_norm(x))


def save_model(directory, model: VectorFieldNet, extra: dict | None = None, state: dict | None = None,
               subdir: str = "weights") -> dict:
    directory = Path(directory)
    names = io.save_state(directory / subdir, state if state is not None else model.state_dict())
    manifest = {"config": asdict(model.config), "parameters": names}
    manifest.update(extra or {})
    return manifest


def model_from_config(cfg: dict, dtype=np.float32) -> VectorFieldNet:
    cfg = dict(cfg)
    cfg["latent_hw"] = tuple(cfg["latent_hw"])
    return VectorFieldNet(ModelConfig(**cfg), dtype=dtype)


def load_weights(directory, names, model: VectorFieldNet, subdir: str = "weights") -> VectorFieldNet:
    model.load_state_dict(io.load_state(Path(directory) / subdir, names))
    return model
