"""Frame-wise VAE with replication padding/cropping and latent standardization."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .nn import Conv2d, Module
from .optim import AdamW, WarmupCosine, clip_grad_norm
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    kl_weight: float = 1e-4
    widths: tuple[int, ...] = (16, 32, 64)
    pad_multiple: int = 16
    # training
    lr: float = 2e-3
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.2
    warmup_start_ratio: float = 0.1
    min_lr_ratio: float = 1e-3
    grad_clip: float = 1.0
    batch_size: int = 32
    steps: int = 1500

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        if 2 ** len(self.widths) != f:
            raise ValueError("one stride-2 stage per factor of two in downsample_factor")


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("latent std must be positive in every channel")


# ------------------------------------------------------------------ padding

def pad_replicate(frame: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Pad the last two axes up to multiples of ``multiple`` by repeating the bottom/right edge."""
    h, w = frame.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return frame, (h, w)
    widths = [(0, 0)] * (frame.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(frame, widths, mode="edge"), (h, w)


def crop(field: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    if h > field.shape[-2] or w > field.shape[-1]:
        raise ValueError(f"crop dims {dims} exceed field extents {field.shape[-2:]}")
    return field[..., :h, :w]


# ------------------------------------------------------------------ model

class FrameVAE(Module):
    """Stride-2 conv encoder ``widths`` deep, mirrored nearest-upsample + conv decoder."""

    def __init__(self, config: CodecConfig = CodecConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        c = config.latent_channels
        chans = (1, *config.widths)
        self.down = [Conv2d(chans[i], chans[i + 1], rng, stride=2, dtype=dtype) for i in range(len(config.widths))]
        self.mid = Conv2d(chans[-1], chans[-1], rng, dtype=dtype)
        self.mu_head = Conv2d(chans[-1], c, rng, dtype=dtype)
        self.logvar_head = Conv2d(chans[-1], c, rng, dtype=dtype)
        # decoder widths mirror the encoder; the full-resolution stage is halved again
        rev = (*config.widths[::-1], max(config.widths[0] // 2, 1))
        self.dec_in = Conv2d(c, rev[0], rng, dtype=dtype)
        self.up = [Conv2d(rev[i], rev[i + 1], rng, dtype=dtype) for i in range(len(config.widths))]
        self.out = Conv2d(rev[-1], 1, rng, dtype=dtype)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(N, H, W) padded frames -> (N, H/8, W/8, C) mean and log-variance."""
        m = self.config.pad_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"encode expects frames padded to a multiple of {m}, got {x.shape[-2:]}")
        n, h, w = x.shape
        hcur = T.reshape(x, (n, 1, h, w))
        for conv in self.down:
            hcur = T.silu(conv(hcur))
        hcur = T.silu(self.mid(hcur))
        mu = T.transpose(self.mu_head(hcur), (0, 2, 3, 1))
        logvar = T.transpose(self.logvar_head(hcur), (0, 2, 3, 1))
        return mu, logvar

    def decode(self, z: Tensor, clamp: bool = True) -> Tensor:
        """(N, Hz, Wz, C) latents -> (N, 8*Hz, 8*Wz) frames, clamped to [0, 1] unless ``clamp`` is False."""
        if z.ndim != 4 or z.shape[-1] != self.config.latent_channels:
            raise ValueError(f"decode expects (N, Hz, Wz, {self.config.latent_channels}), got {z.shape}")
        hcur = T.silu(self.dec_in(T.transpose(z, (0, 3, 1, 2))))
        for conv in self.up:
            hcur = T.silu(conv(T.upsample2(hcur)))
        y = self.out(hcur)
        n, _, h, w = y.shape
        y = T.reshape(y, (n, h, w))
        return T.clip(y, 0.0, 1.0) if clamp else y

    def forward(self, x: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, Tensor(noise.astype(mu.dtype)))
        return self.decode(z, clamp=False), mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
    if not (mu.shape == logvar.shape == noise.shape):
        raise ValueError(f"shape mismatch: {mu.shape}, {logvar.shape}, {noise.shape}")
    return T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), noise))


def kl_term(mu: Tensor, logvar: Tensor) -> Tensor:
    """Elementwise mean of 0.5*(mu^2 + exp(logvar) - 1 - logvar)."""
    per = T.sub(T.add(T.square(mu), T.exp(logvar)), T.add(logvar, 1.0))
    return T.scale(T.mean(per), 0.5)


def vae_loss(recon: Tensor, target: Tensor, mu: Tensor, logvar: Tensor, kl_weight: float = 1e-4) -> Tensor:
    l1 = T.mean(T.abs(T.sub(recon, target)))
    return T.add(l1, T.scale(kl_term(mu, logvar), kl_weight))


# ------------------------------------------------------------------ stats

def compute_latent_stats(latents: np.ndarray) -> LatentStats:
    """Per-channel mean/std over every axis but the last."""
    flat = latents.reshape(-1, latents.shape[-1]).astype(np.float64)
    std = flat.std(axis=0)
    return LatentStats(flat.mean(axis=0), np.where(std > 0, std, 1.0))


def standardize(latents: np.ndarray, stats: LatentStats) -> np.ndarray:
    return ((latents - stats.mean) / stats.std).astype(latents.dtype)


def destandardize(latents: np.ndarray, stats: LatentStats) -> np.ndarray:
    return (latents * stats.std + stats.mean).astype(latents.dtype)


# ------------------------------------------------------------------ numpy-facing helpers

def encode_frames(vae: FrameVAE, frames: np.ndarray, batch: int = 256) -> np.ndarray:
    """Posterior means for frames of shape (..., H, W); pads as needed."""
    lead = frames.shape[:-2]
    padded, _ = pad_replicate(frames.reshape(-1, *frames.shape[-2:]), vae.config.pad_multiple)
    dtype = vae.mu_head.weight.dtype
    out = []
    for i in range(0, padded.shape[0], batch):
        mu, _ = vae.encode(Tensor(padded[i:i + batch].astype(dtype)))
        out.append(mu.data)
    mu = np.concatenate(out, axis=0)
    return mu.reshape(*lead, *mu.shape[1:])


def decode_latents(vae: FrameVAE, latents: np.ndarray, dims: tuple[int, int] | None = None,
                   batch: int = 256) -> np.ndarray:
    """Decode (..., Hz, Wz, C) latents to clamped frames, cropped to ``dims`` when given."""
    lead = latents.shape[:-3]
    flat = latents.reshape(-1, *latents.shape[-3:])
    dtype = vae.mu_head.weight.dtype
    out = [vae.decode(Tensor(flat[i:i + batch].astype(dtype))).data for i in range(0, flat.shape[0], batch)]
    frames = np.concatenate(out, axis=0)
    frames = frames.reshape(*lead, *frames.shape[1:])
    return crop(frames, dims) if dims is not None else frames


def train_vae(frames: np.ndarray, config: CodecConfig = CodecConfig(), seed: int = 0,
              log_every: int = 100) -> tuple[FrameVAE, list[dict]]:
    """Fit the VAE on (N, H, W) frames with L1 + KL; returns the model and a step log."""
    frames, _ = pad_replicate(np.asarray(frames, dtype=np.float32), config.pad_multiple)
    rng = np.random.default_rng(seed)
    vae = FrameVAE(config, seed=seed).train()
    params = vae.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = WarmupCosine(config.lr, config.steps, config.warmup_fraction,
                         config.warmup_start_ratio, config.min_lr_ratio)
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, frames.shape[0], config.batch_size)
        x = Tensor(frames[idx])
        with GradTape() as tape:
            n, h, w = x.shape
            f = config.downsample_factor
            noise = rng.standard_normal((n, h // f, w // f, config.latent_channels)).astype(np.float32)
            recon, mu, logvar = vae(x, noise)
            loss = vae_loss(recon, x, mu, logvar, config.kl_weight)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"VAE loss became non-finite at step {step}")
        tape.backward(loss)
        clip_grad_norm(params, config.grad_clip)
        lr = sched(step)
        opt.step(lr)
        opt.zero_grad()
        history.append({"step": step, "loss": value, "lr": lr})
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f lr %.2e", step, value, lr)
    return vae.eval(), history


def reconstruction_mae(vae: FrameVAE, frames: np.ndarray) -> float:
    recon = decode_latents(vae, encode_frames(vae, frames), frames.shape[-2:])
    return float(np.mean(np.abs(recon - frames)))


# ------------------------------------------------------------------ persistence

def save_codec(directory, vae: FrameVAE, stats: LatentStats | None, seed: int, steps: int,
               epochs: float, extra: dict | None = None) -> dict:
    directory = Path(directory)
    names = io.save_state(directory / "weights", vae.state_dict())
    manifest = {"kind": "vae", "config": asdict(vae.config), "seed": seed, "steps": steps,
                "epochs": epochs, "parameters": names}
    if stats is not None:
        io.save_tensor(directory / "latent_mean.fct", stats.mean)
        io.save_tensor(directory / "latent_std.fct", stats.std)
        manifest["stats"] = ["latent_mean.fct", "latent_std.fct"]
    manifest.update(extra or {})
    io.write_manifest(directory / "manifest.json", manifest)
    return manifest


def load_codec(directory) -> tuple[FrameVAE, LatentStats | None, dict]:
    directory = Path(directory)
    manifest = io.read_manifest(directory / "manifest.json")
    cfg = dict(manifest["config"])
    cfg["widths"] = tuple(cfg["widths"])
    vae = FrameVAE(CodecConfig(**cfg))
    vae.load_state_dict(io.load_state(directory / "weights", manifest["parameters"]))
    stats = None
    if "stats" in manifest:
        stats = LatentStats(io.load_tensor(directory / "latent_mean.fct"),
                            io.load_tensor(directory / "latent_std.fct"))
    return vae.eval(), stats, manifest
