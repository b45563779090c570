"""Independent conditional flow matching: probability path, objective, training loop and sampling.

The training loop also hosts the eps-prediction (DDPM) objective so the two
objectives share every other hyperparameter and code path.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import codec as codec_mod
from . import diffusion
from . import io
from . import tensor as T
from .codec import FrameVAE, LatentStats
from .diffusion import DDIMConfig, NoiseSchedule
from .optim import EMA, AdamW, WarmupCosine, clip_grad_norm
from .solvers import SolverConfig, SolverError, integrate
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss", "lr", "csi_m_val")


@dataclass(frozen=True)
class CFMConfig:
    sigma: float = 0.01
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.01
    warmup_start_ratio: float = 0.1
    min_lr_ratio: float = 0.01
    grad_clip: float = 1.0
    batch: int = 16
    epochs: int = 10
    ema_decay: float = 0.999
    objective: str = "cfm"
    diffusion_steps: int = 1000
    eval_every: int | None = None  # steps between validation passes; default one epoch
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.objective not in ("cfm", "ddpm"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be positive")


# ------------------------------------------------------------------ path and loss

@dataclass
class FlowSample:
    z_p: np.ndarray
    z_future: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z_t: np.ndarray
    u_t: np.ndarray


def sample_path(z_p, z_future, t, eps, sigma: float = 0.01) -> FlowSample:
    """z_t = (1-t) z_p + t z_future + sigma eps and u_t = z_future - z_p.

    ``t`` is a scalar or one value per leading item.
    """
    z_p, z_future, eps = np.asarray(z_p), np.asarray(z_future), np.asarray(eps)
    if not (z_p.shape == z_future.shape == eps.shape):
        raise ValueError(f"shape mismatch: {z_p.shape}, {z_future.shape}, {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (z_p.ndim - t.ndim)) if t.ndim else t
    z_t = (1 - tb) * z_p + tb * z_future + sigma * eps
    return FlowSample(z_p, z_future, t, eps, z_t.astype(z_p.dtype, copy=False), z_future - z_p)


def cfm_loss(v_hat: Tensor, u_t: Tensor) -> Tensor:
    if v_hat.shape != u_t.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {u_t.shape}")
    return T.mean(T.square(T.sub(v_hat, u_t)))


def ema_update(ema: EMA, params: dict[str, np.ndarray]) -> EMA:
    ema.update(params)
    return ema


# ------------------------------------------------------------------ checkpoints

@dataclass
class Candidate:
    step: int
    score: float
    state: dict


def select_checkpoint(candidates: list[Candidate]) -> Candidate:
    """Highest validation CSI-M; earliest step on ties; NaN scores rank last."""
    if not candidates:
        raise ValueError("no checkpoint candidates to select from")
    best = None
    for c in sorted(candidates, key=lambda c: c.step):
        s = -math.inf if np.isnan(c.score) else c.score
        if best is None or s > best[0]:
            best = (s, c)
    return best[1]


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainResult:
    state: dict
    ema_state: dict
    best: Candidate
    history: list[dict] = field(default_factory=list)
    candidates: list[Candidate] = field(default_factory=list)


def write_log(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(row.get(k)) for k in LOG_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def training_loss(model, x1: np.ndarray, cond, config: CFMConfig, rng: np.random.Generator,
                  schedule: NoiseSchedule | None = None) -> Tensor:
    """One objective evaluation on a batch; must be called inside an active tape to train."""
    b = x1.shape[0]
    dtype = x1.dtype
    cond_t = Tensor(cond) if cond is not None else None
    if config.objective == "cfm":
        z_p = rng.standard_normal(x1.shape).astype(dtype)
        t = rng.uniform(0.0, 1.0, b)
        eps = rng.standard_normal(x1.shape).astype(dtype)
        fs = sample_path(z_p, x1, t, eps, config.sigma)
        v_hat = model(Tensor(fs.z_t), t, cond_t)
        return cfm_loss(v_hat, Tensor(fs.u_t.astype(dtype)))
    steps = rng.integers(1, schedule.T + 1, b)
    eps = rng.standard_normal(x1.shape).astype(dtype)
    x_t = diffusion.q_sample(x1, steps, eps, schedule).astype(dtype)
    eps_hat = model(Tensor(x_t), steps / schedule.T, cond_t)
    return diffusion.ddpm_loss(eps_hat, Tensor(eps))


def train(model, target: np.ndarray, cond: np.ndarray | None = None, config: CFMConfig = CFMConfig(),
          validate: Callable[[dict], float] | None = None, log_path=None, snapshot_dir=None,
          log_every: int = 100) -> TrainResult:
    """Minibatch AdamW on the chosen objective with clipping, warmup-cosine LR and EMA.

    ``target`` holds data latents (N, ...) and ``cond`` the matching conditioning
    (or None). ``validate(ema_state) -> CSI-M`` runs every ``eval_every`` steps
    and at the end; the best EMA state is returned as ``best``.
    """
    n = target.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if cond is not None and cond.shape[0] != n:
        raise ValueError("target and cond disagree on the number of samples")
    rng = np.random.default_rng(config.seed)
    schedule = diffusion.make_schedule(config.diffusion_steps) if config.objective == "ddpm" else None
    steps_per_epoch = math.ceil(n / config.batch)
    total = steps_per_epoch * config.epochs
    eval_every = config.eval_every or steps_per_epoch
    model.train()
    named = model.named_parameters()
    params = list(named.values())
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = WarmupCosine(config.lr, total, config.warmup_fraction, config.warmup_start_ratio, config.min_lr_ratio)
    ema = EMA(model.state_dict(), config.ema_decay)
    history, candidates = [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(steps_per_epoch):
            idx = np.sort(order[i * config.batch:(i + 1) * config.batch])
            lr = sched(step)
            with GradTape() as tape:
                loss = training_loss(model, target[idx], cond[idx] if cond is not None else None,
                                     config, rng, schedule)
            value = loss.item()
            if not np.isfinite(value):
                snap = {"step": step, "epoch": epoch, "loss": value, "lr": lr, "batch": idx.tolist()}
                if snapshot_dir is not None:
                    io.save_state(Path(snapshot_dir) / "nonfinite_weights", model.state_dict())
                    io.write_manifest(Path(snapshot_dir) / "nonfinite.json", snap)
                raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch})", snap)
            tape.backward(loss)
            clip_grad_norm(params, config.grad_clip)
            opt.step(lr)
            opt.zero_grad()
            ema.update({k: p.data for k, p in named.items()})
            row = {"step": step, "epoch": epoch, "loss": value, "lr": lr, "csi_m_val": None}
            step += 1
            if validate is not None and (step % eval_every == 0 or step == total):
                model.eval()
                row["csi_m_val"] = float(validate(ema.state()))
                model.train()
                candidates.append(Candidate(step, row["csi_m_val"], ema.state()))
            history.append(row)
            if log_every and (step - 1) % log_every == 0:
                log.info("%s step %d loss %.5f lr %.2e", config.objective, step - 1, value, lr)
    model.eval()
    if log_path is not None:
        write_log(log_path, history)
    best = select_checkpoint(candidates) if candidates else Candidate(total, float("nan"), ema.state())
    return TrainResult(model.state_dict(), ema.state(), best, history, candidates)


# ------------------------------------------------------------------ sampling

@dataclass
class Codec:
    vae: FrameVAE
    stats: LatentStats


@dataclass
class EnsembleForecast:
    frames: np.ndarray  # (B, N, 12, H, W)
    nfe: np.ndarray  # (B, N) model evaluations per member
    seconds: float  # wall clock for the whole call


def member_noise(seed: int, window_id: int, member: int, shape) -> np.ndarray:
    """Initial noise owned by one (window, member) pair, independent of batching."""
    return np.random.default_rng([seed, window_id, member]).standard_normal(shape)


def encode_past(codec: Codec, x_past: np.ndarray) -> np.ndarray:
    """(B, 13, H, W) frames -> standardized (B, 13, Hz, Wz, C) latents."""
    return codec_mod.standardize(codec_mod.encode_frames(codec.vae, x_past), codec.stats)


def make_field(model, cond: np.ndarray, objective: str = "cfm", schedule: NoiseSchedule | None = None):
    dtype = cond.dtype
    cond_t = Tensor(cond)

    if objective == "cfm":
        def field(z, t):
            return model(Tensor(z.astype(dtype)), np.full(z.shape[0], t), cond_t).data.astype(np.float64)
    else:
        def field(x, t):
            return model(Tensor(x.astype(dtype)), np.full(x.shape[0], t / schedule.T), cond_t).data.astype(np.float64)
    return field


def sample_latents(model, cond: np.ndarray, noise: np.ndarray, sampler, objective: str = "cfm",
                   schedule: NoiseSchedule | None = None) -> tuple[np.ndarray, int]:
    """Integrate one batch of initial states; returns (latents, nfe)."""
    field = make_field(model, cond, objective, schedule)
    if objective == "cfm":
        res = integrate(field, noise, sampler)
        return res.z, res.nfe
    res = diffusion.ddim_sample(field, noise, schedule, sampler)
    return res.x0, res.nfe


def ensemble_forecast(model, codec: Codec, x_past: np.ndarray, n_members: int = 8,
                      sampler: SolverConfig | DDIMConfig = SolverConfig("euler", 10), seed: int = 0,
                      window_ids=None, objective: str = "cfm", schedule: NoiseSchedule | None = None,
                      t_out: int = 12) -> EnsembleForecast:
    """Encode the past once, integrate ``n_members`` noise draws per window, decode and crop."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    if objective == "ddpm" and schedule is None:
        schedule = diffusion.make_schedule()
    x_past = np.asarray(x_past, dtype=np.float32)
    single = x_past.ndim == 3
    if single:
        x_past = x_past[None]
    b = x_past.shape[0]
    ids = np.arange(b) if window_ids is None else np.asarray(window_ids)
    model.eval()
    start = time.perf_counter()
    cond = encode_past(codec, x_past)
    shape = (t_out, *cond.shape[2:])
    adaptive = isinstance(sampler, SolverConfig) and sampler.adaptive
    latents = np.empty((b, n_members, *shape))
    nfe = np.zeros((b, n_members), dtype=np.int64)
    for m in range(n_members):
        noise = np.stack([member_noise(seed, int(w), m, shape) for w in ids])
        try:
            if adaptive:
                # step-size control must not couple windows, so integrate one at a time
                for j in range(b):
                    latents[j, m], nfe[j, m] = sample_latents(model, cond[j:j + 1], noise[j:j + 1],
                                                              sampler, objective, schedule)
            else:
                latents[:, m], nfe[:, m] = sample_latents(model, cond, noise, sampler, objective, schedule)
        except SolverError as exc:
            raise SolverError(f"ensemble member {m}: {exc}") from exc
    z = codec_mod.destandardize(latents.astype(np.float32), codec.stats)
    frames = codec_mod.decode_latents(codec.vae, z, x_past.shape[-2:])
    seconds = time.perf_counter() - start
    if single:
        frames, nfe = frames[0], nfe[0]
    return EnsembleForecast(frames, nfe, seconds)
