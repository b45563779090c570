"""Synthetic radar-like events: advecting Gaussian blobs on a periodic grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LAG = 13
LEAD = 12
WINDOW = LAG + LEAD
TIMESTEP_MINUTES = 5


@dataclass(frozen=True)
class EventConfig:
    """One synthetic event.

    ``velocity`` holds per-blob ``(vx, vy)`` in pixels/frame, where ``vx``
    moves along columns and ``vy`` along rows. When ``velocity`` is None the
    blobs share a seeded steering vector plus small jitter.
    """

    grid: tuple[int, int] = (32, 32)
    frames_per_event: int = WINDOW
    n_blobs: int | None = None
    velocity: tuple[tuple[float, float], ...] | None = None
    growth_rate: float | None = None
    seed: int = 0
    sigma_range: tuple[float, float] = (2.0, 4.0)
    amplitude_range: tuple[float, float] = (0.3, 1.0)
    speed_range: tuple[float, float] = (0.5, 1.5)
    growth_range: tuple[float, float] = (0.96, 1.04)

    def __post_init__(self):
        if self.frames_per_event < WINDOW:
            raise ValueError(f"frames_per_event must be at least {WINDOW}")
        if self.n_blobs is not None and self.n_blobs < 1:
            raise ValueError("n_blobs must be positive")
        if self.velocity is not None and self.n_blobs is not None and len(self.velocity) != self.n_blobs:
            raise ValueError("need one velocity per blob")


@dataclass
class RadarSequence:
    frames: np.ndarray
    timestep_minutes: int = TIMESTEP_MINUTES

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be T x H x W, got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class SampleWindow:
    past: np.ndarray
    future: np.ndarray
    start: int = 0
    event_index: int = -1

    def __post_init__(self):
        if self.past.shape[0] != LAG or self.future.shape[0] != LEAD:
            raise ValueError(f"window needs {LAG} past and {LEAD} future frames")


@dataclass
class _Blob:
    center: np.ndarray
    sigma: float
    amplitude: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _draw_blobs(cfg: EventConfig, rng: np.random.Generator) -> tuple[list[_Blob], float]:
    h, w = cfg.grid
    n = cfg.n_blobs if cfg.n_blobs is not None else int(rng.integers(1, 5))
    if cfg.velocity is not None and len(cfg.velocity) != n:
        raise ValueError("need one velocity per blob")
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(0.0, 2 * np.pi)
    steer = speed * np.array([np.cos(heading), np.sin(heading)])
    blobs = []
    for i in range(n):
        center = rng.uniform(0.0, 1.0, 2) * np.array([w, h])
        sigma = rng.uniform(*cfg.sigma_range)
        amp = rng.uniform(*cfg.amplitude_range)
        jitter = rng.uniform(-0.2, 0.2, 2)
        vel = np.asarray(cfg.velocity[i], dtype=float) if cfg.velocity is not None else steer + jitter
        blobs.append(_Blob(center, sigma, amp, vel))
    growth = cfg.growth_rate if cfg.growth_rate is not None else rng.uniform(*cfg.growth_range)
    return blobs, float(growth)


def _render(blobs: Sequence[_Blob], k: int, growth: float, grid: tuple[int, int]) -> np.ndarray:
    h, w = grid
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    frame = np.zeros((h, w))
    gain = growth ** k
    for b in blobs:
        cx = (b.center[0] + b.velocity[0] * k) % w
        cy = (b.center[1] + b.velocity[1] * k) % h
        # minimal periodic image distance
        dx = (cols - cx + w / 2) % w - w / 2
        dy = (rows - cy + h / 2) % h - h / 2
        g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * b.sigma ** 2))
        frame += b.amplitude * gain * g
    return np.clip(frame, 0.0, 1.0)


def generate_event(config: EventConfig) -> RadarSequence:
    """Render ``config.frames_per_event`` frames; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    blobs, growth = _draw_blobs(config, rng)
    frames = np.stack([_render(blobs, k, growth, config.grid) for k in range(config.frames_per_event)])
    return RadarSequence(frames.astype(np.float32))


def generate_events(n_events: int, seed: int, **overrides) -> list[RadarSequence]:
    if n_events < 1:
        raise ValueError("n_events must be at least 1")
    seeds = np.random.SeedSequence(seed).generate_state(n_events, dtype=np.uint64)
    return [generate_event(EventConfig(seed=int(s), **overrides)) for s in seeds]


def extract_windows(event: RadarSequence, stride: int, event_index: int = -1) -> list[SampleWindow]:
    """Consecutive 13+12 frame windows starting at 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError("stride must be positive")
    frames = event.frames
    out = []
    for start in range(0, frames.shape[0] - WINDOW + 1, stride):
        out.append(SampleWindow(frames[start:start + LAG], frames[start + LAG:start + WINDOW], start, event_index))
    return out


def window_count(length: int, stride: int) -> int:
    return 0 if length < WINDOW else (length - WINDOW) // stride + 1


def split_sizes(n: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Val and test get ``floor(ratio*n)``; train takes the remainder."""
    if n < 1:
        raise ValueError("cannot split an empty event list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_chronological(events: Sequence, ratios: Sequence[float] = (0.6, 0.2, 0.2)):
    """Partition in generation order: (train, val, test)."""
    n_train, n_val, _ = split_sizes(len(events), ratios)
    events = list(events)
    return events[:n_train], events[n_train:n_train + n_val], events[n_train + n_val:]


def stack_windows(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 13, H, W) past and (N, 12, H, W) future arrays."""
    return np.stack([w.past for w in windows]), np.stack([w.future for w in windows])
