"""End-to-end stages shared by the command line and the acceptance suite.

Each stage is a plain function over in-memory objects plus a pair of
save/load helpers, so the CLI only handles argument plumbing and manifests.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import data as data_mod
from . import io
from . import metrics
from .cfm import CFMConfig, Codec, TrainResult, ensemble_forecast, train, write_log
from .codec import CodecConfig
from .diffusion import DDIMConfig, make_schedule
from .model import ModelConfig, VectorFieldNet
from .solvers import SolverConfig

log = logging.getLogger(__name__)

NFE_SWEEP = (1, 2, 3, 5, 10, 20, 50)
SOLVER_SWEEP = (("euler", 10), ("midpoint", 10), ("rk4", 10), ("dopri5", None), ("adaptive_heun", None))


class MissingArtifact(FileNotFoundError):
    """A prerequisite checkpoint or dataset is absent."""


# ------------------------------------------------------------------ data

@dataclass(frozen=True)
class DataConfig:
    n_events: int = 200
    frames_per_event: int = 49
    stride: int = 6
    seed: int = 0
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    grid: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.n_events < 1:
            raise ValueError("n_events must be at least 1")
        if self.stride < 1:
            raise ValueError("stride must be positive")


@dataclass
class Dataset:
    events: list
    split_events: dict  # split -> list of event indices
    windows: dict  # split -> (past, future, window ids)
    window_table: list = field(default_factory=list)  # (id, event, start, split)

    def split(self, name: str):
        return self.windows[name]


def build_dataset(cfg: DataConfig) -> Dataset:
    events = data_mod.generate_events(cfg.n_events, cfg.seed, frames_per_event=cfg.frames_per_event, grid=cfg.grid)
    n_train, n_val, _ = data_mod.split_sizes(len(events), cfg.ratios)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, len(events))}
    windows, table, next_id = {}, [], 0
    split_events = {}
    for name, (lo, hi) in bounds.items():
        split_events[name] = list(range(lo, hi))
        wins = [w for e in range(lo, hi) for w in data_mod.extract_windows(events[e], cfg.stride, e)]
        ids = np.arange(next_id, next_id + len(wins))
        next_id += len(wins)
        table += [(int(i), w.event_index, w.start, name) for i, w in zip(ids, wins)]
        if wins:
            past, future = data_mod.stack_windows(wins)
        else:
            past = np.zeros((0, data_mod.LAG, *cfg.grid), np.float32)
            future = np.zeros((0, data_mod.LEAD, *cfg.grid), np.float32)
        windows[name] = (past, future, ids)
    return Dataset(events, split_events, windows, table)


def save_dataset(ds: Dataset, directory, cfg: DataConfig) -> dict:
    directory = Path(directory)
    files = {}
    for i, ev in enumerate(ds.events):
        rel = f"events/event_{i:05d}.fct"
        io.save_tensor(directory / rel, ev.frames)
        files[rel] = io.file_sha256(directory / rel)
    for name in ("train", "val", "test"):
        past, future, ids = ds.windows[name]
        for j, wid in enumerate(ids):
            rel = f"windows/window_{wid:05d}.fct"
            io.save_tensor(directory / rel, np.concatenate([past[j], future[j]]))
            files[rel] = io.file_sha256(directory / rel)
        rel = f"splits/{name}.fct"
        io.save_tensor(directory / rel, np.asarray(ds.split_events[name], dtype=np.float64))
        files[rel] = io.file_sha256(directory / rel)
    manifest = {"kind": "dataset", "config": asdict(cfg), "files": files,
                "splits": {k: len(v) for k, v in ds.split_events.items()},
                "windows": [list(row) for row in ds.window_table]}
    io.write_manifest(directory / "manifest.json", manifest)
    return manifest


def load_dataset(directory) -> tuple[Dataset, dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"dataset manifest not found: {path}")
    manifest = io.read_manifest(path)
    cfg = manifest["config"]
    grid = tuple(cfg["grid"])
    events = [data_mod.RadarSequence(io.load_tensor(directory / f"events/event_{i:05d}.fct"))
              for i in range(cfg["n_events"])]
    split_events = {n: [int(v) for v in io.load_tensor(directory / f"splits/{n}.fct")]
                    for n in ("train", "val", "test")}
    windows = {}
    for name in ("train", "val", "test"):
        rows = [r for r in manifest["windows"] if r[3] == name]
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        stacked = [io.load_tensor(directory / f"windows/window_{i:05d}.fct") for i in ids]
        if stacked:
            arr = np.stack(stacked)
            windows[name] = (arr[:, :data_mod.LAG], arr[:, data_mod.LAG:], ids)
        else:
            windows[name] = (np.zeros((0, data_mod.LAG, *grid), np.float32),
                             np.zeros((0, data_mod.LEAD, *grid), np.float32), ids)
    table = [tuple(r) for r in manifest["windows"]]
    return Dataset(events, split_events, windows, table), manifest


def subset_indices(n: int, fraction: float | None, seed: int) -> np.ndarray:
    """Seeded, sorted subset of ``ceil(fraction*n)`` indices (all when fraction is None or 1)."""
    if fraction is None or fraction >= 1.0:
        return np.arange(n)
    if not 0 < fraction:
        raise ValueError("subset fraction must be in (0, 1]")
    k = max(1, int(np.ceil(fraction * n)))
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


# ------------------------------------------------------------------ codec stage

def train_codec_stage(ds: Dataset, cfg: CodecConfig, seed: int) -> tuple[Codec, list[dict]]:
    """Fit the VAE on every frame of the training events; latent stats from their posterior means."""
    frames = np.concatenate([ds.events[e].frames for e in ds.split_events["train"]])
    vae, history = codec_mod.train_vae(frames, cfg, seed=seed, log_every=0)
    stats = codec_mod.compute_latent_stats(codec_mod.encode_frames(vae, frames))
    return Codec(vae, stats), history


def save_codec_stage(directory, codec: Codec, cfg: CodecConfig, seed: int, history, n_frames: int,
                     parent: dict) -> dict:
    directory = Path(directory)
    epochs = cfg.steps * cfg.batch_size / max(n_frames, 1)
    write_rows(directory / "log.csv", ("step", "loss", "lr"), [(h["step"], h["loss"], h["lr"]) for h in history])
    return codec_mod.save_codec(directory, codec.vae, codec.stats, seed, cfg.steps, epochs,
                                extra={"parent": parent, "log_sha256": io.file_sha256(directory / "log.csv")})


def load_codec_stage(directory) -> tuple[Codec, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise MissingArtifact(f"VAE checkpoint not found: {directory}")
    vae, stats, manifest = codec_mod.load_codec(directory)
    if stats is None:
        raise MissingArtifact(f"VAE checkpoint lacks latent statistics: {directory}")
    return Codec(vae, stats), manifest


def encode_windows(codec: Codec, past: np.ndarray, future: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardized (cond, target) latents; the frozen encoder runs once per frame."""
    cond = codec_mod.standardize(codec_mod.encode_frames(codec.vae, past), codec.stats)
    target = codec_mod.standardize(codec_mod.encode_frames(codec.vae, future), codec.stats)
    return cond.astype(np.float32), target.astype(np.float32)


# ------------------------------------------------------------------ generative stage

@dataclass(frozen=True)
class ValidationConfig:
    windows: int = 32
    members: int = 2
    steps: int = 10
    seed: int = 1234


def validation_sampler(objective: str, steps: int):
    return SolverConfig("euler", steps) if objective == "cfm" else DDIMConfig(steps)


def make_validator(model_cfg: ModelConfig, codec: Codec, past, future, thresholds, objective: str,
                   vcfg: ValidationConfig):
    """CSI-M of the ensemble mean on a fixed seeded validation subset, for a given weight state."""
    if len(past) == 0:
        return None
    idx = np.sort(np.random.default_rng(vcfg.seed).permutation(len(past))[:vcfg.windows])
    past, future = past[idx], future[idx]
    scratch = VectorFieldNet(model_cfg)
    sampler = validation_sampler(objective, vcfg.steps)

    def validate(state: dict) -> float:
        scratch.load_state_dict(state)
        fc = ensemble_forecast(scratch, codec, past, vcfg.members, sampler, seed=vcfg.seed,
                               window_ids=idx, objective=objective)
        return metrics.build_report(fc.frames, future, thresholds).aggregates["CSI-M"]

    return validate


def model_config_for(codec: Codec, grid, base: ModelConfig) -> ModelConfig:
    f = codec.vae.config.downsample_factor
    m = codec.vae.config.pad_multiple
    hw = tuple((-(-g // m) * m) // f for g in grid)
    return ModelConfig(**{**asdict(base), "latent_hw": hw, "latent_channels": codec.vae.config.latent_channels})


def train_generative_stage(ds: Dataset, codec: Codec, model_cfg: ModelConfig, cfm_cfg: CFMConfig,
                           vcfg: ValidationConfig = ValidationConfig(),
                           thresholds=metrics.SEVIR_THRESHOLDS, log_path=None, snapshot_dir=None,
                           train_subset: np.ndarray | None = None) -> tuple[VectorFieldNet, TrainResult]:
    past, future, _ = ds.split("train")
    if train_subset is not None:
        past, future = past[train_subset], future[train_subset]
    if len(past) == 0:
        raise ValueError("training split has no windows")
    cond, target = encode_windows(codec, past, future)
    model = VectorFieldNet(model_cfg, seed=cfm_cfg.seed)
    vpast, vfuture, _ = ds.split("val")
    validate = make_validator(model_cfg, codec, vpast, vfuture, thresholds, cfm_cfg.objective, vcfg)
    result = train(model, target, cond, cfm_cfg, validate=validate, log_path=log_path, snapshot_dir=snapshot_dir)
    model.load_state_dict(result.best.state)
    return model.eval(), result


def save_generative_stage(directory, model: VectorFieldNet, result: TrainResult, cfm_cfg: CFMConfig,
                          parent: dict) -> dict:
    directory = Path(directory)
    names = io.save_state(directory / "weights", result.state)
    io.save_state(directory / "ema", result.ema_state)
    io.save_state(directory / "best", result.best.state)
    write_log(directory / "log.csv", result.history)
    files = {}
    for sub in ("weights", "ema", "best"):
        for n in names:
            rel = f"{sub}/{n}.fct"
            files[rel] = io.file_sha256(directory / rel)
    files["log.csv"] = io.file_sha256(directory / "log.csv")
    manifest = {"kind": cfm_cfg.objective, "objective": cfm_cfg.objective, "model": asdict(model.config),
                "train": asdict(cfm_cfg), "seed": cfm_cfg.seed, "ema_decay": cfm_cfg.ema_decay,
                "steps": len(result.history), "best_step": result.best.step,
                "best_csi_m_val": result.best.score, "parameters": names, "files": files, "parent": parent}
    io.write_manifest(directory / "manifest.json", manifest)
    return manifest


def load_generative_stage(directory, which: str = "best") -> tuple[VectorFieldNet, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise MissingArtifact(f"model checkpoint not found: {directory}")
    manifest = io.read_manifest(directory / "manifest.json")
    cfg = dict(manifest["model"])
    cfg["latent_hw"] = tuple(cfg["latent_hw"])
    model = VectorFieldNet(ModelConfig(**cfg))
    model.load_state_dict(io.load_state(directory / which, manifest["parameters"]))
    return model.eval(), manifest


# ------------------------------------------------------------------ forecast / evaluate

def parse_sampler(objective: str, method: str, steps: int | None, rtol: float = 1e-2, atol: float = 1e-3):
    if objective == "ddpm":
        return DDIMConfig(int(steps))
    if method in ("dopri5", "adaptive_heun"):
        return SolverConfig(method, rtol=rtol, atol=atol)
    return SolverConfig(method, int(steps))


def sampler_label(sampler) -> str:
    if isinstance(sampler, DDIMConfig):
        return f"ddim-{sampler.sample_steps}"
    return sampler.method if sampler.adaptive else f"{sampler.method}-{sampler.steps}"


@dataclass
class ForecastRun:
    frames: np.ndarray  # (B, N, 12, H, W)
    ids: np.ndarray
    nfe: np.ndarray  # (B, N)
    seconds_per_sequence: np.ndarray  # (B,)


def run_forecast(model, codec: Codec, past: np.ndarray, ids: np.ndarray, members: int, sampler, seed: int,
                 objective: str, batch: int = 64) -> ForecastRun:
    """Ensemble forecasts in window batches; wall clock is spread evenly over each batch."""
    schedule = make_schedule() if objective == "ddpm" else None
    out, nfe, secs = [], [], []
    for i in range(0, len(past), batch):
        fc = ensemble_forecast(model, codec, past[i:i + batch], members, sampler, seed=seed,
                               window_ids=ids[i:i + batch], objective=objective, schedule=schedule)
        out.append(fc.frames)
        nfe.append(fc.nfe)
        secs += [fc.seconds / len(fc.frames)] * len(fc.frames)
    return ForecastRun(np.concatenate(out), np.asarray(ids), np.concatenate(nfe), np.asarray(secs))


def save_forecast(directory, run: ForecastRun, manifest: dict) -> dict:
    directory = Path(directory)
    files = {}
    for wid, frames in zip(run.ids, run.frames):
        rel = f"forecasts/window_{int(wid):05d}.fct"
        io.save_tensor(directory / rel, frames.astype(np.float32))
        files[rel] = io.file_sha256(directory / rel)
    # wall-clock varies run to run, so it lives outside the hashed artifacts
    write_rows(directory / "timing.csv", ("window_id", "seconds_per_sequence"),
               [(int(w), float(s)) for w, s in zip(run.ids, run.seconds_per_sequence)])
    manifest = {**manifest, "kind": "forecast", "window_ids": [int(w) for w in run.ids],
                "nfe_per_member": int(run.nfe.max()) if run.nfe.size else 0,
                "nfe": run.nfe.tolist(), "files": files}
    io.write_manifest(directory / "manifest.json", manifest)
    return manifest


def load_forecast(directory) -> tuple[np.ndarray, np.ndarray, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise MissingArtifact(f"forecast manifest not found: {directory}")
    manifest = io.read_manifest(directory / "manifest.json")
    ids = np.array(manifest["window_ids"], dtype=np.int64)
    frames = np.stack([io.load_tensor(directory / f"forecasts/window_{i:05d}.fct") for i in ids])
    return frames, ids, manifest


def truths_for(ds: Dataset, ids: np.ndarray, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """(past, future) for the requested window ids; raises listing ids the split lacks."""
    past, future, all_ids = ds.split(split)
    where = {int(w): j for j, w in enumerate(all_ids)}
    missing = [int(i) for i in ids if int(i) not in where]
    if missing:
        raise KeyError(f"window ids missing from the {split} split: {missing}")
    sel = np.array([where[int(i)] for i in ids], dtype=np.int64)
    return past[sel], future[sel]


def evaluate(forecasts: np.ndarray, past: np.ndarray, truths: np.ndarray, thresholds=metrics.SEVIR_THRESHOLDS,
             pool: int = 16, fss_n: int = 16) -> tuple[metrics.MetricReport, metrics.MetricReport]:
    """(model report, persistence report); inputs are never modified."""
    report = metrics.build_report(forecasts, truths, thresholds, pool, fss_n)
    persist = metrics.build_report(metrics.persistence_forecast(past, truths.shape[1]), truths, thresholds, pool, fss_n)
    return report, persist


# ------------------------------------------------------------------ ablation

ABLATION_COLUMNS = ("method", "nfe", "CRPS", "CSI-M", "CSI-P16-M", "FSS-M-P16", "HSS-M", "FAR-M",
                    "seconds_per_sequence")


def ablation_row(method: str, run: ForecastRun, report: metrics.MetricReport) -> dict:
    row = {"method": method, "nfe": int(round(float(run.nfe.mean())))}
    row.update({k: report.aggregates[k] for k in ABLATION_COLUMNS[2:8]})
    row["seconds_per_sequence"] = float(run.seconds_per_sequence.mean())
    return row


def run_ablation(kind: str, models: dict, codec: Codec, past, future, ids, members: int, seed: int,
                 nfe_values=NFE_SWEEP, thresholds=metrics.SEVIR_THRESHOLDS) -> list[dict]:
    """``models`` maps objective ('cfm' / 'ddpm') to a trained network."""
    jobs = []
    if kind == "nfe":
        jobs = [("cfm", "cfm-euler", SolverConfig("euler", n)) for n in sorted(nfe_values)]
    elif kind == "objective":
        for obj in ("cfm", "ddpm"):
            for n in sorted(nfe_values):
                jobs.append((obj, "cfm-euler" if obj == "cfm" else "ddim", parse_sampler(obj, "euler", n)))
    elif kind == "solver":
        jobs = [("cfm", m, parse_sampler("cfm", m, s)) for m, s in SOLVER_SWEEP]
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    rows = []
    for obj, method, sampler in jobs:
        if obj not in models:
            raise MissingArtifact(f"ablation '{kind}' needs a trained {obj} checkpoint")
        run = run_forecast(models[obj], codec, past, ids, members, sampler, seed, obj)
        report = metrics.build_report(run.frames, future, thresholds)
        rows.append(ablation_row(method, run, report))
        log.info("%s %s nfe=%d CSI-M=%.4f CRPS=%.4f", kind, method, rows[-1]["nfe"], rows[-1]["CSI-M"],
                 rows[-1]["CRPS"])
    return rows


def write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
