"""``nowflow`` command line: generate, train, forecast, evaluate, ablate.

Failures print one line ``nowflow: error[<category>]: <message>`` to stderr
and exit nonzero; the category is stable for scripting.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path


from . import io
from . import pipeline as P
from .cfm import NonFiniteLoss
from .config import ConfigError, RunConfig, load_config, override
from .io import FormatError
from .solvers import SolverError
from .svg import ablation_chart

log = logging.getLogger("nowflow")

EXIT_CODES = {"internal": 1, "usage": 2, "config": 2, "missing-artifact": 3, "data": 4, "solver": 5,
              "io": 6, "numerics": 7}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _manifest_ref(directory) -> dict:
    path = Path(directory) / "manifest.json"
    return {"path": str(directory), "manifest_sha256": io.file_sha256(path)}


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        for section in ("data", "train"):
            cfg = override(cfg, section, seed=args.seed)
    return cfg


# ------------------------------------------------------------------ commands

def cmd_generate(args, cfg: RunConfig) -> dict:
    cfg = override(cfg, "data", n_events=args.events, stride=args.stride, frames_per_event=args.frames)
    ds = P.build_dataset(cfg.data)
    manifest = P.save_dataset(ds, args.out, cfg.data)
    print(f"wrote {len(ds.events)} events, {sum(len(w[2]) for w in ds.windows.values())} windows, "
          f"split {tuple(manifest['splits'][k] for k in ('train', 'val', 'test'))} to {args.out}")
    return manifest


def _load_data(path):
    if path is None:
        raise CLIError("usage", "--data is required")
    return P.load_dataset(path)


def cmd_train(args, cfg: RunConfig) -> dict:
    ds, _ = _load_data(args.data)
    out = Path(args.out)
    seed = cfg.train.seed
    if args.kind == "vae":
        codec, history = P.train_codec_stage(ds, cfg.vae, seed)
        n_frames = sum(len(ds.events[e]) for e in ds.split_events["train"])
        manifest = P.save_codec_stage(out, codec, cfg.vae, seed, history, n_frames,
                                      parent={"data": _manifest_ref(args.data), "run": cfg.to_dict()})
        print(f"vae trained for {cfg.vae.steps} steps; final loss {history[-1]['loss']:.5f}")
        return manifest
    if args.vae is None:
        raise CLIError("missing-artifact", f"training {args.kind} needs a VAE checkpoint (--vae)")
    codec, _ = P.load_codec_stage(args.vae)
    train_cfg = replace(cfg.train, objective=args.kind)
    model_cfg = P.model_config_for(codec, cfg.data.grid if not ds.events else ds.events[0].frames.shape[1:],
                                   cfg.model)
    subset = None
    if args.subset is not None:
        subset = P.subset_indices(len(ds.split("train")[2]), args.subset, seed)
    model, result = P.train_generative_stage(ds, codec, model_cfg, train_cfg, cfg.validation,
                                             cfg.eval.thresholds, snapshot_dir=out, train_subset=subset)
    run = cfg.to_dict()
    run["train"] = asdict(train_cfg)
    manifest = P.save_generative_stage(out, model, result, train_cfg,
                                       parent={"data": _manifest_ref(args.data), "vae": _manifest_ref(args.vae),
                                               "run": run, "subset": args.subset})
    print(f"{args.kind} trained for {len(result.history)} steps; best step {result.best.step} "
          f"(val CSI-M {result.best.score:.4f})")
    return manifest


def _vae_dir(args, model_manifest: dict):
    if args.vae is not None:
        return args.vae
    try:
        return model_manifest["parent"]["vae"]["path"]
    except KeyError as exc:
        raise CLIError("missing-artifact", "cannot locate the VAE checkpoint; pass --vae") from exc


def cmd_forecast(args, cfg: RunConfig) -> dict:
    if args.model is None:
        raise CLIError("usage", "--model is required")
    cfg = override(cfg, "sampler", method=args.solver, steps=args.steps, members=args.members)
    model, mmanifest = P.load_generative_stage(args.model)
    vae_dir = _vae_dir(args, mmanifest)
    codec, _ = P.load_codec_stage(vae_dir)
    ds, _ = _load_data(args.data)
    past, _, ids = ds.split("test")
    sel = P.subset_indices(len(ids), args.subset, cfg.train.seed)
    objective = mmanifest["objective"]
    s = cfg.sampler
    sampler = P.parse_sampler(objective, s.method, s.steps, s.rtol, s.atol)
    seed = cfg.train.seed if args.seed is None else args.seed
    try:
        run = P.run_forecast(model, codec, past[sel], ids[sel], s.members, sampler, seed, objective)
    except SolverError as exc:
        raise SolverError(f"windows {ids[sel].tolist()}: {exc}") from exc
    manifest = P.save_forecast(args.out, run, {
        "objective": objective, "sampler": P.sampler_label(sampler), "members": s.members, "seed": seed,
        "subset": args.subset, "parent": {"model": _manifest_ref(args.model), "vae": _manifest_ref(vae_dir),
                                          "data": _manifest_ref(args.data)}, "run": cfg.to_dict()})
    print(f"forecast {len(run.ids)} windows x {s.members} members with {P.sampler_label(sampler)} "
          f"(NFE per member {manifest['nfe_per_member']})")
    return manifest


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    if args.forecasts is None:
        raise CLIError("usage", "--forecasts is required")
    frames, ids, fmanifest = P.load_forecast(args.forecasts)
    ds, _ = _load_data(args.data)
    try:
        past, truths = P.truths_for(ds, ids)
    except KeyError as exc:
        raise CLIError("data", str(exc.args[0])) from exc
    e = cfg.eval
    report, persist = P.evaluate(frames, past, truths, e.thresholds, e.pool, e.fss_n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "persistence.csv").write_text(persist.to_csv())
    summary = [("model", k, v) for k, v in report.aggregates.items()]
    summary += [("persistence", k, v) for k, v in persist.aggregates.items()]
    P.write_rows(out / "summary.csv", ("forecast", "metric", "value"), summary)
    manifest = {"kind": "evaluation", "thresholds": list(e.thresholds), "pool": e.pool, "fss_n": e.fss_n,
                "ensemble_size": report.ensemble_size,
                "parent": {"forecast": _manifest_ref(args.forecasts), "data": _manifest_ref(args.data)},
                "files": {n: io.file_sha256(out / n) for n in ("report.csv", "persistence.csv", "summary.csv")}}
    io.write_manifest(out / "manifest.json", manifest)
    print("model       " + "  ".join(f"{k}={v:.4f}" for k, v in report.aggregates.items()))
    print("persistence " + "  ".join(f"{k}={v:.4f}" for k, v in persist.aggregates.items()))
    return manifest


def cmd_ablate(args, cfg: RunConfig) -> dict:
    needs = ("cfm", "ddpm") if args.kind == "objective" else ("cfm",)
    dirs = {"cfm": args.cfm, "ddpm": args.ddpm}
    models, refs = {}, {}
    for obj in needs:
        if dirs[obj] is None:
            raise CLIError("missing-artifact", f"ablation '{args.kind}' needs --{obj} CHECKPOINT")
        models[obj], mmanifest = P.load_generative_stage(dirs[obj])
        refs[obj] = _manifest_ref(dirs[obj])
    vae_dir = _vae_dir(args, mmanifest)
    codec, _ = P.load_codec_stage(vae_dir)
    ds, _ = _load_data(args.data)
    past, future, ids = ds.split("test")
    sel = P.subset_indices(len(ids), args.subset, cfg.train.seed)
    members = args.members if args.members is not None else cfg.sampler.members
    nfe_values = tuple(sorted(args.nfe)) if args.nfe else P.NFE_SWEEP
    rows = P.run_ablation(args.kind, models, codec, past[sel], future[sel], ids[sel], members, cfg.train.seed,
                          nfe_values, cfg.eval.thresholds)
    out = Path(args.out)
    # deterministic metrics and wall-clock timings go to separate files
    P.write_rows(out / "ablation.csv", P.ABLATION_COLUMNS[:-1], [[r[k] for k in P.ABLATION_COLUMNS[:-1]] for r in rows])
    P.write_rows(out / "timing.csv", ("method", "nfe", "seconds_per_sequence"),
                 [(r["method"], r["nfe"], r["seconds_per_sequence"]) for r in rows])
    (out / "ablation.svg").write_text(ablation_chart(rows, title=f"{args.kind} ablation"))
    manifest = {"kind": "ablation", "ablation": args.kind, "members": members, "subset": args.subset,
                "nfe_values": list(nfe_values), "parent": {**refs, "vae": _manifest_ref(vae_dir),
                                                           "data": _manifest_ref(args.data)},
                "files": {n: io.file_sha256(out / n) for n in ("ablation.csv", "ablation.svg")}}
    io.write_manifest(out / "manifest.json", manifest)
    for r in rows:
        print(f"{r['method']:>14} nfe={r['nfe']:<3d} CRPS={r['CRPS']:.4f} CSI-M={r['CSI-M']:.4f}")
    return manifest


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="seed override (unsigned 64-bit)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--subset", type=float, help="fraction of windows to use, in (0, 1]")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nowflow", description="Latent flow-matching nowcasting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize the advection dataset")
    g.add_argument("--events", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--frames", type=int, help="frames per event")

    t = sub.add_parser("train", parents=[common], help="train the VAE, CFM or DDPM model")
    t.add_argument("kind", choices=("vae", "cfm", "ddpm"))
    t.add_argument("--data")
    t.add_argument("--vae")

    f = sub.add_parser("forecast", parents=[common], help="ensemble forecasts for test windows")
    f.add_argument("--model")
    f.add_argument("--vae")
    f.add_argument("--data")
    f.add_argument("--solver", choices=("euler", "midpoint", "rk4", "dopri5", "adaptive_heun"))
    f.add_argument("--steps", type=int)
    f.add_argument("--members", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="score forecasts against truth and persistence")
    e.add_argument("--forecasts")
    e.add_argument("--data")

    a = sub.add_parser("ablate", parents=[common], help="NFE, solver or objective sweeps")
    a.add_argument("kind", choices=("nfe", "solver", "objective"))
    a.add_argument("--cfm")
    a.add_argument("--ddpm")
    a.add_argument("--vae")
    a.add_argument("--data")
    a.add_argument("--members", type=int)
    a.add_argument("--nfe", type=int, nargs="+", help="NFE values (default 1 2 3 5 10 20 50)")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def _category(exc: BaseException) -> str:
    if isinstance(exc, CLIError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, P.MissingArtifact):
        return "missing-artifact"
    if isinstance(exc, SolverError):
        return "solver"
    if isinstance(exc, (NonFiniteLoss, FloatingPointError)):
        return "numerics"
    if isinstance(exc, FormatError):
        return "io"
    if isinstance(exc, (ValueError, KeyError)):
        return "data"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.subset is not None and not 0 < args.subset <= 1:
            raise CLIError("usage", f"--subset must be in (0, 1], got {args.subset}")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise CLIError("usage", "--seed must be an unsigned 64-bit integer")
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"nowflow: error[{category}]: {message}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
