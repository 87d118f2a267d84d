"""Command-line entry point: ``intermoe <command> [flags]``.

Commands
--------
gen        write a synthetic dataset directory
train      train one or more seeds, write checkpoints, epoch logs and metrics
eval       score a checkpoint on a dataset
interpret  local/global weight reports, agreement table, expert comparison
pid        decompose a discrete joint (CSV, built-in fixture, or dataset)
ablate     train ablation variants next to the full model and report deltas
bench      overhead table (vanilla vs full) and masking-strategy comparison

Hyperparameter flags reuse the usual names (``--lr``, ``--interaction_loss_weight``,
``--temperature_rw`` ...). A ``--config`` file of ``key = value`` lines is
read first; flags given on the command line win. Relative output paths are
resolved against ``$INTERMOE_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence


from . import __version__
from .diffcore import ContractError
from .interpret import write_all
from .model import ConfigError, InputError, load_checkpoint
from .pidoracle import (PidError, and_joint, copy_joint, pid_decompose, read_joint_csv,
                        unique1_joint, xor_joint)
from .synthdata import (KINDS, DatasetError, GenSpec, generate, read_dataset, sign_discretizer,
                        write_dataset)
from .trainer import (ABLATIONS, BASELINES, TrainConfig, TrainingDiverged, aggregate, evaluate,
                      masking_comparison, measure_overhead, preflight, run_ablation, run_seeds,
                      split_indices)

OUTPUT_ROOT_ENV = "INTERMOE_OUTPUT_ROOT"
FIXTURES = {"xor": xor_joint, "and": and_joint, "copy": copy_joint, "unique1": unique1_joint}
HYPER_FIELDS = [f for f in fields(TrainConfig) if f.name != "seed"]


class CliError(Exception):
    """A failure reported as a one-line JSON object on stderr (exit code 1)."""

    def __init__(self, kind: str, message: str, **details):
        super().__init__(message)
        self.kind, self.details = kind, details

    def as_dict(self) -> dict:
        return {"error": self.kind, "message": str(self), **self.details}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}[name]
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    if ftype == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise CliError("ConfigError", f"{name}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    try:
        return {"int": int, "float": float}.get(ftype, str)(raw.strip())
    except ValueError:
        raise CliError("ConfigError", f"{name}: cannot parse {raw!r} as {ftype}") from None


def read_config_file(path) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name for f in fields(TrainConfig)} | {"seeds"}
    out: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("ConfigError", f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError("ConfigError", f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value if key == "seeds" else _coerce(key, value)
    return out


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise CliError("ConfigError", f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise CliError("ConfigError", "--seeds is empty")
    return seeds


def resolve_config(args) -> tuple:
    """Merge defaults, the config file and explicit flags (in that order)."""
    values: Dict[str, object] = {}
    file_seeds = None
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        file_seeds = values.pop("seeds", None)
    for f in HYPER_FIELDS:
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = TrainConfig(**values)
    except (ConfigError, TypeError) as exc:
        raise CliError("ConfigError", str(exc)) from None
    if args.seeds is not None:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    elif file_seeds is not None:
        seeds = parse_seeds(file_seeds)
    else:
        seeds = [cfg.seed]
    return cfg, seeds


# ---------------------------------------------------------------------------
# output directories and run manifests
# ---------------------------------------------------------------------------

def output_dir(path: str, force: bool) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    if p.exists() and not p.is_dir():
        raise CliError("OutputExists", f"{p} exists and is not a directory", path=str(p))
    if p.is_dir() and any(p.iterdir()) and not force:
        raise CliError("OutputExists", f"{p} is not empty; pass --force to overwrite", path=str(p))
    p.mkdir(parents=True, exist_ok=True)
    return p


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """Everything needed to rerun a command; written before any work starts."""

    def __init__(self, out: Path, command: str, argv: Sequence[str], config: dict,
                 seeds: Sequence[int] = (), inputs: Optional[dict] = None):
        self.path = out / "run_manifest.json"
        self.data = {"command": command, "argv": list(argv), "config": config,
                     "seeds": list(seeds), "inputs": inputs or {}, "outputs": {},
                     "version": __version__, "started_at": _now(), "finished_at": None}
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, default=str))

    def finish(self, outputs: dict):
        self.data["outputs"] = outputs
        self.data["finished_at"] = _now()
        self._write()


def _load_data(path: str):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise CliError("DatasetError", str(exc), path=exc.path, modality=exc.modality) from None


def _load_model(path: str):
    if not Path(path).is_file():
        raise CliError("MissingCheckpoint", f"checkpoint not found: {path}", path=str(path))
    try:
        return load_checkpoint(path)
    except (ContractError, ValueError, KeyError) as exc:
        raise CliError("CheckpointError", f"cannot read checkpoint {path}: {exc}", path=str(path)) from None


def _write_json(path: Path, obj) -> str:
    path.write_text(json.dumps(obj, indent=2, default=float))
    return str(path)


def _write_rows(path: Path, rows: List[dict]) -> str:
    cols: List[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return str(path)


def _flatten(prefix: str, agg: dict) -> dict:
    return {f"{prefix}{k}_{s}": v[s] for k, v in agg.items() for s in ("mean", "std")}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args, argv) -> dict:
    dims = tuple(int(d) for d in args.dims.split(","))
    props = tuple(float(p) for p in args.proportions.split(",")) if args.proportions else None
    try:
        spec = GenSpec(n_samples=args.n, dims=dims, noise_sigma=args.sigma, seed=args.seed,
                       kind=args.kind, k=args.k, proportions=props)
    except ValueError as exc:
        raise CliError("ConfigError", str(exc)) from None
    out = output_dir(args.out, args.force)
    man = RunManifest(out, "gen", argv, {"n_samples": spec.n_samples, "dims": list(spec.dims),
                                         "noise_sigma": spec.noise_sigma, "kind": spec.kind,
                                         "k": spec.k, "proportions": spec.proportions},
                      [spec.seed])
    write_dataset(generate(spec), out)
    outputs = {"dataset": str(out)}
    man.finish(outputs)
    return outputs


def _save_run(run, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    res = run.result
    paths = {"checkpoint": out / "checkpoint.json", "best_checkpoint": out / "checkpoint_best.json",
             "epochs": out / "epochs.csv", "metrics": out / "metrics.json"}
    res.model.save(paths["checkpoint"], {"seed": run.seed, "epochs": len(res.log)})
    res.best_model.save(paths["best_checkpoint"], {"seed": run.seed, "epoch": res.best_epoch})
    _write_rows(paths["epochs"], res.log)
    _write_json(paths["metrics"], {"seed": run.seed, "best_epoch": res.best_epoch,
                                   "test": run.test.as_dict(),
                                   "lambda_int": res.config.lambda_int})
    return {k: str(v) for k, v in paths.items()}


def cmd_train(args, argv) -> dict:
    cfg, seeds = resolve_config(args)
    data = _load_data(args.data)
    try:
        preflight(cfg, data)
    except ConfigError as exc:
        raise CliError("ConfigError", str(exc)) from None
    out = output_dir(args.out, args.force)
    conf = {**cfg.as_dict(), "lambda_int_effective": cfg.lambda_int}
    man = RunManifest(out, "train", argv, conf, seeds, {"data": str(args.data)})
    runs = run_seeds(cfg, data, seeds, eval_each_epoch=True)
    outputs: Dict[str, object] = {}
    if len(runs) == 1:
        outputs.update(_save_run(runs[0], out))
    else:
        for r in runs:
            outputs[f"seed_{r.seed}"] = _save_run(r, out / f"seed_{r.seed}")
        summary = {"seeds": seeds, "test": aggregate([r.test.as_dict() for r in runs]),
                   "per_seed": [{"seed": r.seed, **r.test.as_dict()} for r in runs]}
        outputs["summary"] = _write_json(out / "summary.json", summary)
    man.finish(outputs)
    return outputs


def _eval_split(data, args):
    if args.split == "all":
        return data, None
    idx = split_indices(len(data), args.seed)[{"train": 0, "val": 1, "test": 2}[args.split]]
    return data.subset(idx), [int(i) for i in idx]


def cmd_eval(args, argv) -> dict:
    model = _load_model(args.checkpoint)
    data, _ = _eval_split(_load_data(args.data), args)
    out = output_dir(args.out, args.force)
    man = RunManifest(out, "eval", argv, {"split": args.split}, [args.seed],
                      {"checkpoint": args.checkpoint, "data": args.data})
    try:
        metrics = evaluate(model, data)
    except InputError as exc:
        raise CliError("InputError", str(exc)) from None
    outputs = {"metrics": _write_json(out / "metrics.json", metrics.as_dict())}
    man.finish(outputs)
    return outputs


def cmd_interpret(args, argv) -> dict:
    model = _load_model(args.checkpoint)
    data, idx = _eval_split(_load_data(args.data), args)
    out = output_dir(args.out, args.force)
    man = RunManifest(out, "interpret", argv, {"split": args.split}, [args.seed],
                      {"checkpoint": args.checkpoint, "data": args.data})
    try:
        outputs = write_all(model, data, out, idx)
    except (InputError, ValueError) as exc:
        raise CliError(type(exc).__name__, str(exc)) from None
    man.finish(outputs)
    return outputs


def cmd_pid(args, argv) -> dict:
    try:
        if args.joint:
            joint = read_joint_csv(args.joint)
        elif args.fixture:
            joint = FIXTURES[args.fixture]()
        else:
            joint = sign_discretizer(_load_data(args.data))
        result = pid_decompose(joint).as_dict()
    except (PidError, DatasetError, OSError) as exc:
        raise CliError(type(exc).__name__, str(exc)) from None
    print(json.dumps(result))
    if args.out:
        out = output_dir(args.out, args.force)
        src = {"joint": args.joint, "fixture": args.fixture, "data": args.data}
        man = RunManifest(out, "pid", argv, {}, [], src)
        outputs = {"pid": _write_json(out / "pid.json", result)}
        man.finish(outputs)
        return outputs
    return {}


def cmd_ablate(args, argv) -> dict:
    cfg, seeds = resolve_config(args)
    variants = [v for v in ABLATIONS if v != "none"] if args.variants == "all" else args.variants.split(",")
    bad = [v for v in variants if v not in ABLATIONS or v == "none"]
    if bad:
        raise CliError("ConfigError", f"unknown ablation variant(s) {bad}")
    data = _load_data(args.data)
    try:
        for v in variants:
            preflight(replace(cfg, ablation=v), data)
    except ConfigError as exc:
        raise CliError("ConfigError", str(exc)) from None
    out = output_dir(args.out, args.force)
    man = RunManifest(out, "ablate", argv, {**cfg.as_dict(), "variants": variants}, seeds,
                      {"data": str(args.data)})
    full = run_seeds(replace(cfg, ablation="none"), data, seeds)
    rows = [{"variant": "full", "seed": r.seed, **_scalar(r.test.as_dict())} for r in full]
    report = {"full": aggregate([r.test.as_dict() for r in full]), "variants": {}}
    for v in variants:
        res = run_ablation(v, cfg, data, seeds, full)
        rows += [{"variant": v, **_scalar(p)} for p in res["per_seed"]]
        report["variants"][v] = {"metrics": res["metrics"], "delta": res["delta"],
                                 "n_experts": res["n_experts"],
                                 "reweighter_params": res["reweighter_params"]}
    outputs = {"rows": _write_rows(out / "ablation.csv", rows),
               "report": _write_json(out / "ablation.json", report)}
    man.finish(outputs)
    return outputs


def _scalar(d: dict) -> dict:
    return {k: v for k, v in d.items() if not isinstance(v, dict)}


def cmd_bench(args, argv) -> dict:
    cfg, seeds = resolve_config(args)
    data = _load_data(args.data)
    out = output_dir(args.out, args.force)
    man = RunManifest(out, "bench", argv, cfg.as_dict(), seeds, {"data": str(args.data)})
    over = measure_overhead(replace(cfg, seed=seeds[0]), data, epochs=args.epochs)
    table = [{"model": arm, **{k: v for k, v in over[arm].items()}} for arm in ("vanilla", "full")]
    outputs = {"overhead": _write_json(out / "overhead.json", over),
               "overhead_table": _write_rows(out / "overhead.csv", table)}
    if not args.skip_masking:
        rows = masking_comparison(cfg, data, seeds)
        flat = [{"strategy": r["strategy"], **_flatten("", {k: v for k, v in r.items() if k != "strategy"})}
                for r in rows]
        outputs["masking"] = _write_rows(out / "masking.csv", flat)
    man.finish(outputs)
    return outputs


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_hyper(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters (default: library defaults, or --config)")
    for f in HYPER_FIELDS:
        ftype = f.type if isinstance(f.type, str) else f.type.__name__
        conv = (lambda name: (lambda s: _coerce(name, s)))(f.name)
        kw = {"choices": None}
        if f.name == "ablation":
            kw["choices"] = ABLATIONS
        elif f.name == "baseline":
            kw["choices"] = BASELINES
        g.add_argument(f"--{f.name}", type=conv if ftype in ("int", "float", "bool") else str,
                       default=None, metavar=ftype.upper(), **kw)
    p.add_argument("--config", help="file of 'key = value' lines; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")


def _add_out(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--out", required=required)
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intermoe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dims", default="8,8")
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1, help="informative modality for --kind unique")
    p.add_argument("--proportions", default=None, help="mixture weights uni1..unin,syn,red")
    _add_out(p)

    p = sub.add_parser("train", help="train and write checkpoints, logs and metrics")
    p.add_argument("--data", required=True)
    _add_hyper(p)
    _add_out(p)

    for name, helptext in (("eval", "score a checkpoint"), ("interpret", "write interpretation reports")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
        p.add_argument("--seed", type=int, default=0, help="seed that produced the split")
        _add_out(p)

    p = sub.add_parser("pid", help="partial information decomposition of a discrete joint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--joint", help="CSV of x1,x2,t,p rows")
    src.add_argument("--fixture", choices=sorted(FIXTURES))
    src.add_argument("--data", help="dataset directory, discretised by signal sign")
    _add_out(p, required=False)

    p = sub.add_parser("ablate", help="ablation variants vs the full model")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="all")
    _add_hyper(p)
    _add_out(p)

    p = sub.add_parser("bench", help="overhead and masking-strategy tables")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--skip-masking", action="store_true")
    _add_hyper(p)
    _add_out(p)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "interpret": cmd_interpret,
            "pid": cmd_pid, "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(json.dumps({"error": "TrainingDiverged", "message": str(exc),
                          "epoch": exc.epoch, "step": exc.step}), file=sys.stderr)
        return 1
    for key, path in outputs.items():
        if isinstance(path, str):
            print(f"{key}: {path}")
    print(f"done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
