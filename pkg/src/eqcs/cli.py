"""Command line entry point: train, recover, benchmark, verify, report.

Configuration is a YAML mapping validated against a fixed schema; unknown
keys are errors.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import diffmath as dm
from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from .experiments import PRESETS, make_problem, preset_model, problem_factory, toy_dataset
from .models import ModelError, TrainConfig, TrainingDivergence, build_model, train
from .recovery import (
    SCENARIOS, TABLE_COLUMNS, BenchmarkEntry, RecoveryConfig, RecoveryError, VAEGenerator,
    benchmark, check_scheme, recover,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "EQCS_OUT"


class ConfigError(ValueError):
    pass


class VerificationFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration schema

_DATA_KEYS = {"source": str, "count": int, "size": int, "seed": int, "path": str, "fractions": list}
_MODEL_KEYS = {"preset": str, "kind": str, "group_order": int, "latent_dim": int, "channels": list,
               "hidden": int, "likelihood": str, "covariance": str, "eta": float, "seed": int}
_PROBLEM_KEYS = {"m": int, "scenario": str, "rotation": str, "noise_std": float, "trial": int,
                 "seed": int}
_BENCH_KEYS = {"roster": list, "measurements": list, "trials": int, "scenarios": list,
               "rotation": str, "noise_std": float}
_ROSTER_KEYS = {"name": str, "checkpoint": str, "scheme": str}
_VERIFY_KEYS = {"trials": int, "norm_trials": int, "pairs": int, "noise_std": float, "delta": float,
                "C": float, "checkpoint": str, "toy_trials": int}
_TOP = {"seed", "out", "name", "data", "model", "train", "recovery", "problem", "benchmark", "verify"}


def _typed(section: str, raw, schema: dict) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}")
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want is int and isinstance(value, bool) or not isinstance(value, want):
            raise ConfigError(f"{section}.{key} must be of type {want.__name__}")
        out[key] = value
    return out


def _dataclass_section(section: str, raw, cls):
    names = {f.name: f.type for f in fields(cls)}
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"unknown key {section}.{sorted(unknown)[0]}")
    return dict(raw)


def validate_config(raw) -> dict:
    """Check a parsed config mapping and return a normalized copy."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    cfg = {
        "seed": raw.get("seed", 0),
        "out": raw.get("out"),
        "name": raw.get("name", "model"),
        "data": _typed("data", raw.get("data"), _DATA_KEYS),
        "model": _typed("model", raw.get("model"), _MODEL_KEYS),
        "problem": _typed("problem", raw.get("problem"), _PROBLEM_KEYS),
        "benchmark": _typed("benchmark", raw.get("benchmark"), _BENCH_KEYS),
        "verify": _typed("verify", raw.get("verify"), _VERIFY_KEYS),
        "train": _dataclass_section("train", raw.get("train"), TrainConfig),
        "recovery": _dataclass_section("recovery", raw.get("recovery"), RecoveryConfig),
    }
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    if cfg["out"] is not None and not isinstance(cfg["out"], str):
        raise ConfigError("out must be a path string")
    for entry in cfg["benchmark"].get("roster", []):
        _typed("benchmark.roster[]", entry, _ROSTER_KEYS)
        if "checkpoint" not in entry:
            raise ConfigError("every roster entry needs a checkpoint")
    try:
        train_cfg(cfg)
        recovery_cfg(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    src = cfg["data"].get("source", "synth")
    if src not in ("synth", "idx"):
        raise ConfigError(f"data.source must be 'synth' or 'idx', got {src!r}")
    if src == "idx" and "path" not in cfg["data"]:
        raise ConfigError("data.path is required for IDX data")
    if "preset" in cfg["model"] and cfg["model"]["preset"] not in PRESETS:
        raise ConfigError(f"unknown model preset {cfg['model']['preset']!r}")
    return cfg


def load_config(path) -> dict:
    if path is None:
        return validate_config({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(**{"seed": cfg["seed"], **cfg["train"]})


def recovery_cfg(cfg: dict) -> RecoveryConfig:
    return RecoveryConfig(**{"seed": cfg["seed"], **cfg["recovery"]})


def out_dir(cfg: dict) -> Path:
    path = Path(cfg["out"] or os.environ.get(OUT_ENV) or "eqcs-runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# helpers

def dataset_from(cfg: dict):
    d = cfg["data"]
    if d.get("source", "synth") == "idx":
        from .data import from_idx, split
        fr = tuple(d.get("fractions", (0.8, 0.1, 0.1)))
        return split(from_idx(d["path"]), fr, d.get("seed", cfg["seed"]))
    return toy_dataset(d.get("count"), d.get("size"), d.get("seed"))


def model_from(cfg: dict, image_size: int):
    spec = dict(cfg["model"])
    seed = spec.pop("seed", cfg["seed"])
    if "channels" in spec:
        spec["channels"] = tuple(spec["channels"])
    try:
        if "preset" in spec:
            name = spec.pop("preset")
            return preset_model(name, seed, image_size=image_size, **spec)
        return build_model(spec.pop("kind", "eq"), image_size=image_size, seed=seed, **spec)
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from None


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_table(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    path.write_text(buf.getvalue())


def _emit(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# commands

def cmd_train(cfg: dict, args=None) -> dict:
    data = dataset_from(cfg)
    model = model_from(cfg, data.images.shape[-1])
    tc = train_cfg(cfg)
    result = train(model, data.part("train"), tc)
    out = out_dir(cfg)
    name = cfg["name"]
    ck = save_checkpoint(result.model, out / f"{name}.eqck")
    trace = out / f"{name}_loss.csv"
    trace.write_text("epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(result.loss_trace)))
    record = {"command": "train", "checkpoint": str(ck), "checkpoint_sha256": _sha(ck),
              "config_sha256": config_hash(cfg), "seed": cfg["seed"], "epochs": tc.epochs,
              "final_loss": result.loss_trace[-1] if result.loss_trace else None,
              "data": data.provenance}
    _write_json(out / f"{name}_train.json", record)
    _emit(f"trained {model.kind} model -> {ck}")
    return record


def _problem_from(cfg: dict, images):
    p = cfg["problem"]
    seed = p.get("seed", cfg["seed"])
    return make_problem(images, p.get("m", 32), p.get("scenario", "unknown-rotation"),
                        p.get("trial", 0), seed, p.get("rotation", "quarter"),
                        p.get("noise_std", 0.0)), seed


def cmd_recover(cfg: dict, checkpoint, scheme: str) -> dict:
    if checkpoint is None:
        raise ConfigError("recover needs --checkpoint")
    try:
        model = load_checkpoint(checkpoint)
    except (OSError, CheckpointError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    G = VAEGenerator(model)
    try:
        check_scheme(G, scheme)
    except RecoveryError as exc:
        raise ConfigError(f"scheme/model mismatch: {exc}") from None
    data = dataset_from(cfg)
    problem, pseed = _problem_from(cfg, data.part("test"))
    rc = recovery_cfg(cfg)
    result = recover(problem, G, rc, scheme)
    record = {"command": "recover", "scheme": scheme, "checkpoint": str(checkpoint),
              "checkpoint_sha256": _sha(checkpoint), "config_sha256": config_hash(cfg),
              "problem": {**cfg["problem"], "seed": pseed,
                          "g_star": _g_json(problem.g_star)},
              "recovery": asdict(rc), **result.record()}
    out = out_dir(cfg)
    _write_json(out / f"recover_{scheme}.json", record)
    _emit(f"{scheme}: converged={result.converged} mse={result.mse:.5f} iterations={result.iterations}")
    return record


def _g_json(g):
    if g is None:
        return None
    if isinstance(g, float):
        return {"angle": g}
    return {"order": g.order, "index": g.index}


def cmd_benchmark(cfg: dict, workers: int = 1) -> dict:
    b = cfg["benchmark"]
    roster = b.get("roster", [])
    if not roster:
        raise ConfigError("benchmark.roster is empty")
    entries = []
    hashes = {}
    for item in roster:
        path = item["checkpoint"]
        if not Path(path).exists():
            raise ConfigError(f"missing checkpoint {path}")
        try:
            model = load_checkpoint(path)
        except CheckpointError as exc:
            raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
        scheme = item.get("scheme", "plain")
        G = VAEGenerator(model)
        try:
            check_scheme(G, scheme)
        except RecoveryError as exc:
            raise ConfigError(f"roster entry {item.get('name', path)}: {exc}") from None
        name = item.get("name", Path(path).stem)
        entries.append(BenchmarkEntry(name, G, scheme, model.group_order))
        hashes[name] = _sha(path)
    data = dataset_from(cfg)
    factory = problem_factory(data.part("test"), b.get("rotation", "quarter"), b.get("noise_std", 0.0))
    rows, records = benchmark(entries, factory, recovery_cfg(cfg), b.get("trials", 20),
                              tuple(b.get("measurements", [32])),
                              tuple(b.get("scenarios", SCENARIOS)), cfg["seed"], workers)
    out = out_dir(cfg)
    _write_table(out / "benchmark.csv", rows)
    payload = {"config": cfg, "config_sha256": config_hash(cfg), "checkpoints": hashes,
               "rows": rows, "records": records}
    _write_json(out / "benchmark.json", payload)
    _emit(render_table(rows))
    return payload


def cmd_verify(cfg: dict, checkpoint=None) -> dict:
    """Theory checks; a checkpoint (flag or verify.checkpoint) adds the toy-prior audits."""
    from .verify import run_verification
    v = cfg["verify"]
    checkpoint = checkpoint or v.get("checkpoint")
    model = None
    if checkpoint is not None:
        try:
            model = load_checkpoint(checkpoint)
        except (OSError, CheckpointError) as exc:
            raise ConfigError(f"cannot load checkpoint: {exc}") from None
        if model.kind != "eq":
            raise ConfigError("the toy audit needs an equivariant checkpoint")
    report = run_verification(trials=v.get("trials", 100), norm_trials=v.get("norm_trials", 100_000),
                              pairs=v.get("pairs", 2000), noise_std=v.get("noise_std", 0.01),
                              delta=v.get("delta", 0.01), C=v.get("C", 1.0), seed=cfg["seed"],
                              model=model, toy_trials=v.get("toy_trials"))
    out = out_dir(cfg)
    _write_json(out / "verify.json", report)
    for name, item in report["checks"].items():
        _emit(f"{'PASS' if item['passed'] else 'FAIL'} {name}: {item['summary']}")
    if not report["passed"]:
        raise VerificationFailed("one or more theory checks failed")
    return report


def render_table(rows) -> str:
    lines = [" | ".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append(" | ".join(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c])
                                for c in TABLE_COLUMNS))
    return "\n".join(lines)


def cmd_report(cfg: dict) -> str:
    out = out_dir(cfg)
    parts = []
    bj = out / "benchmark.json"
    if bj.exists():
        parts.append("benchmark\n" + render_table(json.loads(bj.read_text())["rows"]))
    vj = out / "verify.json"
    if vj.exists():
        rep = json.loads(vj.read_text())
        parts.append("verify\n" + "\n".join(
            f"{'PASS' if c['passed'] else 'FAIL'} {n}: {c['summary']}" for n, c in rep["checks"].items()))
    if not parts:
        raise ConfigError(f"nothing to report in {out}")
    text = "\n\n".join(parts)
    (out / "report.txt").write_text(text + "\n")
    _emit(text)
    return text


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqcs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "recover", "benchmark", "verify", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./eqcs-runs)")
        if name == "train":
            sp.add_argument("--model", help="model preset name (overrides model section)")
        if name in ("recover", "verify"):
            sp.add_argument("--checkpoint", help="checkpoint to use as the prior")
        if name == "recover":
            sp.add_argument("--scheme", choices=("plain", "coordinate", "joint", "conditional"),
                            default="plain")
        if name == "benchmark":
            sp.add_argument("--workers", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        if getattr(args, "model", None):
            if args.model not in PRESETS:
                raise ConfigError(f"unknown model preset {args.model!r}")
            cfg["model"] = {"preset": args.model}
            cfg["name"] = args.model if cfg["name"] == "model" else cfg["name"]
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "recover":
            cmd_recover(cfg, args.checkpoint, args.scheme)
        elif args.command == "benchmark":
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            cmd_benchmark(cfg, args.workers)
        elif args.command == "verify":
            cmd_verify(cfg, args.checkpoint)
        else:
            cmd_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, dm.NonFiniteError, dm.NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
