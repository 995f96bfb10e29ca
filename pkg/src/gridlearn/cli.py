"""Command-line entry point: validate, generate, train, evaluate, predict, loadflow.

Settings come from a flat YAML file (``--config``) whose keys mirror the long
flags; a flag beats the file, and GRIDLEARN_SEED beats the file's seed.
Exit codes: 0 success, 1 domain failure, 2 input or parse failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import datagen, evaluator, trainer
from .grid import CaseError, CaseSyntaxError, NetworkError, load_case, parse_case, validate
from .neural import CheckpointError, load_checkpoint
from .powerflow import FAMILIES, LoadPoint, violation_report
from .seeding import seed_from_env
from .solver import SolverConfig, solve_loadflow

log = logging.getLogger("gridlearn")

EXIT_OK, EXIT_DOMAIN, EXIT_INPUT = 0, 1, 2

# key -> (type, default); the flat schema of the config file
SCHEMA = {
    "case": (str, None),
    "dataset": (str, None),
    "checkpoint": (str, None),
    "log": (str, None),
    "out_dir": (str, "."),
    "seed": (int, 0),
    "jobs": (int, 1),
    # dataset generation
    "n_points": (int, 1000),
    "lb_range": (list, [0.8, 0.9]),
    "ub_range": (list, [1.1, 1.2]),
    "noise_scale": (float, 1.0),
    # solver
    "feas_tol": (float, 1e-6),
    "opt_tol": (float, 1e-6),
    "max_outer": (int, 50),
    "max_inner": (int, 500),
    "penalty_init": (float, 10.0),
    "penalty_growth": (float, 10.0),
    "thermal": (str, "squared"),
    # training
    "variant": (str, "mcd"),
    "lambda_init": (float, None),
    "step": (float, None),
    "update_every": (int, 1000),
    "lr": (float, 1e-4),
    "batch_size": (int, 64),
    "max_epochs": (int, 50000),
    "constraint_set": (list, list(FAMILIES)),
    "setpoint_loss_only": (bool, False),
    "hidden": (list, None),
    "depth": (int, 2),
    "relu_heads": (bool, False),
    "clip_norm": (float, 1e3),
    "checkpoint_every": (int, 1000),
    "split_ratio": (float, 0.8),
    # evaluation / prediction
    "loadflow": (bool, False),
    "oracle": (bool, False),
    "timing": (bool, False),
    "tau": (float, 1e-6),
    "project": (bool, False),
    "clamp": (bool, False),
    "loads": (str, None),
    "setpoint": (str, None),
    "out": (str, None),
    "resume": (bool, False),
}


class InputError(Exception):
    """Bad flags, config or input files (exit 2)."""


class DomainError(Exception):
    """Well-formed request that cannot be satisfied (exit 1)."""


def _coerce(key, value):
    typ, _ = SCHEMA[key]
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return list(value)
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config key '{key}': cannot interpret {value!r} as {typ.__name__}") from exc


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"malformed config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must be a flat key/value mapping")
    unknown = sorted(set(doc) - set(SCHEMA))
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in doc.items()}


def resolve_config(args: argparse.Namespace) -> dict:
    """default < file < GRIDLEARN_SEED (seed only) < flags."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    try:
        env_seed = seed_from_env()
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if env_seed is not None:
        cfg["seed"] = env_seed
    for k in SCHEMA:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def solver_config(cfg) -> SolverConfig:
    try:
        return SolverConfig(
            feas_tol=cfg["feas_tol"], opt_tol=cfg["opt_tol"], max_outer=cfg["max_outer"],
            max_inner=cfg["max_inner"], penalty_init=cfg["penalty_init"],
            penalty_growth=cfg["penalty_growth"], thermal=cfg["thermal"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def gen_config(cfg) -> datagen.GenConfig:
    try:
        return datagen.GenConfig(
            n_points=cfg["n_points"], seed=cfg["seed"], lb_range=tuple(cfg["lb_range"]),
            ub_range=tuple(cfg["ub_range"]), noise_scale=cfg["noise_scale"],
        )
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def train_config(cfg) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            variant=cfg["variant"], lambda_init=cfg["lambda_init"], step=cfg["step"],
            update_every=cfg["update_every"], lr=cfg["lr"], batch_size=cfg["batch_size"],
            max_epochs=cfg["max_epochs"], seed=cfg["seed"], constraint_set=tuple(cfg["constraint_set"]),
            setpoint_loss_only=cfg["setpoint_loss_only"],
            hidden=None if cfg["hidden"] is None else tuple(int(h) for h in cfg["hidden"]),
            depth=cfg["depth"], relu_heads=cfg["relu_heads"], clip_norm=cfg["clip_norm"],
            checkpoint_every=cfg["checkpoint_every"], thermal=cfg["thermal"],
        )
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _need(cfg, key):
    if cfg.get(key) is None:
        raise InputError(f"missing required setting '{key}' (flag --{key.replace('_', '-')} or config key)")
    return cfg[key]


def _network(cfg):
    path = _need(cfg, "case")
    try:
        return load_case(path)
    except FileNotFoundError as exc:
        raise InputError(f"case not found: {path}") from exc
    except NetworkError as exc:
        raise DomainError("; ".join(exc.diagnostics)) from exc


def _out_path(cfg, key, default_name) -> Path:
    if cfg.get(key):
        return Path(cfg[key])
    return Path(cfg["out_dir"]) / default_name


def _load_dataset(cfg, net):
    path = Path(_need(cfg, "dataset"))
    if not path.exists():
        raise DomainError(f"dataset not found: {path}")
    return datagen.load_dataset(path, net)


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {what} file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})") from exc


def _read_loads(cfg, net) -> LoadPoint:
    doc = _read_json(_need(cfg, "loads"), "load")
    try:
        p = np.asarray(doc["p"], dtype=float)
        q = np.asarray(doc["q"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError("load file must hold numeric arrays 'p' and 'q'") from exc
    if p.shape != (net.n_load,) or q.shape != (net.n_load,):
        raise DomainError(f"load vector has width {p.size}+{q.size}, network expects {net.n_load}+{net.n_load}")
    return LoadPoint(p, q)


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


# -- commands


def cmd_validate(args) -> int:
    path = args.case
    try:
        text = Path(path).read_text()
    except OSError:
        try:
            net = load_case(path, strict=False)
        except FileNotFoundError:
            print(f"error: case not found: {path}", file=sys.stderr)
            return EXIT_INPUT
    else:
        try:
            net = parse_case(text, Path(path).stem, strict=False)
        except CaseSyntaxError as exc:
            print(f"{path}:{exc.line}:{exc.column}: {exc}", file=sys.stderr)
            return EXIT_INPUT
    diags = validate(net)
    for d in diags:
        print(f"{path}: {d}")
    if not diags:
        print(f"{path}: ok ({net.n_bus} buses, {net.n_gen} generators, {net.n_branch} branches, {net.n_load} loads)")
    return EXIT_OK if not diags else EXIT_DOMAIN


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    net = _network(cfg)
    gcfg, scfg = gen_config(cfg), solver_config(cfg)
    out = _out_path(cfg, "dataset", f"{net.name or 'dataset'}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ds = datagen.generate(net, gcfg, scfg, jobs=cfg["jobs"])
    datagen.save_dataset(ds, out)
    m = ds.manifest
    print(f"wrote {out}: {m['n_feasible']} feasible of {m['n_candidates']} snapshots "
          f"({m['n_discarded']} discarded) in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    net = _network(cfg)
    tcfg = train_config(cfg)
    ds = _load_dataset(cfg, net)
    train_set, _ = datagen.split(ds, cfg["split_ratio"], cfg["seed"])
    ckpt = _out_path(cfg, "checkpoint", "model.ckpt.json")
    log_path = _out_path(cfg, "log", "train_log.csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    resume = None
    if cfg["resume"]:
        if not ckpt.exists():
            raise DomainError(f"no checkpoint to resume from at {ckpt}")
        resume = load_checkpoint(ckpt, expected_hash=net.case_hash)
        if resume.extra.get("train_config") != tcfg.to_dict():
            raise DomainError("checkpoint was written with a different training configuration")
    t0 = time.perf_counter()
    res = trainer.train(net, train_set, tcfg, checkpoint_path=ckpt, log_path=log_path, resume=resume)
    lam = ", ".join(f"{k}={v:.4g}" for k, v in res.multipliers.items())
    print(f"trained {tcfg.variant} for {res.epoch} epochs in {time.perf_counter() - t0:.1f} s; "
          f"checkpoint {ckpt}; multipliers {lam}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    net = _network(cfg)
    ds = _load_dataset(cfg, net)
    _, test = datagen.split(ds, cfg["split_ratio"], cfg["seed"])
    runs = []
    if cfg["oracle"]:
        pred = test.targets()
    else:
        ck = load_checkpoint(_need(cfg, "checkpoint"), expected_hash=net.case_hash)
        pred = ck.model.predict_arrays(test.inputs())
        if cfg["timing"]:
            x = test.inputs()[0]
            for _ in range(100):
                t0 = time.perf_counter()
                ck.model.predict_arrays(x)
                runs.append({"kind": "predict", "seconds": time.perf_counter() - t0})
    report = evaluator.evaluate(net, test, pred, loadflow=cfg["loadflow"], solver=solver_config(cfg),
                                tau=cfg["tau"], thermal=cfg["thermal"])
    if cfg["timing"]:
        report.timing = evaluator.timing_summary(runs)
        report.timing["peak_memory_mb"] = evaluator.peak_memory_mb()
    out_dir = Path(cfg["out_dir"])
    paths = evaluator.write_report(report, out_dir)
    sat = ", ".join(f"{f}={v:.2f}%" for f, v in report.satisfaction.items())
    g = report.gaps
    lf = "" if g.loadflow is None else f", load-flow gap {g.loadflow:.4g}% ({g.n_loadflow_failed} failed)"
    print(f"{len(test)} test points; mean |v err| {report.errors_pu['v']:.3g} p.u.; satisfaction {sat}; "
          f"raw gap {g.raw:.4g}%{lf}; wrote {len(paths)} files to {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    net = _network(cfg)
    ck = load_checkpoint(_need(cfg, "checkpoint"), expected_hash=net.case_hash)
    load = _read_loads(cfg, net)
    times = []
    for _ in range(max(1, args.repeat)):
        pred = trainer.predict(ck.model, net, load, clamp=cfg["clamp"])
        times.append(pred.seconds)
    doc = {"projected": False, **pred.solution.to_dict(),
           "pf": pred.flows.pf.tolist(), "qf": pred.flows.qf.tolist()}
    if cfg["project"]:
        sol = pred.solution
        out = solve_loadflow(net, load, (sol.pg, sol.v), solver_config(cfg))
        if not out.ok:
            raise DomainError(f"load-flow projection failed: {out.status.value}")
        rep = violation_report(net, load, out.solution, thermal=cfg["thermal"])
        doc = {"projected": True, **out.solution.to_dict(), "max_violation": rep.max_nu()}
    out_path = _out_path(cfg, "out", "prediction.json")
    _write_json(out_path, doc)
    print(f"predict time: {statistics.median(times) * 1e3:.3f} ms; wrote {out_path}")
    return EXIT_OK


def cmd_loadflow(args) -> int:
    cfg = resolve_config(args)
    net = _network(cfg)
    load = _read_loads(cfg, net)
    sp = _read_json(_need(cfg, "setpoint"), "setpoint")
    try:
        pg, v = np.asarray(sp["pg"], dtype=float), np.asarray(sp["v"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError("setpoint file must hold numeric arrays 'pg' and 'v'") from exc
    if pg.shape != (net.n_gen,) or v.shape != (net.n_bus,):
        raise DomainError("setpoint dimensions do not match the network")
    out = solve_loadflow(net, load, (pg, v), solver_config(cfg))
    if not out.ok:
        raise DomainError(f"load flow failed: {out.status.value}")
    out_path = _out_path(cfg, "out", "loadflow.json")
    _write_json(out_path, {**out.solution.to_dict(), "objective": out.objective})
    print(f"load flow {out.status.value}: distance {out.objective:.6g}; wrote {out_path}")
    return EXIT_OK


# -- parser


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def _common(p, keys):
    p.add_argument("--config", help="flat YAML config file")
    for k in keys:
        typ = SCHEMA[k][0]
        flag = "--" + k.replace("_", "-")
        if typ is bool:
            _add(p, flag, dest=k, action="store_const", const=True)
        elif typ is list:
            _add(p, flag, dest=k, nargs="+")
        else:
            _add(p, flag, dest=k, type=typ)


SOLVER_KEYS = ["feas_tol", "opt_tol", "max_outer", "max_inner", "penalty_init", "penalty_growth", "thermal"]
TRAIN_KEYS = ["variant", "lambda_init", "step", "update_every", "lr", "batch_size", "max_epochs",
              "constraint_set", "setpoint_loss_only", "hidden", "depth", "relu_heads", "clip_norm",
              "checkpoint_every"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridlearn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and check a case file")
    p.add_argument("case", help="MATPOWER case file or bundled case name")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="solve a load ramp and write a dataset")
    _common(p, ["case", "dataset", "out_dir", "seed", "jobs", "n_points", "lb_range", "ub_range",
                "noise_scale", *SOLVER_KEYS])
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p, ["case", "dataset", "checkpoint", "log", "out_dir", "seed", "jobs", "split_ratio",
                "resume", "thermal", *TRAIN_KEYS])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model on the held-out split")
    _common(p, ["case", "dataset", "checkpoint", "out_dir", "seed", "jobs", "split_ratio", "loadflow",
                "oracle", "timing", "tau", *SOLVER_KEYS])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict setpoints for one load vector")
    _common(p, ["case", "checkpoint", "loads", "out", "out_dir", "project", "clamp", *SOLVER_KEYS])
    p.add_argument("--repeat", type=int, default=1, help="time this many forward passes (median printed)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("loadflow", help="nearest AC-feasible point to a setpoint")
    _common(p, ["case", "loads", "setpoint", "out", "out_dir", *SOLVER_KEYS])
    p.set_defaults(func=cmd_loadflow)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CaseSyntaxError as exc:
        print(f"error: {exc} (line {exc.line}, column {exc.column})", file=sys.stderr)
        return EXIT_INPUT
    except (DomainError, datagen.DatasetError, trainer.TrainingError, CheckpointError, CaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
