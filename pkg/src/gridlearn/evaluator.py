"""Test-set metrics for OPF predictions.

Everything here consumes plain prediction arrays (v, theta, pg, qg with one
row per test instance) so the same code scores a trained model, replayed
labels, or projected operating points.
"""

from __future__ import annotations

import csv
import resource
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .grid import Network
from .powerflow import TAU_SAT, LoadPoint, OperatingPoint, all_flows, constraint_violations, dispatch_cost
from .solver import SolverConfig, solve_loadflow

QUANTITIES = ("v", "theta", "pg", "qg", "pf", "qf")
UNITS = {"v": "kV", "theta": "deg", "pg": "MW", "qg": "MVAr", "pf": "MW", "qf": "MVAr"}
SATISFACTION_FAMILIES = ("2a", "3a", "3b", "4")
VIOLATION_FAMILIES = ("2a", "3a", "3b", "4", "6a", "6b")
VIOLATION_UNITS = {"2a": "kV", "3a": "MW", "3b": "MVAr", "4": "MVA", "6a": "MW", "6b": "MVAr"}


class EvalError(ValueError):
    pass


def model_predictions(model, ds: Dataset) -> dict[str, np.ndarray]:
    return model.predict_arrays(ds.inputs())


def _as_op(pred: dict) -> OperatingPoint:
    return OperatingPoint(pred["v"], pred["theta"], pred["pg"], pred["qg"])


def _physical(net: Network, op: OperatingPoint) -> dict[str, np.ndarray]:
    """Quantities in physical units; flows are derived from the voltages."""
    fl = all_flows(net, op)
    base = net.base_mva
    return {
        "v": op.v * net.arrays.base_kv,
        "theta": np.degrees(op.theta),
        "pg": op.pg * base,
        "qg": op.qg * base,
        "pf": fl.pf * base,
        "qf": fl.qf * base,
    }


@dataclass
class Profile:
    """Per-entity error statistics sorted by ground-truth mean."""

    entity: np.ndarray
    truth_mean: np.ndarray
    err_mean: np.ndarray
    err_lo: np.ndarray
    err_hi: np.ndarray


def prediction_errors(net: Network, ds: Dataset, pred: dict) -> tuple[dict, dict, dict]:
    """Mean absolute errors in physical units, the same in p.u./rad, and
    per-entity profiles."""
    if len(ds) == 0:
        raise EvalError("empty test set")
    truth_op = _as_op(ds.targets())
    pred_op = _as_op(pred)
    t = _physical(net, truth_op)
    p = _physical(net, pred_op)
    errors, profiles = {}, {}
    for q in QUANTITIES:
        err = np.abs(t[q] - p[q])
        errors[q] = float(err.mean()) if err.size else 0.0
        gt = t[q].mean(axis=0)
        order = np.argsort(gt, kind="stable")
        profiles[q] = Profile(
            entity=order,
            truth_mean=gt[order],
            err_mean=err.mean(axis=0)[order],
            err_lo=np.percentile(err, 2.5, axis=0)[order],
            err_hi=np.percentile(err, 97.5, axis=0)[order],
        )
    truth = ds.targets()
    pu = {k: float(np.abs(truth[k] - pred[k]).mean()) for k in ("v", "theta", "pg", "qg")}
    return errors, pu, profiles


def feasibility_summary(net: Network, ds: Dataset, pred: dict, *, tau: float = TAU_SAT,
                        thermal: str = "squared") -> tuple[dict, dict]:
    """Satisfaction % per bound family and mean violation among violated
    (instance, constraint) pairs in physical units (None when nothing is violated)."""
    if len(ds) == 0:
        raise EvalError("empty test set")
    loads = ds.loads()
    op = _as_op(pred)
    viol = constraint_violations(net, loads, op, thermal=thermal)
    sat = {}
    for f in SATISFACTION_FAMILIES:
        v = viol[f]
        sat[f] = 100.0 * (1.0 - np.count_nonzero(v > tau) / v.size) if v.size else 100.0
    a = net.arrays
    base = net.base_mva
    phys = {
        "2a": viol["2a"] * a.base_kv,
        "3a": viol["3a"] * base,
        "3b": viol["3b"] * base,
        "6a": viol["6a"] * base,
        "6b": viol["6b"] * base,
    }
    fl = all_flows(net, op)
    lim = np.isfinite(a.dir_smax)
    smag = np.hypot(fl.pf[..., lim], fl.qf[..., lim])
    phys["4"] = np.maximum(smag - a.dir_smax[lim], 0.0) * base
    mean_viol = {}
    for f in VIOLATION_FAMILIES:
        mask = viol[f] > tau
        mean_viol[f] = float(phys[f][mask].mean()) if mask.any() else None
    return sat, mean_viol


@dataclass
class GapResult:
    raw: float
    loadflow: float | None
    n_loadflow_failed: int = 0
    loadflow_ops: list = field(default_factory=list, repr=False)


def objective_gaps(net: Network, ds: Dataset, pred: dict, *, loadflow: bool = True,
                   solver: SolverConfig = SolverConfig()) -> GapResult:
    """Mean |1 - c_hat / c| in percent for raw and load-flow-projected predictions."""
    c = ds.objectives()
    if np.any(c <= 0):
        raise EvalError("optimal objectives must be positive to form relative gaps")
    raw = float(np.mean(np.abs(1.0 - dispatch_cost(net, pred["pg"]) / c)) * 100.0)
    if not loadflow:
        return GapResult(raw, None)
    gaps, ops, failed = [], [], 0
    loads = ds.loads()
    for i in range(len(ds)):
        load = LoadPoint(loads.p[i], loads.q[i])
        out = solve_loadflow(net, load, (pred["pg"][i], pred["v"][i]), solver)
        if not out.ok:
            failed += 1
            ops.append(None)
            continue
        ops.append(out.solution)
        gaps.append(abs(1.0 - dispatch_cost(net, out.solution.pg) / c[i]))
    lf = float(np.mean(gaps) * 100.0) if gaps else None
    return GapResult(raw, lf, failed, ops)


def peak_memory_mb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def timing_summary(runs: list[dict]) -> dict:
    """Aggregate instrumented runs: each has a ``kind`` (train, predict,
    acopf) and ``seconds``; optional ``peak_mb``."""
    if not runs:
        return {}
    out = {}
    by = {}
    for r in runs:
        by.setdefault(r["kind"], []).append(float(r["seconds"]))
    if "train" in by:
        out["train_minutes"] = sum(by["train"]) / 60.0
    if "predict" in by:
        out["predict_seconds"] = statistics.median(by["predict"])
        out["predict_runs"] = len(by["predict"])
    if "acopf" in by:
        out["acopf_seconds"] = statistics.fmean(by["acopf"])
    peaks = [r["peak_mb"] for r in runs if "peak_mb" in r]
    if peaks:
        out["peak_memory_mb"] = max(peaks)
    return out


@dataclass
class EvalReport:
    errors: dict
    errors_pu: dict
    profiles: dict
    satisfaction: dict
    mean_violation: dict
    gaps: GapResult | None = None
    timing: dict = field(default_factory=dict)


def evaluate(net: Network, ds: Dataset, pred: dict, *, loadflow: bool = False,
             solver: SolverConfig = SolverConfig(), tau: float = TAU_SAT, thermal: str = "squared") -> EvalReport:
    errors, pu, profiles = prediction_errors(net, ds, pred)
    sat, mv = feasibility_summary(net, ds, pred, tau=tau, thermal=thermal)
    gaps = objective_gaps(net, ds, pred, loadflow=loadflow, solver=solver)
    return EvalReport(errors, pu, profiles, sat, mv, gaps)


def _fmt(x) -> str:
    return "-" if x is None else repr(float(x))


def write_report(report: EvalReport, outdir) -> list[Path]:
    """Write the CSV tables plus gnuplot-ready .dat profiles; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, header, rows):
        path = outdir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    table("errors.csv", ["quantity", "unit", "mean_abs_error", "mean_abs_error_pu"],
          [[q, UNITS[q], _fmt(report.errors[q]), _fmt(report.errors_pu.get(q))] for q in QUANTITIES])
    table("feasibility.csv", ["family", "satisfied_percent"],
          [[f, _fmt(report.satisfaction[f])] for f in SATISFACTION_FAMILIES])
    table("violations.csv", ["family", "unit", "mean_violation_of_violated"],
          [[f, VIOLATION_UNITS[f], _fmt(report.mean_violation[f])] for f in VIOLATION_FAMILIES])
    if report.gaps is not None:
        g = report.gaps
        rows = [["raw", _fmt(g.raw), ""]]
        if g.loadflow is not None or g.n_loadflow_failed:
            rows.append(["loadflow", _fmt(g.loadflow), g.n_loadflow_failed])
        table("gaps.csv", ["kind", "gap_percent", "n_failed"], rows)
    if report.timing:
        table("timing.csv", ["metric", "value"], [[k, _fmt(v)] for k, v in sorted(report.timing.items())])
    for q, prof in report.profiles.items():
        rows = [[int(e), _fmt(t), _fmt(m), _fmt(lo), _fmt(hi)]
                for e, t, m, lo, hi in zip(prof.entity, prof.truth_mean, prof.err_mean, prof.err_lo, prof.err_hi)]
        table(f"profiles_{q}.csv", ["entity", "ground_truth_mean", "err_mean", "err_p2.5", "err_p97.5"], rows)
        path = outdir / f"profiles_{q}.dat"
        with open(path, "w") as fh:
            fh.write(f"# rank entity ground_truth_mean err_mean err_p2.5 err_p97.5 ({UNITS[q]})\n")
            for rank, r in enumerate(rows):
                fh.write(" ".join(str(x) for x in [rank, *r]) + "\n")
        written.append(path)
    return written
