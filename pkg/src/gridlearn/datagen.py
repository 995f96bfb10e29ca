"""Labeled (load snapshot -> AC-OPF solution) datasets.

Loads ramp linearly from a per-load lower multiplier to an upper one with a
small multiplicative jitter; every snapshot is solved with the embedded
AC-OPF solver and infeasible ones are dropped. Datasets are JSON-lines
files with a sidecar manifest; every record is re-verified against the
physics when read back.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .grid import Network
from .powerflow import LoadPoint, OperatingPoint, violation_report
from .seeding import stream
from .solver import SolverConfig, Status, solve_acopf

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_points: int = 1000
    seed: int = 0
    lb_range: tuple = (0.8, 0.9)
    ub_range: tuple = (1.1, 1.2)
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lb_range", tuple(float(x) for x in self.lb_range))
        object.__setattr__(self, "ub_range", tuple(float(x) for x in self.ub_range))
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        lo1, hi1 = self.lb_range
        lo2, hi2 = self.ub_range
        if not (0 < lo1 <= hi1 < lo2 <= hi2):
            raise ValueError("need 0 < lb_low <= lb_high < ub_low <= ub_high")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lb_range"] = list(self.lb_range)
        d["ub_range"] = list(self.ub_range)
        return d


@dataclass(frozen=True)
class DataPoint:
    load: LoadPoint
    solution: OperatingPoint
    objective: float
    c: float
    seed_index: int = -1
    solver_status: str = Status.OPTIMAL.value

    def to_record(self, case_id: str) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": case_id,
            "c": self.c,
            "load": {"p": self.load.p.tolist(), "q": self.load.q.tolist()},
            "solution": self.solution.to_dict(),
            "objective": self.objective,
            "solver_status": self.solver_status,
            "seed_index": self.seed_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DataPoint":
        return cls(
            load=LoadPoint(rec["load"]["p"], rec["load"]["q"]),
            solution=OperatingPoint.from_dict(rec["solution"]),
            objective=float(rec["objective"]),
            c=float(rec["c"]),
            seed_index=int(rec.get("seed_index", -1)),
            solver_status=str(rec.get("solver_status", Status.OPTIMAL.value)),
        )


@dataclass
class Dataset:
    case_id: str
    case_hash: str
    points: list[DataPoint]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.case_id, self.case_hash, [self.points[int(i)] for i in idx], dict(self.manifest))

    def inputs(self) -> np.ndarray:
        """(N, 2 * n_load) matrix of [p | q] demand."""
        return np.stack([p.load.as_vector() for p in self.points])

    def targets(self) -> dict[str, np.ndarray]:
        return {k: np.stack([getattr(p.solution, k) for p in self.points]) for k in ("v", "theta", "pg", "qg")}

    def loads(self) -> LoadPoint:
        return LoadPoint(np.stack([p.load.p for p in self.points]), np.stack([p.load.q for p in self.points]))

    def objectives(self) -> np.ndarray:
        return np.array([p.objective for p in self.points])


def sample_bounds(net: Network, rng: np.random.Generator, cfg: GenConfig = GenConfig()):
    """Per-load lower and upper demand; one draw per load scales p and q together."""
    if net.n_load < 1:
        raise ValueError("network has no loads")
    a = net.arrays
    lo = rng.uniform(*cfg.lb_range, size=net.n_load)
    hi = rng.uniform(*cfg.ub_range, size=net.n_load)
    return LoadPoint(lo * a.load_p0, lo * a.load_q0), LoadPoint(hi * a.load_p0, hi * a.load_q0)


def noise_halfwidth(lb: LoadPoint, ub: LoadPoint, cfg: GenConfig) -> np.ndarray:
    """Relative jitter half-width per load: noise_scale * |ub - lb| / (100 N).

    The spread is taken on active demand, or on reactive demand for loads
    with no active component.
    """
    span = np.where(lb.p != 0, np.abs(ub.p - lb.p), np.abs(ub.q - lb.q))
    return cfg.noise_scale * span / (100.0 * cfg.n_points)


def snapshot(lb: LoadPoint, ub: LoadPoint, c: float, rng: np.random.Generator, cfg: GenConfig) -> LoadPoint:
    if not 0.0 <= c <= 1.0:
        raise ValueError("ramp fraction c must lie in [0, 1]")
    width = noise_halfwidth(lb, ub, cfg)
    xi = rng.uniform(1.0 - width, 1.0 + width)
    p = ((1.0 - c) * lb.p + c * ub.p) * xi
    q = ((1.0 - c) * lb.q + c * ub.q) * xi
    return LoadPoint(p, q)


def ramp_fractions(n_points: int) -> np.ndarray:
    return np.arange(n_points + 1) / n_points


def candidate_loads(net: Network, cfg: GenConfig) -> list[tuple[int, float, LoadPoint]]:
    lb, ub = sample_bounds(net, stream(cfg.seed, "datagen"), cfg)
    return [
        (k, float(c), snapshot(lb, ub, float(c), stream(cfg.seed, "datagen", k), cfg))
        for k, c in enumerate(ramp_fractions(cfg.n_points))
    ]


def _max_violation(net: Network, load: LoadPoint, op: OperatingPoint, thermal: str) -> float:
    rep = violation_report(net, load, op, thermal=thermal)
    return max(float(v.max(initial=0.0)) for v in rep.violations.values())


_WORKER: dict = {}


def _init_worker(net, solver_cfg):
    _WORKER["net"] = net
    _WORKER["cfg"] = solver_cfg


def _solve_one(item):
    k, c, load = item
    net, cfg = _WORKER["net"], _WORKER["cfg"]
    with threadpool_limits(1):
        out = solve_acopf(net, load, cfg)
        if out.ok and _max_violation(net, load, out.solution, cfg.thermal) > cfg.feas_tol:
            return k, c, load, Status.INFEASIBLE.value, None, math.nan
    return k, c, load, out.status.value, out.solution, out.objective


def generate(net: Network, cfg: GenConfig, solver: SolverConfig = SolverConfig(), jobs: int = 1,
             progress=None) -> Dataset:
    """Solve every ramp snapshot and keep the feasible ones, in index order."""
    items = candidate_loads(net, cfg)
    if jobs <= 1:
        _init_worker(net, solver)
        results = []
        for it in items:
            results.append(_solve_one(it))
            if progress:
                progress(len(results), len(items))
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(net, solver)) as ex:
            results = list(ex.map(_solve_one, items, chunksize=max(1, len(items) // (4 * jobs))))
    results.sort(key=lambda r: r[0])
    points, discarded = [], []
    for k, c, load, status, sol, obj in results:
        if sol is None:
            discarded.append({"seed_index": k, "c": c, "status": status})
            continue
        points.append(DataPoint(load, sol, float(obj), c, k, status))
    if discarded:
        log.warning("%d of %d snapshots discarded (no feasible AC-OPF solution)", len(discarded), len(items))
    if len(points) < 2:
        raise DatasetError(f"only {len(points)} feasible snapshot(s); at least 2 are needed")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "case_id": net.name,
        "case_hash": net.case_hash,
        "gen_config": cfg.to_dict(),
        "solver_config": solver.to_dict(),
        "n_candidates": len(items),
        "n_feasible": len(points),
        "n_discarded": len(discarded),
        "discarded": discarded,
    }
    return Dataset(net.name, net.case_hash, points, manifest)


def split(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition; the test part has floor((1 - ratio) * |ds|) points."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(ds)
    if n < 2:
        raise DatasetError("need at least 2 points to split")
    n_test = math.floor(round((1.0 - ratio) * n, 9))
    n_test = min(max(n_test, 1), n - 1)
    perm = stream(seed, "split").permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return ds.subset(train), ds.subset(test)


# -- persistence


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for p in ds.points:
            fh.write(_dumps(p.to_record(ds.case_id)) + "\n")
    with open(manifest_path(path), "w") as fh:
        fh.write(json.dumps(ds.manifest, sort_keys=True, indent=1) + "\n")


def _read_records(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def _check_record(net: Network, rec: dict, tol: float, thermal: str) -> DataPoint:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError("unsupported schema_version")
    try:
        dp = DataPoint.from_record(rec)
        dp.solution.check(net)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"bad record structure ({exc})") from exc
    if dp.load.p.shape != (net.n_load,) or dp.load.q.shape != (net.n_load,):
        raise DatasetError("load vector does not match the network")
    viol = _max_violation(net, dp.load, dp.solution, thermal)
    if not viol <= tol:
        raise DatasetError(f"solution violates the network constraints by {viol:.3g}")
    return dp


def load_dataset(path, net: Network, tol: float | None = None) -> Dataset:
    """Read a dataset written by save_dataset; any failing record is an error."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    if manifest.get("case_hash") not in (None, net.case_hash):
        raise DatasetError("dataset was generated for a different case (case hash mismatch)")
    scfg = manifest.get("solver_config", {})
    tol = scfg.get("feas_tol", 1e-6) if tol is None else tol
    thermal = scfg.get("thermal", "squared")
    points = []
    for lineno, rec in _read_records(path):
        try:
            points.append(_check_record(net, rec, tol, thermal))
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if not points:
        raise DatasetError(f"{path}: no records")
    return Dataset(net.name, net.case_hash, points, manifest)


def import_dataset(path, net: Network, tol: float = 1e-6, thermal: str = "squared") -> tuple[Dataset, int]:
    """Ingest records produced by an external solver, keeping those that pass
    re-verification. Returns the dataset and the number of rejected records."""
    points, rejected = [], 0
    for lineno, rec in _read_records(path):
        try:
            points.append(_check_record(net, rec, tol, thermal))
        except DatasetError as exc:
            rejected += 1
            log.warning("%s:%d rejected: %s", path, lineno, exc)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "case_id": net.name,
        "case_hash": net.case_hash,
        "imported_from": str(path),
        "n_feasible": len(points),
        "n_rejected": rejected,
        "solver_config": {"feas_tol": tol, "thermal": thermal},
    }
    return Dataset(net.name, net.case_hash, points, manifest), rejected
