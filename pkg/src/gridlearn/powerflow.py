"""AC power-flow physics: branch flows, bus balance, dispatch cost and
violation degrees of every constraint family.

Everything here is a pure function of a Network and numpy arrays. Array
arguments may carry leading batch dimensions; the trailing axis indexes
buses, generators, loads or directed branches.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .grid import Network

FAMILIES = ("2a", "2b", "3a", "3b", "4", "6a", "6b")
BOUND_FAMILIES = ("2a", "3a", "3b", "4")
TAU_SAT = 1e-6


@dataclass(frozen=True)
class LoadPoint:
    """Demand per load (p.u.), ordered like ``Network.loads``."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q], axis=-1)

    @classmethod
    def from_vector(cls, x) -> "LoadPoint":
        x = np.asarray(x, dtype=float)
        half = x.shape[-1] // 2
        return cls(x[..., :half], x[..., half:])


@dataclass(frozen=True)
class OperatingPoint:
    v: np.ndarray
    theta: np.ndarray
    pg: np.ndarray
    qg: np.ndarray

    def __post_init__(self):
        for name in ("v", "theta", "pg", "qg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def check(self, net: Network) -> None:
        if self.v.shape[-1] != net.n_bus or self.theta.shape[-1] != net.n_bus:
            raise ValueError("voltage vectors do not match the number of buses")
        if self.pg.shape[-1] != net.n_gen or self.qg.shape[-1] != net.n_gen:
            raise ValueError("dispatch vectors do not match the number of generators")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("v", "theta", "pg", "qg")}

    @classmethod
    def from_dict(cls, d: dict) -> "OperatingPoint":
        return cls(d["v"], d["theta"], d["pg"], d["qg"])


@dataclass(frozen=True)
class FlowSet:
    """Directed flows: entries [0, e) are from->to, entries [e, 2e) to->from."""

    pf: np.ndarray
    qf: np.ndarray


def line_flow(v_i, v_j, theta_i, theta_j, g, b):
    """Active and reactive flow leaving bus i on a series branch (i, j)."""
    d = np.subtract(theta_i, theta_j)
    s, c = np.sin(d), np.cos(d)
    vv = np.multiply(v_i, v_j)
    vi2 = np.multiply(v_i, v_i)
    pf = g * vi2 - vv * (b * s + g * c)
    qf = -b * vi2 - vv * (g * s - b * c)
    return pf, qf


def all_flows(net: Network, op: OperatingPoint) -> FlowSet:
    a = net.arrays
    pf, qf = line_flow(
        op.v[..., a.dir_from],
        op.v[..., a.dir_to],
        op.theta[..., a.dir_from],
        op.theta[..., a.dir_to],
        a.dir_g,
        a.dir_b,
    )
    return FlowSet(pf, qf)


def bus_demand(net: Network, load: LoadPoint) -> tuple[np.ndarray, np.ndarray]:
    m = net.arrays.load_inc
    return load.p @ m, load.q @ m


def balance_residuals(
    net: Network, load: LoadPoint, op: OperatingPoint, flows: FlowSet
) -> tuple[np.ndarray, np.ndarray]:
    """Signed bus residuals: generation - demand - outgoing flow."""
    a = net.arrays
    pd, qd = bus_demand(net, load)
    r_p = op.pg @ a.gen_inc - pd - flows.pf @ a.from_inc
    r_q = op.qg @ a.gen_inc - qd - flows.qf @ a.from_inc
    return r_p, r_q


def violation_degree_ineq(sigma):
    return np.maximum(0.0, sigma)


def violation_degree_eq(sigma):
    return np.abs(sigma)


def _two_sided(x, lo, hi):
    return violation_degree_ineq(lo - x) + violation_degree_ineq(x - hi)


def constraint_violations(
    net: Network, load: LoadPoint, op: OperatingPoint, *, thermal: str = "squared"
) -> dict[str, np.ndarray]:
    """Per-constraint violation degrees for each family (trailing axis
    indexes the constraints of that family)."""
    a = net.arrays
    flows = all_flows(net, op)
    r_p, r_q = balance_residuals(net, load, op, flows)
    delta = op.theta[..., a.br_from] - op.theta[..., a.br_to]
    limited = np.isfinite(a.dir_smax)
    smax = a.dir_smax[limited]
    s2 = flows.pf[..., limited] ** 2 + flows.qf[..., limited] ** 2
    limit = smax**2 if thermal == "squared" else smax
    return {
        "2a": _two_sided(op.v, a.v_min, a.v_max),
        "2b": _two_sided(delta, -a.br_theta_delta, a.br_theta_delta),
        "3a": _two_sided(op.pg, a.p_min, a.p_max),
        "3b": _two_sided(op.qg, a.q_min, a.q_max),
        "4": violation_degree_ineq(s2 - limit),
        "6a": violation_degree_eq(r_p),
        "6b": violation_degree_eq(r_q),
    }


@dataclass
class ViolationReport:
    """Mean violation degree per family plus satisfaction bookkeeping."""

    nu: dict[str, float]
    satisfied: dict[str, np.ndarray] = field(repr=False)
    violations: dict[str, np.ndarray] = field(repr=False)
    tau: float = TAU_SAT

    @property
    def n_satisfied(self) -> dict[str, int]:
        return {f: int(self.satisfied[f].sum()) for f in self.nu}

    @property
    def n_total(self) -> dict[str, int]:
        return {f: int(self.satisfied[f].size) for f in self.nu}

    def max_nu(self) -> float:
        return max(self.nu.values())

    def feasible(self, tol: float | None = None) -> bool:
        return self.max_nu() <= (self.tau if tol is None else tol)

    def csv_rows(self, instance_id) -> list[list]:
        return [
            [instance_id, f, repr(self.nu[f]), self.n_satisfied[f], self.n_total[f]]
            for f in FAMILIES
            if f in self.nu
        ]


def violation_report(
    net: Network,
    load: LoadPoint,
    op: OperatingPoint,
    *,
    tau: float = TAU_SAT,
    thermal: str = "squared",
) -> ViolationReport:
    op.check(net)
    viol = constraint_violations(net, load, op, thermal=thermal)
    nu = {f: float(v.mean()) if v.size else 0.0 for f, v in viol.items()}
    sat = {f: v <= tau for f, v in viol.items()}
    return ViolationReport(nu=nu, satisfied=sat, violations=viol, tau=tau)


def write_reports_csv(reports, path=None) -> str:
    """CSV with one row per (instance, family)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "family", "mean_violation", "n_satisfied", "n_total"])
    for iid, rep in reports:
        w.writerows(rep.csv_rows(iid))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def dispatch_cost(net: Network, pg) -> float | np.ndarray:
    """Generation cost in $/h, polynomial evaluated on MW; c0 always counts."""
    c = net.arrays.cost
    p_mw = np.asarray(pg, dtype=float) * net.base_mva
    return ((c[:, 0] * p_mw + c[:, 1]) * p_mw + c[:, 2]).sum(axis=-1)
