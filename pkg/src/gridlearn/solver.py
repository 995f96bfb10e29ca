"""Desk-scale AC-OPF and load-flow projection solver.

Augmented Lagrangian (PHR form) on the bus balance equalities and on the
thermal / angle-difference inequalities. Variable bounds (voltage magnitude,
active and reactive dispatch) stay exact: each subproblem is a box-constrained
minimisation solved by a projected Newton method (exact Hessian, modified
Cholesky, Armijo backtracking along the projection arc). Flows are always
derived from (v, theta), never decision variables.
"""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import Network
from .powerflow import LoadPoint, OperatingPoint, bus_demand, dispatch_cost


class Status(str, enum.Enum):
    OPTIMAL = "Optimal-local"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 500
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e9
    infeasible_tol: float = 1e-4
    thermal: str = "squared"

    def __post_init__(self):
        if not (self.feas_tol > 0 and self.opt_tol > 0 and self.infeasible_tol > 0):
            raise ValueError("solver tolerances must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration budgets must be positive")
        if self.thermal not in ("squared", "literal"):
            raise ValueError("thermal must be 'squared' or 'literal'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class SolveOutcome:
    status: Status
    solution: OperatingPoint | None
    objective: float
    iterations: dict = field(default_factory=dict)
    wall_time: float = 0.0
    infeasibility: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


class _Problem:
    """Variables x = [v (n), theta without the reference bus (n-1), pg (m), qg (m)].

    Equalities h(x) = [balance_p; balance_q]; inequalities g(x) <= 0 are the
    thermal limits of limited directed branches followed by the upper and
    lower angle-difference limits of every branch.
    """

    def __init__(self, net: Network, load: LoadPoint, objective, thermal: str):
        a = net.arrays
        self.net = net
        n, m = net.n_bus, net.n_gen
        self.n, self.m = n, m
        self.ref = net.ref_bus
        self.nonref = np.array([i for i in range(n) if i != self.ref], dtype=np.intp)
        self.df, self.dt = a.dir_from, a.dir_to
        self.g, self.b = a.dir_g, a.dir_b
        self.lim = np.flatnonzero(np.isfinite(a.dir_smax))
        smax = a.dir_smax[self.lim]
        self.slim = smax**2 if thermal == "squared" else smax
        self.tdelta = a.br_theta_delta
        self.gen_bus = a.gen_bus
        self.pd, self.qd = bus_demand(net, load)
        self.objective = objective
        self.sl_v = slice(0, n)
        self.sl_th = slice(n, 2 * n - 1)
        self.sl_pg = slice(2 * n - 1, 2 * n - 1 + m)
        self.sl_qg = slice(2 * n - 1 + m, 2 * n - 1 + 2 * m)
        self.size = N = 2 * n - 1 + 2 * m
        self.n_eq = 2 * n
        self.n_ineq = len(self.lim) + 2 * net.n_branch

        # column of theta_i in x; the reference bus maps to a dummy column N
        th_col = np.full(n, N, dtype=np.intp)
        th_col[self.nonref] = n + np.arange(n - 1)
        self.th_col = th_col
        # per directed branch: columns of (v_i, v_j, theta_i, theta_j)
        self.cols = np.stack([self.df, self.dt, th_col[self.df], th_col[self.dt]], axis=1)
        e = net.n_branch
        self.br_cols = np.stack([th_col[a.br_from], th_col[a.br_to]], axis=1)
        self.angle_grad = np.zeros((2 * e, N + 1))
        rows = np.arange(e)
        self.angle_grad[rows, self.br_cols[:, 0]] += 1.0
        self.angle_grad[rows, self.br_cols[:, 1]] -= 1.0
        self.angle_grad[e + rows] = -self.angle_grad[rows]
        self.angle_grad = self.angle_grad[:, :N]
        self.gen_jac = np.zeros((2 * n, N))
        self.gen_jac[self.gen_bus, self.sl_pg.start + np.arange(m)] = 1.0
        self.gen_jac[n + self.gen_bus, self.sl_qg.start + np.arange(m)] = 1.0
        self.from_inc_t = a.from_inc.T

        lo = np.full(N, -np.inf)
        hi = np.full(N, np.inf)
        lo[self.sl_v], hi[self.sl_v] = a.v_min, a.v_max
        lo[self.sl_pg], hi[self.sl_pg] = a.p_min, a.p_max
        lo[self.sl_qg], hi[self.sl_qg] = a.q_min, a.q_max
        self.lo, self.hi = lo, hi

    # -- packing

    def pack(self, op: OperatingPoint) -> np.ndarray:
        x = np.empty(self.size)
        x[self.sl_v] = op.v
        x[self.sl_th] = (op.theta - op.theta[self.ref])[self.nonref]
        x[self.sl_pg] = op.pg
        x[self.sl_qg] = op.qg
        return np.clip(x, self.lo, self.hi)

    def unpack(self, x) -> OperatingPoint:
        theta = np.zeros(self.n)
        theta[self.nonref] = x[self.sl_th]
        return OperatingPoint(
            x[self.sl_v].copy(), theta, x[self.sl_pg].copy(), x[self.sl_qg].copy()
        )

    # -- evaluation

    def physics(self, x) -> dict:
        v = x[self.sl_v]
        theta = np.zeros(self.n)
        theta[self.nonref] = x[self.sl_th]
        vi, vj = v[self.df], v[self.dt]
        d = theta[self.df] - theta[self.dt]
        s, c = np.sin(d), np.cos(d)
        g, b = self.g, self.b
        A = b * s + g * c
        B = g * s - b * c
        dA = b * c - g * s
        dB = g * c + b * s
        vv = vi * vj
        pf = g * vi * vi - vv * A
        qf = -b * vi * vi - vv * B
        n = self.n
        hp = (np.bincount(self.gen_bus, x[self.sl_pg], minlength=n) - self.pd
              - np.bincount(self.df, pf, minlength=n))
        hq = (np.bincount(self.gen_bus, x[self.sl_qg], minlength=n) - self.qd
              - np.bincount(self.df, qf, minlength=n))
        e = len(self.tdelta)
        dth = d[:e]
        ineq = np.concatenate(
            [pf[self.lim] ** 2 + qf[self.lim] ** 2 - self.slim, dth - self.tdelta, -dth - self.tdelta]
        )
        # local first derivatives w.r.t. (v_i, v_j, delta)
        dp = np.stack([2 * g * vi - vj * A, -vi * A, -vv * dA], axis=1)
        dq = np.stack([-2 * b * vi - vj * B, -vi * B, -vv * dB], axis=1)
        return dict(vi=vi, vj=vj, vv=vv, A=A, B=B, dA=dA, dB=dB, pf=pf, qf=qf,
                    dp=dp, dq=dq, h=np.concatenate([hp, hq]), ineq=ineq)

    def constraints(self, x):
        st = self.physics(x)
        return st["h"], st["ineq"]

    def infeasibility(self, x) -> float:
        h, gi = self.constraints(x)
        return max(np.abs(h).max(initial=0.0), np.maximum(gi, 0.0).max(initial=0.0))

    def _flow_jac(self, local) -> np.ndarray:
        """Dense Jacobian (2e, N) of directed flows from local (vi, vj, delta) derivatives."""
        N = self.size
        k = len(self.df)
        J = np.zeros((k, N + 1))
        rows = np.arange(k)
        J[rows, self.cols[:, 0]] = local[:, 0]
        J[rows, self.cols[:, 1]] = local[:, 1]
        J[rows, self.cols[:, 2]] += local[:, 2]
        J[rows, self.cols[:, 3]] -= local[:, 2]
        return J[:, :N]

    def _flow_grad(self, local, weight) -> np.ndarray:
        """sum_k weight_k * grad(flow_k) as a length-N vector."""
        N = self.size
        out = np.zeros(N + 1)
        w = local * weight[:, None]
        out += np.bincount(self.cols[:, 0], w[:, 0], minlength=N + 1)
        out += np.bincount(self.cols[:, 1], w[:, 1], minlength=N + 1)
        out += np.bincount(self.cols[:, 2], w[:, 2], minlength=N + 1)
        out -= np.bincount(self.cols[:, 3], w[:, 2], minlength=N + 1)
        return out[:N]

    def _flow_hess(self, st, wp, wq) -> np.ndarray:
        """sum_k wp_k * hess(pf_k) + wq_k * hess(qf_k) as a dense (N, N) matrix."""
        N = self.size
        vi, vj, vv = st["vi"], st["vj"], st["vv"]
        A, B, dA, dB = st["A"], st["B"], st["dA"], st["dB"]
        g, b = self.g, self.b
        h_ii = wp * 2 * g - wq * 2 * b
        h_ij = -(wp * A + wq * B)
        h_id = -vj * (wp * dA + wq * dB)
        h_jd = -vi * (wp * dA + wq * dB)
        h_dd = vv * (wp * A + wq * B)
        ci, cj, ti, tj = self.cols.T
        rows = np.concatenate([ci, ci, cj, ci, ti, ci, tj, cj, ti, cj, tj, ti, ti, tj, tj, ti])
        cols = np.concatenate([ci, cj, ci, ti, ci, tj, ci, ti, cj, tj, cj, ti, tj, ti, tj, tj])
        vals = np.concatenate([h_ii, h_ij, h_ij, h_id, h_id, -h_id, -h_id, h_jd, h_jd,
                               -h_jd, -h_jd, h_dd, -h_dd, -h_dd, h_dd, np.zeros_like(h_dd)])
        flat = np.bincount(rows * (N + 1) + cols, vals, minlength=(N + 1) ** 2)
        return flat.reshape(N + 1, N + 1)[:N, :N]

    def _objective_parts(self, x):
        f, gv, gpg, hv, hpg = self.objective(x[self.sl_v], x[self.sl_pg])
        grad = np.zeros(self.size)
        grad[self.sl_v] = gv
        grad[self.sl_pg] = gpg
        hdiag = np.zeros(self.size)
        hdiag[self.sl_v] = hv
        hdiag[self.sl_pg] = hpg
        return f, grad, hdiag

    def lagrangian_grad(self, x, st, w_eq, w_ineq, obj_grad) -> np.ndarray:
        """obj_grad + J_h^T w_eq + J_g^T w_ineq."""
        n, nl = self.n, len(self.lim)
        wpf = -w_eq[:n][self.df]
        wqf = -w_eq[n:][self.df]
        if nl:
            wt = w_ineq[:nl]
            wpf[self.lim] += 2 * wt * st["pf"][self.lim]
            wqf[self.lim] += 2 * wt * st["qf"][self.lim]
        grad = obj_grad + self._flow_grad(st["dp"], wpf) + self._flow_grad(st["dq"], wqf)
        grad += self.gen_jac.T @ w_eq
        grad += self.angle_grad.T @ w_ineq[nl:]
        return grad

    def augmented(self, x, lam, nu, mu, hessian=False):
        st = self.physics(x)
        h, gi = st["h"], st["ineq"]
        f, ograd, ohess = self._objective_parts(x)
        w_eq = lam + mu * h
        u = np.maximum(0.0, nu + mu * gi)
        val = f + lam @ h + 0.5 * mu * (h @ h) + (u @ u - nu @ nu) / (2 * mu)
        grad = self.lagrangian_grad(x, st, w_eq, u, ograd)
        if not hessian:
            return val, grad
        return val, grad, self._al_hessian(st, w_eq, u, mu, ohess)

    def _al_hessian(self, st, w_eq, u, mu, ohess) -> np.ndarray:
        n, nl = self.n, len(self.lim)
        wpf = -w_eq[:n][self.df]
        wqf = -w_eq[n:][self.df]
        active = u > 0
        Jp = self._flow_jac(st["dp"])
        Jq = self._flow_jac(st["dq"])
        if nl:
            ut = u[:nl]
            wpf[self.lim] += 2 * ut * st["pf"][self.lim]
            wqf[self.lim] += 2 * ut * st["qf"][self.lim]
        H = self._flow_hess(st, wpf, wqf)
        H[np.diag_indices_from(H)] += ohess
        Jh = self.gen_jac - np.concatenate([self.from_inc_t @ Jp, self.from_inc_t @ Jq])
        H += mu * (Jh.T @ Jh)
        if nl:
            act = np.flatnonzero(active[:nl])
            if len(act):
                k = self.lim[act]
                Jpa, Jqa = Jp[k], Jq[k]
                ut = u[:nl][act][:, None]
                H += 2 * (Jpa.T @ (ut * Jpa) + Jqa.T @ (ut * Jqa))
                Jg = 2 * (st["pf"][k][:, None] * Jpa + st["qf"][k][:, None] * Jqa)
                H += mu * (Jg.T @ Jg)
        act = np.flatnonzero(active[nl:])
        if len(act):
            Ja = self.angle_grad[act]
            H += mu * (Ja.T @ Ja)
        return H

    def restoration(self, x, hessian=False):
        """0.5 * squared constraint violation (equalities and active inequalities)."""
        zeros = (0.0, np.zeros(self.size), np.zeros(self.size))
        st = self.physics(x)
        h, gi = st["h"], st["ineq"]
        gp = np.maximum(gi, 0.0)
        val = 0.5 * (h @ h + gp @ gp)
        grad = self.lagrangian_grad(x, st, h, gp, zeros[1])
        if not hessian:
            return val, grad
        # Gauss-Newton plus the curvature of the constraint functions
        return val, grad, self._al_hessian(st, h, gp, 1.0, zeros[2])

    def jacobian_ineq(self, x) -> np.ndarray:
        st = self.physics(x)
        k = self.lim
        Jp = self._flow_jac(st["dp"])[k]
        Jq = self._flow_jac(st["dq"])[k]
        Jt = 2 * (st["pf"][k][:, None] * Jp + st["qf"][k][:, None] * Jq)
        return np.concatenate([Jt, self.angle_grad])

    def jacobian_eq(self, x) -> np.ndarray:
        st = self.physics(x)
        Jp = self._flow_jac(st["dp"])
        Jq = self._flow_jac(st["dq"])
        return self.gen_jac - np.concatenate([self.from_inc_t @ Jp, self.from_inc_t @ Jq])


def _cost_objective(net: Network, scale: float):
    c = net.arrays.cost
    base = net.base_mva
    zero_v = np.zeros(net.n_bus)
    hpg = 2 * c[:, 0] * base * base / scale

    def objective(v, pg):
        p = pg * base
        f = ((c[:, 0] * p + c[:, 1]) * p + c[:, 2]).sum()
        grad = (2 * c[:, 0] * p + c[:, 1]) * base
        return f / scale, zero_v, grad / scale, zero_v, hpg

    return objective


def _distance_objective(pg_target, v_target):
    two_v = np.full(len(v_target), 2.0)
    two_p = np.full(len(pg_target), 2.0)

    def objective(v, pg):
        dv = v - v_target
        dp = pg - pg_target
        return dp @ dp + dv @ dv, 2 * dv, 2 * dp, two_v, two_p

    return objective


def _projected_gradient(x, grad, lo, hi) -> float:
    return float(np.abs(np.clip(x - grad, lo, hi) - x).max(initial=0.0))


def _newton_direction(H, grad, free) -> np.ndarray:
    d = -grad.copy()
    if not free.any():
        return d
    Hf = H[np.ix_(free, free)]
    gf = grad[free]
    scale = max(1.0, float(np.abs(np.diag(Hf)).max()))
    tau = 0.0
    for _ in range(40):
        try:
            L = np.linalg.cholesky(Hf + tau * np.eye(len(gf)))
            break
        except np.linalg.LinAlgError:
            tau = max(2 * tau, 1e-10 * scale) * 5
    else:
        d[free] = -gf / scale
        return d
    y = np.linalg.solve(L, -gf)
    d[free] = np.linalg.solve(L.T, y)
    return d


def _line_search(fun, x, val, d, slope, lo, hi):
    """Armijo backtracking along d, truncated at the first bound crossed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d < 0, (lo - x) / d, np.where(d > 0, (hi - x) / d, np.inf))
    step_max = ratio.min(initial=np.inf)
    alpha = min(1.0, step_max)
    for _ in range(60):
        xn = np.clip(x + alpha * d, lo, hi)
        vn = fun(xn, False)[0]
        if np.isfinite(vn) and vn < val and vn <= val + 1e-4 * alpha * slope:
            if alpha == step_max:
                hit = ratio <= step_max
                xn[hit] = np.where(d[hit] < 0, lo[hit], hi[hit])
            return xn
        alpha *= 0.5
    return None


def minimize_box(fun, x0, lo, hi, tol: float, max_iter: int):
    """Active-set Newton method for min f(x) s.t. lo <= x <= hi.

    Variables sitting on a bound with the gradient pushing outward (or the
    Newton step pushing outward) are frozen for the iteration; the remaining
    ones take a modified-Newton step, truncated at the first bound it hits and
    shortened by Armijo backtracking. ``fun(x, hessian)`` returns
    (value, gradient[, hessian]). Returns (x, iterations, converged).
    """
    x = np.clip(x0, lo, hi)
    val, grad, H = fun(x, True)
    for it in range(1, max_iter + 1):
        pgn = _projected_gradient(x, grad, lo, hi)
        if pgn <= tol:
            return x, it - 1, True
        at_lo = x <= lo
        at_hi = x >= hi
        fixed = (at_lo & (grad > 0)) | (at_hi & (grad < 0))
        for _ in range(10):
            d = _newton_direction(H, grad, ~fixed)
            d[fixed] = 0.0
            blocked = ~fixed & ((at_lo & (d < 0)) | (at_hi & (d > 0)))
            if not blocked.any():
                break
            fixed |= blocked
        slope = grad @ d
        if slope >= 0:
            d = np.where(fixed, 0.0, -grad)
            slope = grad @ d
        step = _line_search(fun, x, val, d, slope, lo, hi)
        if step is None:
            d = np.where(fixed, 0.0, -grad)
            step = _line_search(fun, x, val, d, grad @ d, lo, hi)
        if step is None:
            # no measurable decrease left at double precision
            return x, it, pgn <= 10 * tol
        x = step
        val, grad, H = fun(x, True)
    return x, max_iter, _projected_gradient(x, grad, lo, hi) <= tol


def _estimate_multipliers(prob: _Problem, x):
    """Least-squares multipliers from stationarity on the free variables;
    inequalities within a small margin of activity take part, clipped at 0."""
    _, ograd, _ = prob._objective_parts(x)
    Jh = prob.jacobian_eq(x)
    Jg = prob.jacobian_ineq(x)
    gi = prob.constraints(x)[1]
    near = np.flatnonzero(gi > -1e-4)
    free = (x > prob.lo) & (x < prob.hi)
    J = np.concatenate([Jh, Jg[near]])
    w, *_ = np.linalg.lstsq(J[:, free].T, -ograd[free], rcond=None)
    nu = np.zeros(prob.n_ineq)
    nu[near] = np.maximum(w[prob.n_eq:], 0.0)
    return w[: prob.n_eq], nu


def _solve(prob: _Problem, x0, cfg: SolverConfig, estimate: bool):
    if estimate:
        lam, nu = _estimate_multipliers(prob, x0)
    else:
        lam, nu = np.zeros(prob.n_eq), np.zeros(prob.n_ineq)
    mu = cfg.penalty_init
    x = x0.copy()
    inner_total = 0
    prev = np.inf
    stalls = 0
    infeas = prob.infeasibility(x)
    for outer in range(1, cfg.max_outer + 1):
        x, nit, converged = minimize_box(
            lambda z, hess: prob.augmented(z, lam, nu, mu, hess),
            x, prob.lo, prob.hi, cfg.opt_tol, cfg.max_inner,
        )
        inner_total += nit
        h, gi = prob.constraints(x)
        infeas = max(np.abs(h).max(initial=0.0), np.maximum(gi, 0.0).max(initial=0.0))
        lam = lam + mu * h
        nu = np.maximum(0.0, nu + mu * gi)
        if infeas <= cfg.feas_tol and converged:
            return Status.OPTIMAL, x, outer, inner_total, infeas
        if infeas > 0.25 * prev:
            mu = min(mu * cfg.penalty_growth, cfg.penalty_max)
        stalls = stalls + 1 if infeas > 0.5 * prev else 0
        prev = min(prev, infeas)
        if stalls >= 2 and infeas > cfg.infeasible_tol:
            xr, nit, _ = minimize_box(prob.restoration, x, prob.lo, prob.hi, 1e-12, cfg.max_inner)
            inner_total += nit
            if prob.infeasibility(xr) > cfg.infeasible_tol:
                return Status.INFEASIBLE, x, outer, inner_total, infeas
            x = xr
            stalls = 0
    status = Status.INFEASIBLE if infeas > cfg.infeasible_tol else Status.MAX_ITERATIONS
    return status, x, cfg.max_outer, inner_total, infeas


def flat_start(net: Network, load: LoadPoint) -> OperatingPoint:
    a = net.arrays
    v = np.clip(np.ones(net.n_bus), a.v_min, a.v_max)
    mid = 0.5 * (a.p_min + a.p_max)
    total = float(np.sum(load.p))
    pg = mid * (total / mid.sum()) if mid.sum() > 0 else mid
    pg = np.clip(pg, a.p_min, a.p_max)
    qg = np.clip(np.zeros(net.n_gen), a.q_min, a.q_max)
    return OperatingPoint(v, np.zeros(net.n_bus), pg, qg)


def _capacity_infeasible(net: Network, load: LoadPoint) -> bool:
    return float(np.sum(load.p)) > float(np.sum(net.arrays.p_max)) + 1e-12


def _check_load(net: Network, load: LoadPoint) -> None:
    if load.p.shape != (net.n_load,) or load.q.shape != (net.n_load,):
        raise ValueError("load vector does not match the network's loads")


def _infeasible_outcome(t0) -> SolveOutcome:
    return SolveOutcome(Status.INFEASIBLE, None, float("nan"), {"outer": 0, "inner": 0},
                        time.perf_counter() - t0, float("inf"))


def _finish(status, prob, x, outer, inner, infeas, t0, objective_fn) -> SolveOutcome:
    ok = status is Status.OPTIMAL
    sol = prob.unpack(x) if ok else None
    return SolveOutcome(
        status=status,
        solution=sol,
        objective=objective_fn(sol) if ok else float("nan"),
        iterations={"outer": outer, "inner": inner},
        wall_time=time.perf_counter() - t0,
        infeasibility=float(infeas),
    )


def solve_acopf(
    net: Network,
    load: LoadPoint,
    cfg: SolverConfig = SolverConfig(),
    warm_start: OperatingPoint | None = None,
) -> SolveOutcome:
    """Locally optimal AC-OPF dispatch for one load snapshot."""
    t0 = time.perf_counter()
    _check_load(net, load)
    if _capacity_infeasible(net, load):
        return _infeasible_outcome(t0)
    start = warm_start if warm_start is not None else flat_start(net, load)
    scale = max(1.0, abs(float(dispatch_cost(net, start.pg))))
    prob = _Problem(net, load, _cost_objective(net, scale), cfg.thermal)
    status, x, outer, inner, infeas = _solve(prob, prob.pack(start), cfg, warm_start is not None)
    return _finish(status, prob, x, outer, inner, infeas, t0,
                   lambda op: float(dispatch_cost(net, op.pg)))


def loadflow_objective(op: OperatingPoint, pg_target, v_target) -> float:
    dp = op.pg - np.asarray(pg_target, dtype=float)
    dv = op.v - np.asarray(v_target, dtype=float)
    return float(dp @ dp + dv @ dv)


def solve_loadflow(
    net: Network,
    load: LoadPoint,
    target: tuple,
    cfg: SolverConfig = SolverConfig(),
    warm_start: OperatingPoint | None = None,
) -> SolveOutcome:
    """Nearest AC-feasible point to a (pg, v) setpoint in squared distance."""
    t0 = time.perf_counter()
    pg_t, v_t = (np.asarray(t, dtype=float) for t in target)
    if pg_t.shape != (net.n_gen,) or v_t.shape != (net.n_bus,):
        raise ValueError("target dimensions do not match the network")
    _check_load(net, load)
    if _capacity_infeasible(net, load):
        return _infeasible_outcome(t0)
    if warm_start is None:
        base = flat_start(net, load)
        warm_start = OperatingPoint(v_t, base.theta, pg_t, base.qg)
    prob = _Problem(net, load, _distance_objective(pg_t, v_t), cfg.thermal)
    status, x, outer, inner, infeas = _solve(prob, prob.pack(warm_start), cfg, False)
    return _finish(status, prob, x, outer, inner, infeas, t0,
                   lambda op: loadflow_objective(op, pg_t, v_t))
