"""Training of the four-head OPF network with Lagrangian-dual penalties.

The loss is the mean L1 error on (v, theta, pg, qg) plus sum_c lambda_c * nu_c,
where nu_c is the mean violation degree of constraint family c evaluated on
flows derived from the predicted voltages. Every ``update_every`` epochs the
multipliers move by step * (mean violation over the training set).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .datagen import Dataset
from .grid import Network
from .neural import (
    Adam,
    Checkpoint,
    NonFiniteError,
    OpfDnn,
    Standardizer,
    Tensor,
    hinge,
    load_checkpoint,
    save_checkpoint,
)
from .powerflow import FAMILIES, FlowSet, LoadPoint, OperatingPoint, all_flows, constraint_violations
from .seeding import stream

log = logging.getLogger(__name__)

VARIANTS = ("MB", "MC", "MCD")
LOSS_TERMS = ("l_v", "l_theta", "l_p", "l_q")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "MCD"
    lambda_init: float | None = None
    step: float | None = None
    update_every: int = 1000
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50000
    seed: int = 0
    constraint_set: tuple = FAMILIES
    setpoint_loss_only: bool = False
    hidden: tuple | None = None
    depth: int = 2
    relu_heads: bool = False
    clip_norm: float = 1e3
    checkpoint_every: int = 1000
    thermal: str = "squared"

    def __post_init__(self):
        v = self.variant.upper()
        object.__setattr__(self, "variant", v)
        if v not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        defaults = {"MB": (0.0, 0.0), "MC": (1.0, 0.0), "MCD": (0.0, 1e-3)}[v]
        if self.lambda_init is None:
            object.__setattr__(self, "lambda_init", defaults[0])
        if self.step is None:
            object.__setattr__(self, "step", defaults[1])
        object.__setattr__(self, "constraint_set", tuple(self.constraint_set))
        if self.hidden is not None:
            object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.step < 0:
            raise ValueError("multiplier step must be non-negative")
        if self.update_every < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("update_every and batch_size must be >= 1, max_epochs >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        unknown = set(self.constraint_set) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown constraint families: {sorted(unknown)}")
        if v == "MB" and (self.lambda_init != 0 or self.step != 0):
            raise ValueError("variant MB requires lambda_init = 0 and step = 0")
        if v == "MC" and (self.lambda_init != 1 or self.step != 0):
            raise ValueError("variant MC requires lambda_init = 1 and step = 0")
        if v == "MCD" and (self.lambda_init != 0 or not self.step > 0):
            raise ValueError("variant MCD requires lambda_init = 0 and step > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constraint_set"] = list(self.constraint_set)
        d["hidden"] = None if self.hidden is None else list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- differentiable physics


class PhysicsGraph:
    """Constant matrices that express flows and violations as tensor ops."""

    def __init__(self, net: Network, thermal: str = "squared"):
        a = net.arrays
        n, e2 = net.n_bus, len(a.dir_from)
        self.net = net
        self.to_from = a.from_inc.T.copy()  # (n, 2e): bus value -> sending end
        self.to_to = np.zeros((n, e2))
        self.to_to[a.dir_to, np.arange(e2)] = 1.0
        self.diff = self.to_from - self.to_to
        e = net.n_branch
        self.br_diff = self.diff[:, :e]
        self.g, self.b = a.dir_g, a.dir_b
        self.gen_inc = a.gen_inc
        self.from_inc = a.from_inc
        self.load_inc = a.load_inc
        lim = np.flatnonzero(np.isfinite(a.dir_smax))
        self.sel_lim = np.zeros((e2, len(lim)))
        self.sel_lim[lim, np.arange(len(lim))] = 1.0
        smax = a.dir_smax[lim]
        self.s_limit = smax**2 if thermal == "squared" else smax
        self.a = a

    def flows(self, v: Tensor, theta: Tensor):
        vi = v @ self.to_from
        vj = v @ self.to_to
        d = theta @ self.diff
        s, c = d.sin(), d.cos()
        vv = vi * vj
        vi2 = vi * vi
        pf = vi2 * self.g - vv * (s * self.b + c * self.g)
        qf = vi2 * (-self.b) - vv * (s * self.g - c * self.b)
        return pf.named("pf"), qf.named("qf")

    def violations(self, x: np.ndarray, pred: dict, families=FAMILIES) -> dict[str, Tensor]:
        """Mean violation degree per family over batch and constraints."""
        a = self.a
        half = x.shape[-1] // 2
        pd = x[..., :half] @ self.load_inc
        qd = x[..., half:] @ self.load_inc
        v, theta, pg, qg = pred["v"], pred["theta"], pred["pg"], pred["qg"]
        pf, qf = self.flows(v, theta)
        out = {}
        for fam in families:
            if fam == "2a":
                t = hinge(a.v_min - v) + hinge(v - a.v_max)
            elif fam == "2b":
                delta = theta @ self.br_diff
                t = hinge(-a.br_theta_delta - delta) + hinge(delta - a.br_theta_delta)
            elif fam == "3a":
                t = hinge(a.p_min - pg) + hinge(pg - a.p_max)
            elif fam == "3b":
                t = hinge(a.q_min - qg) + hinge(qg - a.q_max)
            elif fam == "4":
                if self.sel_lim.shape[1] == 0:
                    out[fam] = Tensor(0.0, "nu_4")
                    continue
                t = hinge((pf @ self.sel_lim).square() + (qf @ self.sel_lim).square() - self.s_limit)
            elif fam == "6a":
                t = (pg @ self.gen_inc - pd - pf @ self.from_inc).abs()
            elif fam == "6b":
                t = (qg @ self.gen_inc - qd - qf @ self.from_inc).abs()
            else:
                raise ValueError(f"unknown family {fam}")
            out[fam] = t.mean().named(f"nu_{fam}")
        return out


def loss_o(pred: dict, target: dict, setpoint_only: bool = False,
           theta_select: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Sum of mean L1 errors; components are returned separately.

    ``theta_select`` (n_bus x n_bus-1) restricts the angle term to the
    non-reference buses, whose angles are actually predicted.
    """
    keys = {"l_v": "v", "l_theta": "theta", "l_p": "pg", "l_q": "qg"}
    used = ("l_p", "l_v") if setpoint_only else LOSS_TERMS
    parts = {}
    total = None
    for name in LOSS_TERMS:
        k = keys[name]
        if name not in used:
            parts[name] = 0.0
            continue
        p, t = pred[k], target[k]
        if k == "theta" and theta_select is not None:
            p, t = p @ theta_select, np.asarray(t) @ theta_select
        term = (p - t).abs().mean().named(name)
        parts[name] = float(term.value)
        total = term if total is None else total + term
    return total, parts


def loss_c(nu: dict[str, Tensor], multipliers: dict[str, float]) -> Tensor:
    total = Tensor(0.0, "l_c")
    for fam, t in nu.items():
        lam = multipliers.get(fam, 0.0)
        if lam != 0.0:
            total = total + t * lam
    return total.named("l_c")


def multiplier_update(multipliers: dict[str, float], nu_mean: dict[str, float], step: float) -> dict[str, float]:
    out = dict(multipliers)
    for fam, val in nu_mean.items():
        if val < 0:
            raise ValueError("mean violations must be non-negative")
        if fam in out:
            out[fam] = out[fam] + step * val
    return out


def dataset_violations(net: Network, model: OpfDnn, ds: Dataset, families, thermal="squared") -> dict[str, float]:
    """Mean violation per family over a dataset under the current weights."""
    x = ds.inputs()
    pred = model.predict_arrays(x)
    op = OperatingPoint(pred["v"], pred["theta"], pred["pg"], pred["qg"])
    viol = constraint_violations(net, LoadPoint.from_vector(x), op, thermal=thermal)
    return {f: float(viol[f].mean()) if viol[f].size else 0.0 for f in families}


# -- training loop


def build_model(net: Network, train: Dataset, cfg: TrainConfig) -> OpfDnn:
    model = OpfDnn.build(
        net.n_load, net.n_bus, net.n_gen, net.ref_bus,
        hidden=cfg.hidden, depth=cfg.depth, relu_heads=cfg.relu_heads,
        rng=stream(cfg.seed, "init"),
    )
    model.x_scale = Standardizer.fit(train.inputs(), output=False)
    t = train.targets()
    nonref = [i for i in range(net.n_bus) if i != net.ref_bus]
    model.y_scale = {
        "v": Standardizer.fit(t["v"], output=True),
        "theta": Standardizer.fit(t["theta"][:, nonref], output=True),
        "pg": Standardizer.fit(t["pg"], output=True),
        "qg": Standardizer.fit(t["qg"], output=True),
    }
    return model


def log_columns(families) -> list[str]:
    return ["epoch", *LOSS_TERMS, "l_c", *[f"lambda_{f}" for f in families], *[f"nu_{f}" for f in families], "seconds"]


@dataclass
class TrainResult:
    model: OpfDnn
    multipliers: dict
    adam: Adam
    epoch: int
    log_rows: list = field(default_factory=list)

    def log_csv(self, families) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(log_columns(families))
        w.writerows(self.log_rows)
        return buf.getvalue()


def _batches(n: int, size: int, rng: np.random.Generator):
    if n < 256 and size < n:
        # small training sets are processed full-batch
        size = n
    perm = rng.permutation(n)
    for s in range(0, n, size):
        yield perm[s:s + size]


def train(
    net: Network,
    train_set: Dataset,
    cfg: TrainConfig,
    *,
    checkpoint_path=None,
    log_path=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run minibatch Adam on L_o + L_c with periodic multiplier updates.

    ``resume`` continues from a checkpoint written by this function with the
    same dataset and config; ``stop_after`` ends the run early (for
    interruption tests) after that many epochs in total.
    """
    if train_set.case_hash != net.case_hash:
        raise TrainingError("dataset was generated for a different case")
    if len(train_set) < 1:
        raise TrainingError("empty training set")
    fams = [f for f in FAMILIES if f in cfg.constraint_set]
    if resume is not None:
        if resume.case_hash != net.case_hash:
            raise TrainingError("checkpoint case hash does not match the network")
        model, adam = resume.model, resume.adam
        multipliers = {f: float(resume.multipliers[f]) for f in fams}
        start = resume.epoch
    else:
        model = build_model(net, train_set, cfg)
        adam = Adam(lr=cfg.lr)
        multipliers = {f: float(cfg.lambda_init) for f in fams}
        start = 0
    graph = PhysicsGraph(net, cfg.thermal)
    theta_sel = model.theta_splice.T
    x_all = train_set.inputs()
    y_all = train_set.targets()
    n = len(train_set)
    end = cfg.max_epochs if stop_after is None else min(cfg.max_epochs, stop_after)
    rows = []
    log_fh = None
    if log_path is not None:
        exists = resume is not None and os.path.exists(log_path)
        log_fh = open(log_path, "a" if exists else "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if not exists:
            writer.writerow(log_columns(fams))

    def write_checkpoint(epoch):
        if checkpoint_path is not None:
            tmp = f"{checkpoint_path}.tmp"
            save_checkpoint(tmp, model, case_hash=net.case_hash, adam=adam, multipliers=multipliers,
                            epoch=epoch, extra={"train_config": cfg.to_dict(), "families": fams})
            os.replace(tmp, checkpoint_path)

    try:
        with threadpool_limits(1):
            for epoch in range(start + 1, end + 1):
                t0 = time.perf_counter()
                acc = dict.fromkeys(LOSS_TERMS, 0.0)
                acc_nu = dict.fromkeys(fams, 0.0)
                rng = stream(cfg.seed, "batch-shuffle", epoch)
                for idx in _batches(n, cfg.batch_size, rng):
                    w = len(idx) / n
                    x = x_all[idx]
                    target = {k: y_all[k][idx] for k in y_all}
                    store = model.store
                    store.zero_grad()
                    pred = model.forward(x)
                    lo, parts = loss_o(pred, target, cfg.setpoint_loss_only, theta_sel)
                    nu = graph.violations(x, pred, fams)
                    total = lo + loss_c(nu, multipliers)
                    total.backward()
                    gnorm = float(np.linalg.norm(store.grad))
                    if not math.isfinite(gnorm):
                        raise NonFiniteError("parameter gradient")
                    if gnorm > cfg.clip_norm:
                        store.grad *= cfg.clip_norm / gnorm
                    adam.step(store.flat, store.grad)
                    for k in LOSS_TERMS:
                        acc[k] += w * parts[k]
                    for f in fams:
                        acc_nu[f] += w * float(nu[f].value)
                if not np.isfinite(model.store.flat).all():
                    raise NonFiniteError("parameters after update")
                l_c = sum(multipliers[f] * acc_nu[f] for f in fams)
                row = [epoch, *(acc[k] for k in LOSS_TERMS), l_c,
                       *(multipliers[f] for f in fams), *(acc_nu[f] for f in fams)]
                if epoch % cfg.update_every == 0 and cfg.step > 0:
                    nu_bar = dataset_violations(net, model, train_set, fams, cfg.thermal)
                    multipliers = multiplier_update(multipliers, nu_bar, cfg.step)
                row.append(round(time.perf_counter() - t0, 6))
                rows.append(row)
                if log_fh is not None:
                    writer.writerow(row)
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    write_checkpoint(epoch)
    except NonFiniteError as exc:
        if log_fh is not None:
            log_fh.close()
        raise TrainingError(f"training aborted at epoch {epoch}: {exc}") from exc
    if log_fh is not None:
        log_fh.close()
    write_checkpoint(end)
    return TrainResult(model, multipliers, adam, end, rows)


# -- inference


@dataclass
class Prediction:
    solution: OperatingPoint
    flows: FlowSet
    seconds: float


def predict(model: OpfDnn, net: Network, load: LoadPoint, *, case_hash: str | None = None,
            clamp: bool = False) -> Prediction:
    """Forward pass plus derived flows; optional clamp of v, pg, qg to bounds."""
    if case_hash is not None and case_hash != net.case_hash:
        raise TrainingError("model was trained on a different case (case hash mismatch)")
    t0 = time.perf_counter()
    out = model.predict_arrays(load.as_vector())
    if clamp:
        a = net.arrays
        out["v"] = np.clip(out["v"], a.v_min, a.v_max)
        out["pg"] = np.clip(out["pg"], a.p_min, a.p_max)
        out["qg"] = np.clip(out["qg"], a.q_min, a.q_max)
    op = OperatingPoint(out["v"], out["theta"], out["pg"], out["qg"])
    flows = all_flows(net, op)
    return Prediction(op, flows, time.perf_counter() - t0)


def load_model(path, net: Network) -> Checkpoint:
    return load_checkpoint(Path(path), expected_hash=net.case_hash)
