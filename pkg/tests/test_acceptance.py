"""End-to-end acceptance checks, one test per criterion.

Each test is tagged with ``criterion(n, title)``; conftest prints a PASS/FAIL
line per criterion at the end of the run. The long training runs are shared
through module fixtures so criteria 5 and 6 reuse the same models.
"""

import math
import statistics

import numpy as np
import pytest

from conftest import two_bus
from oracles import complex_flows, lattice_two_bus
from gridlearn.cli import main
from gridlearn.datagen import GenConfig, generate, split
from gridlearn.evaluator import evaluate
from gridlearn.neural import OpfDnn, Standardizer
from gridlearn.powerflow import (
    BOUND_FAMILIES,
    FAMILIES,
    LoadPoint,
    OperatingPoint,
    all_flows,
    constraint_violations,
    line_flow,
    violation_degree_eq,
    violation_degree_ineq,
    violation_report,
)
from gridlearn.solver import loadflow_objective, solve_acopf, solve_loadflow
from gridlearn.trainer import PhysicsGraph, TrainConfig, dataset_violations, loss_c, loss_o, predict, train

# shared configuration for the end-to-end runs
N_POINTS = 1000
EPOCHS = 5000
MCD = dict(variant="MCD", step=1e5, update_every=1000, max_epochs=EPOCHS, lr=1e-3, batch_size=64)
MB = dict(variant="MB", max_epochs=EPOCHS, lr=1e-3, batch_size=64)
SEEDS = (0, 1, 2)


def measured(record, text):
    record("measured", text)


# -- 1. physics


@pytest.mark.criterion(1, "physics oracle")
def test_criterion_1_physics(record_property):
    assert line_flow(1.0, 1.0, 0.3, 0.3, 1.0, -10.0) == (0.0, 0.0)
    pf, qf = line_flow(1.0, 1.0, 0.1, 0.0, 0.0, -10.0)
    assert abs(pf - 10 * math.sin(0.1)) <= 1e-9 and abs(qf - (10 - 10 * math.cos(0.1))) <= 1e-9
    pf, qf = line_flow(1.02, 0.99, 0.05, 0.0, 0.2, -5.0)
    assert abs(pf - 0.25871722305828754) <= 1e-9 and abs(qf - 0.14921614223990934) <= 1e-9
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(500):
        vi, vj = rng.uniform(0.8, 1.2, 2)
        ti, tj = rng.uniform(-1, 1, 2)
        g, b = rng.uniform(-3, 3, 2)
        got = np.array(line_flow(vi, vj, ti, tj, g, b))
        worst = max(worst, float(np.abs(got - complex_flows(vi, vj, ti, tj, g, b)).max()))
        lossless = all_flows(two_bus(g=0.0, b=b if b != 0 else -1.0),
                             OperatingPoint([vi, vj], [ti, tj], [0.0], [0.0]))
        assert lossless.pf[0] == -lossless.pf[1]
    assert worst <= 1e-9
    assert violation_degree_ineq(-0.3) == 0.0 and violation_degree_ineq(0.2) == 0.2
    assert violation_degree_eq(-0.3) == 0.3 and violation_degree_eq(0.0) == 0.0
    measured(record_property, f"max flow deviation from complex oracle {worst:.1e} p.u.")


# -- 2. gradients


def _gradient_setup(rng):
    net = two_bus(g=2.0, b=-10.0, s_max=1.0, theta_delta=0.5)
    model = OpfDnn(1, 2, 1, 0, [4, 4])
    model.init_weights(rng)
    model.store.flat[:] += rng.normal(scale=0.1, size=model.store.flat.size)
    model.x_scale = Standardizer(np.array([0.5, 0.1]), np.array([0.1, 0.05]))
    model.y_scale = {
        "v": Standardizer(np.ones(2), np.full(2, 0.1)),
        "theta": Standardizer(np.zeros(1), np.full(1, 0.3)),
        "pg": Standardizer(np.ones(1), np.ones(1)),
        "qg": Standardizer(np.zeros(1), np.full(1, 2.0)),
    }
    batch = 3
    x = np.column_stack([rng.uniform(0.3, 0.7, batch), rng.uniform(0.0, 0.2, batch)])
    target = {
        "v": rng.uniform(0.9, 1.1, (batch, 2)),
        "theta": np.column_stack([np.zeros(batch), rng.uniform(-0.3, 0.3, batch)]),
        "pg": rng.uniform(0.0, 2.0, (batch, 1)),
        "qg": rng.uniform(-2.0, 2.0, (batch, 1)),
    }
    lam = {f: float(rng.uniform(0.1, 5.0)) for f in FAMILIES}
    return net, model, x, target, lam


def _full_loss(model, graph, x, target, lam):
    pred = model.forward(x)
    lo, _ = loss_o(pred, target, False, model.theta_splice.T)
    return lo + loss_c(graph.violations(x, pred, FAMILIES), lam)


@pytest.mark.criterion(2, "gradient correctness")
def test_criterion_2_gradients(record_property):
    rng = np.random.default_rng(2024)
    h, floor = 1e-6, 1e-3
    worst, checked, skipped = 0.0, 0, 0
    while checked < 100:
        net, model, x, target, lam = _gradient_setup(rng)
        graph = PhysicsGraph(net)
        model.store.zero_grad()
        total = _full_loss(model, graph, x, target, lam)
        # too close to a kink of |.|, max(0, .) or ReLU for a derivative to exist
        if total.kink_margin() < 1e-8:
            skipped += 1
            continue
        total.backward()
        grad = model.store.grad.copy()
        flat = model.store.flat
        fd = np.empty_like(flat)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            up = float(_full_loss(model, graph, x, target, lam).value)
            flat[k] = keep - h
            down = float(_full_loss(model, graph, x, target, lam).value)
            flat[k] = keep
            fd[k] = (up - down) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), floor)
        worst = max(worst, float(rel.max()))
        checked += 1
    measured(record_property, f"max relative error {worst:.2e} over {checked} points, {skipped} kink-adjacent skipped")
    assert worst < 1e-4


# -- 3. solver vs brute force


@pytest.mark.criterion(3, "solver vs brute-force lattice")
@pytest.mark.parametrize("lossy", [False, True], ids=["lossless", "lossy"])
def test_criterion_3_lattice(lossy, record_property):
    net = two_bus(g=2.0, b=-10.0, s_max=1.0, theta_delta=0.5) if lossy else two_bus()
    load = LoadPoint([0.5], [0.1])
    out = solve_acopf(net, load)
    assert out.ok
    best, _, count = lattice_two_bus(net, load, points=201, tol=1e-3)
    assert count > 0
    rep = violation_report(net, load, out.solution)
    worst = max(rep.violations[f].max(initial=0.0) for f in FAMILIES)
    measured(record_property, f"{'lossy' if lossy else 'lossless'}: solver {out.objective:.4f} vs lattice {best:.4f}, "
                              f"max violation {worst:.1e}")
    assert out.objective <= best * 1.005
    assert worst <= 1e-6


# -- 4. projection


@pytest.mark.criterion(4, "load-flow projection contract")
def test_criterion_4_projection(small_dataset, case14, record_property):
    rng = np.random.default_rng(4)
    worst_viol, worst_ratio = 0.0, 0.0
    for i in range(20):
        dp = small_dataset.points[i]
        sol = dp.solution
        pg = sol.pg + rng.normal(scale=0.05, size=sol.pg.shape)
        v = sol.v + rng.normal(scale=0.02, size=sol.v.shape)
        own = loadflow_objective(sol, pg, v)
        lf = solve_loadflow(case14, dp.load, (pg, v))
        assert lf.ok
        viol = constraint_violations(case14, dp.load, lf.solution)
        worst_viol = max(worst_viol, max(viol[f].max(initial=0.0) for f in FAMILIES))
        assert lf.objective == pytest.approx(loadflow_objective(lf.solution, pg, v), rel=1e-12)
        worst_ratio = max(worst_ratio, lf.objective / own)
    measured(record_property, f"max violation {worst_viol:.1e}, max objective / perturbation distance {worst_ratio:.3f}")
    assert worst_viol <= 1e-5
    assert worst_ratio <= 1.0


# -- 5 and 6. end-to-end training


@pytest.fixture(scope="module")
def e2e(case14):
    ds = generate(case14, GenConfig(n_points=N_POINTS, seed=0))
    train_set, test_set = split(ds, 0.8, 0)
    return train_set, test_set


@pytest.fixture(scope="module")
def trained(case14, e2e):
    train_set, _ = e2e
    cache = {}

    def get(variant, seed):
        key = (variant, seed)
        if key not in cache:
            base = MCD if variant == "MCD" else MB
            cache[key] = train(case14, train_set, TrainConfig(**base, seed=seed))
        return cache[key]

    return get


@pytest.mark.criterion(5, "end-to-end MCD on IEEE 14-bus")
def test_criterion_5_end_to_end(case14, e2e, trained, record_property):
    _, test_set = e2e
    res = trained("MCD", 0)
    rep = evaluate(case14, test_set, res.model.predict_arrays(test_set.inputs()), loadflow=True)
    sat = {f: rep.satisfaction[f] for f in BOUND_FAMILIES}
    measured(record_property, f"v error {rep.errors_pu['v']:.2e} p.u., satisfaction "
                              + ", ".join(f"{f} {s:.1f}%" for f, s in sat.items())
                              + f", raw gap {rep.gaps.raw:.3f}%, load-flow gap {rep.gaps.loadflow:.4f}%")
    assert rep.errors_pu["v"] < 0.005
    assert all(s >= 95.0 for s in sat.values())
    assert rep.gaps.raw < 1.0
    assert rep.gaps.loadflow is not None and rep.gaps.loadflow < 0.1
    # multipliers never decrease over the run
    lam = np.array(res.log_rows)[:, 6:6 + len(FAMILIES)]
    assert np.all(np.diff(lam, axis=0) >= 0)


def test_mcd_training_violations_fall(trained):
    """Mean training violation per family is lower at the last epoch than at
    the first multiplier update; families already at zero are skipped."""
    res = trained("MCD", 0)
    n = len(FAMILIES)
    nu = np.array(res.log_rows)[:, 6 + n:6 + 2 * n]
    first = nu[MCD["update_every"] - 1]
    for i, f in enumerate(FAMILIES):
        if first[i] > 0:
            assert nu[-1, i] < first[i], f


@pytest.mark.criterion(6, "dual updates lower the balance violation")
def test_criterion_6_dual_value(case14, e2e, trained, record_property):
    _, test_set = e2e
    wins, pairs = 0, []
    for seed in SEEDS:
        dual = dataset_violations(case14, trained("MCD", seed).model, test_set, ["6a"])["6a"]
        base = dataset_violations(case14, trained("MB", seed).model, test_set, ["6a"])["6a"]
        pairs.append(f"seed {seed}: {dual:.2e} vs {base:.2e}")
        wins += dual < base
    measured(record_property, f"MCD beats MB in {wins}/3 ({'; '.join(pairs)})")
    assert wins >= 2


# -- 7. latency


@pytest.mark.criterion(7, "118-bus prediction latency")
def test_criterion_7_latency(case118, record_property):
    net = case118
    model = OpfDnn.build(net.n_load, net.n_bus, net.n_gen, net.ref_bus, rng=np.random.default_rng(0))
    p, q = net.nominal_load()
    load = LoadPoint(p, q)
    predict(model, net, load)
    times = [predict(model, net, load, case_hash=net.case_hash).seconds for _ in range(100)]
    med = statistics.median(times) * 1e3
    measured(record_property, f"median {med:.3f} ms over 100 runs, hidden width {model.hidden[0]}")
    assert med < 5.0


# -- 8. determinism


@pytest.mark.criterion(8, "byte-identical generate and train")
def test_criterion_8_determinism(tmp_path, record_property):
    def run(tag, jobs):
        d = tmp_path / tag
        d.mkdir()
        ds = d / "ds.jsonl"
        assert main(["generate", "--case", "case14", "--n-points", "40", "--seed", "7", "--jobs", str(jobs),
                     "--dataset", str(ds)]) == 0
        ck = d / "m.ckpt"
        assert main(["train", "--case", "case14", "--dataset", str(ds), "--checkpoint", str(ck),
                     "--log", str(d / "log.csv"), "--seed", "7", "--jobs", str(jobs), "--variant", "mcd",
                     "--step", "10", "--update-every", "5", "--max-epochs", "20", "--hidden", "32", "32",
                     "--lr", "1e-3", "--batch-size", "8"]) == 0
        return ds.read_bytes(), ck.read_bytes()

    first = run("a", 1)
    assert run("b", 1) == first
    assert run("c", 4) == first
    measured(record_property, "dataset and checkpoint identical across two runs and --jobs 1 vs 4")
