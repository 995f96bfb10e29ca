import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_bus
from gridlearn.grid import Branch, Bus, Generator, Load, Network
from gridlearn.powerflow import (
    FAMILIES,
    LoadPoint,
    OperatingPoint,
    all_flows,
    balance_residuals,
    constraint_violations,
    dispatch_cost,
    line_flow,
    violation_degree_eq,
    violation_degree_ineq,
    violation_report,
    write_reports_csv,
)

finite = st.floats(-3.0, 3.0)
volt = st.floats(0.5, 1.5)


def complex_flow(vi, vj, ti, tj, g, b):
    """Independent oracle: S_ij = V_i * conj(y * (V_i - V_j))."""
    Vi = vi * cmath.exp(1j * ti)
    Vj = vj * cmath.exp(1j * tj)
    s = Vi * (complex(g, b) * (Vi - Vj)).conjugate()
    return s.real, s.imag


def test_zero_flow_symmetry():
    assert line_flow(1.0, 1.0, 0.3, 0.3, 1.0, -10.0) == (0.0, 0.0)


def test_lossless_example():
    pf, qf = line_flow(1.0, 1.0, 0.1, 0.0, 0.0, -10.0)
    assert abs(pf - 0.9983341664682815) <= 1e-9
    assert abs(qf - 0.04995834721974289) <= 1e-9
    assert pf == pytest.approx(10 * math.sin(0.1), abs=1e-12)
    assert qf == pytest.approx(10 - 10 * math.cos(0.1), abs=1e-12)


def test_lossy_example():
    pf, qf = line_flow(1.02, 0.99, 0.05, 0.0, 0.2, -5.0)
    # values frozen from the complex-power oracle
    assert abs(pf - 0.25871722305828754) <= 1e-9
    assert abs(qf - 0.14921614223990934) <= 1e-9
    # the rounded reference values agree to their printed precision
    assert pf == pytest.approx(0.258721, abs=1e-5)
    assert qf == pytest.approx(0.149222, abs=1e-5)


@settings(max_examples=300, deadline=None)
@given(volt, volt, finite, finite, finite, finite)
def test_line_flow_matches_complex_oracle(vi, vj, ti, tj, g, b):
    pf, qf = line_flow(vi, vj, ti, tj, g, b)
    ep, eq = complex_flow(vi, vj, ti, tj, g, b)
    assert pf == pytest.approx(ep, abs=1e-9)
    assert qf == pytest.approx(eq, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(volt, volt, finite, finite, finite)
def test_lossless_antisymmetry_exact(vi, vj, ti, tj, b):
    net = two_bus(g=0.0, b=b if b != 0 else -1.0)
    op = OperatingPoint([vi, vj], [ti, tj], [0.0], [0.0])
    fl = all_flows(net, op)
    assert fl.pf[0] == -fl.pf[1]


def test_lossy_line_has_losses():
    net = two_bus(g=1.0, b=-10.0)
    fl = all_flows(net, OperatingPoint([1.0, 0.98], [0.0, -0.05], [0.0], [0.0]))
    assert fl.pf[0] + fl.pf[1] > 0


def test_all_flows_forward_entry_matches_line_flow():
    net = two_bus(g=0.2, b=-5.0)
    op = OperatingPoint([1.02, 0.99], [0.05, 0.0], [0.0], [0.0])
    fl = all_flows(net, op)
    assert fl.pf.shape == (2,)
    assert (fl.pf[0], fl.qf[0]) == line_flow(1.02, 0.99, 0.05, 0.0, 0.2, -5.0)
    assert (fl.pf[1], fl.qf[1]) == line_flow(0.99, 1.02, 0.0, 0.05, 0.2, -5.0)


def test_all_flows_zero_for_equal_voltages(case14):
    op = OperatingPoint(np.ones(14), np.zeros(14), np.zeros(5), np.zeros(5))
    fl = all_flows(case14, op)
    assert np.all(fl.pf == 0) and np.all(fl.qf == 0)
    assert fl.pf.shape == (2 * case14.n_branch,)


def test_balance_residual_arithmetic():
    # bus 0: pg = 1.0, demand 0.4, two outgoing lines carrying 0.3 and 0.25
    net = Network(
        100.0,
        (Bus(1, 0.9, 1.1, 1.0, True), Bus(2, 0.9, 1.1, 1.0), Bus(3, 0.9, 1.1, 1.0)),
        (Generator(0, 0, 2, -1, 1),),
        (Branch(0, 1, 0.0, -10.0), Branch(0, 2, 0.0, -10.0)),
        (Load(0, 0.4, 0.0),),
    )
    op = OperatingPoint([1, 1, 1], [0, -math.asin(0.03), -math.asin(0.025)], [1.0], [0.0])
    fl = all_flows(net, op)
    r_p, _ = balance_residuals(net, LoadPoint([0.4], [0.0]), op, fl)
    assert r_p[0] == pytest.approx(0.05, abs=1e-12)


def test_zero_network_residuals_zero(case14):
    op = OperatingPoint(np.ones(14), np.zeros(14), np.zeros(5), np.zeros(5))
    load = LoadPoint(np.zeros(case14.n_load), np.zeros(case14.n_load))
    r_p, r_q = balance_residuals(case14, load, op, all_flows(case14, op))
    assert np.all(r_p == 0) and np.all(r_q == 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_residual_scale_consistency(k, seed):
    rng = np.random.default_rng(seed)
    net = two_bus()
    from gridlearn.powerflow import FlowSet

    pg, pd, pf = rng.normal(size=1), rng.normal(size=1), rng.normal(size=2)
    qf = np.zeros(2)
    base = balance_residuals(net, LoadPoint(pd, [0.0]), OperatingPoint([1, 1], [0, 0], pg, [0.0]), FlowSet(pf, qf))[0]
    scaled = balance_residuals(net, LoadPoint(k * pd, [0.0]), OperatingPoint([1, 1], [0, 0], k * pg, [0.0]),
                               FlowSet(k * pf, qf))[0]
    np.testing.assert_allclose(scaled, k * base, rtol=1e-12, atol=1e-12)


def test_violation_degree_examples():
    assert violation_degree_ineq(-0.3) == 0.0
    assert violation_degree_ineq(0.2) == 0.2
    assert violation_degree_eq(-0.2) == 0.2


@given(st.floats(-1e6, 1e6))
def test_violation_degrees_nonnegative(s):
    assert violation_degree_ineq(s) >= 0
    assert violation_degree_eq(s) >= 0


def _thermal_net(pf, qf):
    """Lossless two-bus net sized so the forward flow hits (pf, qf)."""
    # choose angle/voltage so that line_flow returns the requested values
    b = -10.0
    vi = 1.0
    # qf = 10 - 10 vj cos d, pf = 10 vj sin d
    c = (10 - qf) / 10
    s = pf / 10
    vj = math.hypot(c, s)
    d = math.atan2(s, c)
    net = Network(100.0, (Bus(1, 0.5, 1.5, 1.0, True), Bus(2, 0.5, 1.5, 1.0)),
                  (Generator(0, -9, 9, -9, 9),), (Branch(0, 1, 0.0, b, 1.0),), ())
    return net, OperatingPoint([vi, vj], [d, 0.0], [0.0], [0.0])


def test_thermal_violation_example():
    net, op = _thermal_net(0.9, 0.6)
    fl = all_flows(net, op)
    assert fl.pf[0] == pytest.approx(0.9, abs=1e-12)
    assert fl.qf[0] == pytest.approx(0.6, abs=1e-12)
    viol = constraint_violations(net, LoadPoint([], []), op)["4"]
    assert viol[0] == pytest.approx(0.17, abs=1e-9)


def test_thermal_boundary_example():
    net, op = _thermal_net(0.8, 0.6)
    viol = constraint_violations(net, LoadPoint([], []), op)["4"]
    assert viol[0] == pytest.approx(0.0, abs=1e-12)


def test_thermal_literal_reading():
    net, op = _thermal_net(0.9, 0.6)
    viol = constraint_violations(net, LoadPoint([], []), op, thermal="literal")["4"]
    assert viol[0] == pytest.approx(0.17, abs=1e-9)
    net, op = _thermal_net(0.6, 0.6)
    assert constraint_violations(net, LoadPoint([], []), op, thermal="literal")["4"][0] == pytest.approx(0.0)


def test_report_family_means_and_flags():
    net = two_bus(s_max=1.0)
    op = OperatingPoint([1.2, 0.85], [0.0, 0.0], [2.5], [0.0])
    rep = violation_report(net, LoadPoint([0.5], [0.1]), op)
    assert set(rep.nu) == set(FAMILIES)
    assert rep.nu["2a"] == pytest.approx((0.1 + 0.05) / 2)
    assert rep.nu["3a"] == pytest.approx(0.5)
    assert rep.n_total["2a"] == 2 and rep.n_satisfied["2a"] == 0
    assert not rep.feasible()
    text = write_reports_csv([(7, rep)])
    assert text.splitlines()[0] == "instance_id,family,mean_violation,n_satisfied,n_total"
    assert len(text.splitlines()) == 1 + len(FAMILIES)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_nu_zero_iff_all_satisfied(vals):
    net = two_bus(s_max=1.0, theta_delta=0.3)
    op = OperatingPoint(vals[0:2], [0.0, vals[2] / 4], [vals[3]], [vals[4]])
    rep = violation_report(net, LoadPoint([abs(vals[5])], [0.0]), op)
    for f in FAMILIES:
        assert rep.nu[f] >= 0
        if rep.nu[f] == 0:
            assert rep.satisfied[f].all()
        if not rep.satisfied[f].all():
            assert rep.nu[f] > 0


def test_batched_violations_match_single(case14):
    rng = np.random.default_rng(0)
    k = 4
    op = OperatingPoint(1 + 0.05 * rng.normal(size=(k, 14)), 0.1 * rng.normal(size=(k, 14)),
                        rng.uniform(0, 1, (k, 5)), rng.uniform(-0.2, 0.2, (k, 5)))
    p0, q0 = case14.nominal_load()
    load = LoadPoint(np.tile(p0, (k, 1)), np.tile(q0, (k, 1)))
    batch = constraint_violations(case14, load, op)
    for i in range(k):
        one = constraint_violations(case14, LoadPoint(p0, q0),
                                    OperatingPoint(op.v[i], op.theta[i], op.pg[i], op.qg[i]))
        for f in FAMILIES:
            np.testing.assert_allclose(batch[f][i], one[f], rtol=1e-13, atol=1e-15)


def test_dispatch_cost_examples():
    net = two_bus(cost=(0.01, 30.0, 100.0))
    assert dispatch_cost(net, [2.0]) == pytest.approx(6500.0)
    assert dispatch_cost(two_bus(cost=(0, 0, 0)), [0.0]) == 0.0
    two = Network(100.0, (Bus(1, 0.9, 1.1, 1.0, True),),
                  (Generator(0, 0, 2, -1, 1, (0, 10, 0)), Generator(0, 0, 2, -1, 1, (0, 20, 0))), (), ())
    assert dispatch_cost(two, [1.0, 0.5]) == pytest.approx(2000.0)
    # committed idle unit still pays c0
    assert dispatch_cost(two_bus(cost=(0.0, 5.0, 42.0)), [0.0]) == 42.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 2), st.floats(0, 2))
def test_dispatch_cost_monotone(c2, c1, p, dp):
    net = two_bus(cost=(c2, c1, 3.0))
    assert dispatch_cost(net, [p + dp]) >= dispatch_cost(net, [p])


def test_operating_point_dimension_check(case14):
    with pytest.raises(ValueError):
        violation_report(case14, LoadPoint(*case14.nominal_load()),
                         OperatingPoint(np.ones(13), np.zeros(13), np.zeros(5), np.zeros(5)))
