import logging

import numpy as np
import pytest

from gridlearn.grid import Branch, Bus, Generator, Load, Network, load_case

logging.getLogger("gridlearn").setLevel(logging.ERROR)

TWO_BUS_TEXT = """function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	138	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	138	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	200	-200	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0	10	0;
];
"""


def two_bus(g=0.0, b=-10.0, load=(0.5, 0.1), s_max=None, theta_delta=2 * np.pi, cost=(0.0, 10.0, 0.0),
            p_max=2.0, q_lim=2.0) -> Network:
    """Generator plus reference at bus 0, one load at bus 1, one line."""
    return Network(
        base_mva=100.0,
        buses=(Bus(1, 0.9, 1.1, 138.0, True), Bus(2, 0.9, 1.1, 138.0, False)),
        generators=(Generator(0, 0.0, p_max, -q_lim, q_lim, cost),),
        branches=(Branch(0, 1, g, b, s_max, theta_delta),),
        loads=(Load(1, *load),),
        name="two_bus",
    )


@pytest.fixture
def lossless_two_bus() -> Network:
    return two_bus()


@pytest.fixture
def lossy_two_bus() -> Network:
    return two_bus(g=2.0, b=-10.0, s_max=1.0, theta_delta=0.5)


@pytest.fixture(scope="session")
def case14() -> Network:
    return load_case("case14")


@pytest.fixture(scope="session")
def case118() -> Network:
    return load_case("case118")


@pytest.fixture(scope="session")
def small_dataset(case14):
    """A few dozen solved case14 snapshots, shared across modules."""
    from gridlearn.datagen import GenConfig, generate

    return generate(case14, GenConfig(n_points=40, seed=3))


# -- acceptance reporting: one PASS/FAIL line per criterion

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    entry = _CRITERIA.setdefault(number, [title, True, ""])
    entry[1] = entry[1] and rep.passed
    if detail:
        entry[2] = f"{entry[2]}; {detail}" if entry[2] else detail


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
