import numpy as np
import pytest

from qsse.measurements import NoiseConfig, default_plan
from qsse.network import build_ybus, load_case, parse_matpower
from qsse.scenario import make_trajectory

TWO_BUS = """
function mpc = two
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
2 1 60 25 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.gen = [
1 0 0 300 -300 1.0 100 1 300 0;
];
mpc.branch = [
1 2 0.02 0.08 0.04 0 0 0 0 0 1 -360 360;
];
"""


@pytest.fixture(scope="session")
def case14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def ybus14(case14):
    return build_ybus(case14)


@pytest.fixture(scope="session")
def plan14(case14):
    return default_plan(case14, NoiseConfig())


@pytest.fixture(scope="session")
def case300():
    return load_case("ieee300")


@pytest.fixture(scope="session")
def two_bus():
    return parse_matpower(TWO_BUS, name="two")


@pytest.fixture(scope="session")
def traj14(case14, ybus14):
    return make_trajectory(case14, "normal", seed=0, ybus=ybus14)


@pytest.fixture(scope="session")
def traj14_sudden(case14, ybus14):
    return make_trajectory(case14, "sudden", seed=0, ybus=ybus14)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
