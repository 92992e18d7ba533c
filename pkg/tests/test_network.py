import math

import numpy as np
import pytest

from qsse.network import (Branch, BusKind, CaseError, build_ybus, load_case, parse_case, parse_cdf,
                          parse_matpower, to_cdf, to_matpower)


def dense_ybus_loop(case):
    """Element-by-element Pi-model assembly, independent of the sparse builder."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = case.index_of(br.from_bus), case.index_of(br.to_bus)
        ys = 1 / complex(br.r, br.x)
        a = br.tap_ratio * np.exp(1j * br.phase_shift)
        Y[f, f] += (ys + 1j * br.b_charging / 2) / abs(a) ** 2
        Y[t, t] += ys + 1j * br.b_charging / 2
        Y[f, t] += -ys / np.conj(a)
        Y[t, f] += -ys / a
    for i, b in enumerate(case.buses):
        Y[i, i] += complex(b.shunt_g, b.shunt_b)
    return Y


def test_case14_shape(case14):
    assert case14.n_bus == 14
    assert case14.n_branch == 20
    assert case14.buses[case14.slack_index].id == 1
    assert case14.buses[case14.slack_index].kind is BusKind.SLACK


def test_case300_loads(case300):
    assert case300.n_bus == 300
    assert sum(b.kind is BusKind.SLACK for b in case300.buses) == 1


@pytest.mark.parametrize("name", ["ieee14", "ieee300"])
def test_ybus_matches_loop_assembly(name):
    case = load_case(name)
    Y = build_ybus(case).dense()
    assert np.allclose(Y, dense_ybus_loop(case), atol=1e-12)


def test_ybus_symmetric_without_phase_shifters(case14):
    Y = build_ybus(case14).dense()
    assert np.allclose(Y, Y.T)


def test_ybus_row_sums_are_shunts_for_plain_lines():
    # no taps or charging: rows of Ybus sum to the bus shunt
    text = """
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
2 1 10 5 0 20 1 1 0 0 1 1.1 0.9;
3 1 10 5 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [1 0 0 0 0 1.0 100 1 0 0];
mpc.branch = [
1 2 0.01 0.1 0 0 0 0 0 0 1 0 0;
2 3 0.02 0.2 0 0 0 0 0 0 1 0 0;
];
"""
    case = parse_matpower(text)
    Y = build_ybus(case).dense()
    assert np.allclose(Y.sum(axis=1), [0, 0.2j, 0])


def test_branch_current_consistency(case14, rng):
    ym = build_ybus(case14)
    V = (1 + 0.05 * rng.standard_normal(14)) * np.exp(1j * 0.1 * rng.standard_normal(14))
    I = ym.ybus @ V
    # nodal current equals the sum of branch-end currents plus the shunt current
    inj = np.zeros(14, dtype=complex)
    np.add.at(inj, ym.f_idx, ym.yf @ V)
    np.add.at(inj, ym.t_idx, ym.yt @ V)
    inj += np.array([complex(b.shunt_g, b.shunt_b) for b in case14.buses]) * V
    assert np.allclose(I, inj)


def test_matpower_round_trip(case14):
    again = parse_matpower(to_matpower(case14), name=case14.name)
    assert again.buses == case14.buses
    assert again.branches == case14.branches
    assert np.allclose(build_ybus(again).dense(), build_ybus(case14).dense(), atol=0)


def test_cdf_round_trip(case14):
    again = parse_cdf(to_cdf(case14))
    assert again.n_bus == 14
    assert np.allclose(build_ybus(again).dense(), build_ybus(case14).dense(), atol=1e-9)


def test_parse_case_dispatch(case14):
    assert parse_case(to_cdf(case14), "cdf").n_bus == 14
    with pytest.raises(ValueError):
        parse_case("", "json")


def test_rejects_two_slacks(case14):
    text = to_matpower(case14)
    bus_block = text.split("mpc.bus = [")[1].split("];")[0]
    rows = bus_block.strip().splitlines()
    cols = rows[1].split()
    cols[1] = "3"
    bad = text.replace(rows[1], " ".join(cols), 1)
    with pytest.raises(CaseError, match="slack"):
        parse_matpower(bad)


def test_rejects_island():
    text = """
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
2 1 10 5 0 0 1 1 0 0 1 1.1 0.9;
3 1 10 5 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [1 0 0 0 0 1.0 100 1 0 0];
mpc.branch = [
1 2 0.01 0.1 0 0 0 0 0 0 1 0 0;
2 3 0.02 0.2 0 0 0 0 0 0 0 0 0;
];
"""
    with pytest.raises(CaseError, match="island"):
        parse_matpower(text)


def test_rejects_unknown_bus_and_zero_impedance():
    base = """
mpc.baseMVA = 100;
mpc.bus = [
1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
2 1 10 5 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [1 0 0 0 0 1.0 100 1 0 0];
mpc.branch = [
%s
];
"""
    with pytest.raises(CaseError, match="unknown bus"):
        parse_matpower(base % "1 7 0.01 0.1 0 0 0 0 0 0 1 0 0;")
    with pytest.raises(CaseError, match="zero impedance"):
        parse_matpower(base % "1 2 0 0 0 0 0 0 0 0 1 0 0;")


def test_rejects_short_rows():
    with pytest.raises(CaseError):
        parse_matpower("mpc.baseMVA = 100;\nmpc.bus = [1 3 0];\nmpc.gen = [];\nmpc.branch = [];")


def test_tap_on_from_side():
    br = Branch(1, 2, 0.0, 0.1, tap_ratio=0.95)
    from qsse.network import branch_admittances
    yff, yft, ytf, ytt = branch_admittances(br)
    ys = 1 / 0.1j
    assert yff == pytest.approx(ys / 0.95 ** 2)
    assert ytt == pytest.approx(ys)
    assert yft == pytest.approx(-ys / 0.95)


def test_phase_shift_breaks_symmetry():
    br = Branch(1, 2, 0.0, 0.1, phase_shift=math.radians(5))
    from qsse.network import branch_admittances
    _, yft, ytf, _ = branch_admittances(br)
    assert abs(yft - ytf) > 1e-3
