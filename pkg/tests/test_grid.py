import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_case
from gridstate.errors import CaseFormatError, CaseValidationError, PartitionError
from gridstate.grid import (
    AreaPartition,
    Branch,
    Bus,
    NetworkCase,
    build_admittance,
    load_case,
    parse_case,
    parse_partition,
    power_injections,
    serialize_case,
    serialize_partition,
)

TWO_BUS = """\
#SECTION META
base_mva 100
slack 1
#SECTION BUS
1 1.0 0.0 0 0
2 0.98 -2.0 0 0
#SECTION BRANCH
1 2 0.01 0.1 0.02 1.0 0.0
"""


def branch_currents(br, Vf, Vt):
    """Terminal currents of one branch by walking the circuit: ideal transformer
    on the from side, then the pi section."""
    a = br.tap_ratio * np.exp(1j * br.tap_shift)
    ys = 1 / complex(br.r, br.x)
    half = 0.5j * br.b_charging
    Vi = Vf / a
    I_pi = (Vi - Vt) * ys + Vi * half
    If = I_pi / np.conj(a)  # lossless ideal transformer
    It = (Vt - Vi) * ys + Vt * half
    return If, It


def test_parse_two_bus():
    case = parse_case(TWO_BUS)
    assert case.n_bus == 2 and len(case.branches) == 1
    assert case.slack_index == 0
    assert case.buses[1].theta_true == pytest.approx(math.radians(-2.0))
    assert case.n_state == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(0, 4))
def test_serialize_round_trip(seed, n, extra):
    case = random_case(seed, n, extra)
    again = parse_case(serialize_case(case))
    assert again.buses == case.buses or all(
        a.id == b.id and math.isclose(a.theta_true, b.theta_true, rel_tol=1e-15, abs_tol=1e-17)
        for a, b in zip(again.buses, case.buses)
    )
    assert [b.v_true for b in again.buses] == [b.v_true for b in case.buses]
    assert [(br.from_bus, br.to_bus, br.r, br.x) for br in again.branches] == [
        (br.from_bus, br.to_bus, br.r, br.x) for br in case.branches
    ]
    # second pass is a fixed point of the text form
    assert serialize_case(again) == serialize_case(parse_case(serialize_case(again)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(0, 5))
def test_admittance_matches_circuit_walk(seed, n, extra):
    case = random_case(seed, n, extra)
    adm = build_admittance(case)
    rng = np.random.default_rng(seed)
    V = rng.uniform(0.9, 1.1, n) * np.exp(1j * rng.uniform(-0.5, 0.5, n))
    I = np.array([complex(b.shunt_g, b.shunt_b) * V[i] for i, b in enumerate(case.buses)])
    for br in case.branches:
        i, j = case.index[br.from_bus], case.index[br.to_bus]
        If, It = branch_currents(br, V[i], V[j])
        I[i] += If
        I[j] += It
    np.testing.assert_allclose(adm.Y @ V, I, rtol=1e-12, atol=1e-12)


def test_admittance_symmetric_without_phase_shifters():
    case = random_case(3, 8, 4, taps=False)
    Y = build_admittance(case).Y.toarray()
    np.testing.assert_allclose(Y, Y.T, atol=1e-14)


def test_parallel_branches_sum():
    single = parse_case(TWO_BUS)
    br = single.branches[0]
    double = NetworkCase(100.0, single.buses, [br, br], 1)
    np.testing.assert_allclose(build_admittance(double).Y.toarray(), 2 * build_admittance(single).Y.toarray())


def test_bundled_cases_are_power_flow_solutions(ieee30, ieee118):
    # PQ buses without load or generation inject nothing at the solved point
    s30 = power_injections(ieee30, build_admittance(ieee30))
    assert abs(s30[ieee30.index[9]]) < 1e-9  # bus 9: no load, no generation
    assert ieee30.n_bus == 30 and len(ieee30.branches) == 41
    assert ieee118.n_bus == 118 and ieee118.slack_bus == 69
    s118 = power_injections(ieee118, build_admittance(ieee118))
    assert np.all(np.isfinite(s118))


def test_step_cases_hit_reference_voltages():
    assert load_case("ieee30_t0.case").buses[2].v_true == pytest.approx(1.02099501402936, abs=1e-12)
    assert load_case("ieee30_t10.case").buses[2].v_true == pytest.approx(1.01138192767137, abs=1e-12)


@pytest.mark.parametrize(
    "text, message",
    [
        (TWO_BUS.replace("1 2 0.01", "1 3 0.01"), "missing bus 3"),
        (TWO_BUS.replace("2 0.98 -2.0", "1 0.98 -2.0"), "duplicate bus id 1"),
        (TWO_BUS.replace("slack 1", "slack 5"), "slack bus 5"),
        (TWO_BUS.replace("1 2 0.01 0.1", "2 2 0.01 0.1"), "self loop"),
        (TWO_BUS.replace("0.01 0.1 0.02", "0 0 0.02"), "zero series impedance"),
        (TWO_BUS.replace("1 1.0 0.0 0 0", "1 1.0 3.0 0 0"), "angle must be 0"),
        (TWO_BUS.replace("1.0 0.0\n", "-1.0 0.0\n"), "tap ratio"),
    ],
)
def test_validation_errors(text, message):
    with pytest.raises(CaseValidationError, match=message):
        parse_case(text)


def test_disconnected_case_rejected():
    buses = [Bus(1, 1.0, 0.0), Bus(2, 1.0, 0.0), Bus(3, 1.0, 0.0)]
    with pytest.raises(CaseValidationError, match="bus 3 is not reachable"):
        NetworkCase(100.0, buses, [Branch(1, 2, 0.01, 0.1)], 1)


@pytest.mark.parametrize(
    "bad, line",
    [
        ("1 2 0.01 0.1 0.02 1.0", 8),
        ("1 2 0.01 zz 0.02 1.0 0.0", 8),
    ],
)
def test_format_errors_carry_line_numbers(bad, line):
    text = TWO_BUS.replace("1 2 0.01 0.1 0.02 1.0 0.0", bad)
    with pytest.raises(CaseFormatError, match=f"line {line}:"):
        parse_case(text)


def test_missing_meta():
    with pytest.raises(CaseFormatError, match="slack"):
        parse_case(TWO_BUS.replace("slack 1\n", ""))


def test_partition_round_trip_and_errors(ieee30, ieee30_part):
    assert ieee30_part.n_areas == 3
    assert parse_partition(serialize_partition(ieee30_part), ieee30) == ieee30_part
    case = parse_case(TWO_BUS)
    with pytest.raises(PartitionError, match="not assigned"):
        parse_partition("1 1\n", case)
    with pytest.raises(PartitionError, match="unknown bus 7"):
        parse_partition("1 1\n7 2\n", case)
    with pytest.raises(PartitionError, match="assigned twice"):
        parse_partition("1 1\n1 2\n2 1\n", case)
    with pytest.raises(PartitionError, match="area 2 is empty"):
        parse_partition("# areas 2\n1 1\n2 1\n", case)
    assert AreaPartition.single(case).areas == (1,)


def test_bundled_partitions_have_connected_areas(ieee30, ieee30_part, ieee118, ieee118_part):
    from scipy.sparse.csgraph import connected_components
    import scipy.sparse as sp

    for case, part in ((ieee30, ieee30_part), (ieee118, ieee118_part)):
        for area in part.areas:
            buses = part.buses_in(area)
            pos = {b: k for k, b in enumerate(buses)}
            rows, cols = [], []
            for br in case.branches:
                if br.from_bus in pos and br.to_bus in pos:
                    rows.append(pos[br.from_bus])
                    cols.append(pos[br.to_bus])
            g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(buses),) * 2)
            assert connected_components(g, directed=False)[0] == 1
