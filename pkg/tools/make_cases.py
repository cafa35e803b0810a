"""Regenerate the bundled IEEE 30/118 case and partition files.

Needs pandapower (``pip install pandapower``), which is only used here to solve
the reference power flows.  Area partitions are spectral clusterings of the bus
graph and are reconstructions, not published area assignments.

    python tools/make_cases.py
"""

import math
from pathlib import Path

import numpy as np
import pandapower as pp
import pandapower.networks as pn
from pypower.api import case118, ppoption, runpf
from pypower.ext2int import ext2int
from scipy.optimize import brentq
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import SpectralClustering

from gridstate.grid import (
    AreaPartition,
    Branch,
    Bus,
    NetworkCase,
    build_admittance,
    power_injections,
    serialize_case,
    serialize_partition,
)

OUT = Path(__file__).resolve().parents[1] / "src" / "gridstate" / "data"

# bus 3 voltage magnitudes before/after the step change of the latency scenario
V3_BEFORE = 1.02099501402936
V3_AFTER = 1.01138192767137


def solve(net):
    pp.runpp(net, tolerance_mva=1e-11, max_iteration=50)
    return net


def to_case(net) -> NetworkCase:
    return ppc_to_case(net._ppc)


def ppc_to_case(ppc) -> NetworkCase:
    base = float(ppc["baseMVA"])
    bus = np.real(ppc["bus"])
    br = np.real(ppc["branch"])
    slack = int(np.flatnonzero(bus[:, 1] == 3)[0])
    va0 = bus[slack, 8]
    buses = [
        Bus(
            int(row[0]) + 1,
            float(row[7]),
            math.radians(float(row[8] - va0)),
            float(row[4]) / base,
            float(row[5]) / base,
        )
        for row in bus
    ]
    branches = []
    for row in br:
        if row[10] == 0:
            continue
        tap = float(row[8]) or 1.0
        branches.append(
            Branch(int(row[0]) + 1, int(row[1]) + 1, float(row[2]), float(row[3]),
                   float(row[4]), tap, math.radians(float(row[9])))
        )
    case = NetworkCase(base, buses, branches, slack + 1)
    check_balance(case, ppc)
    return case


def check_balance(case, ppc):
    """Injections from our admittance model must match the solved power flow."""
    base = float(ppc["baseMVA"])
    bus = np.real(ppc["bus"])
    gen = np.real(ppc["gen"])
    s_spec = -(bus[:, 2] + 1j * bus[:, 3])
    for row in gen:
        if row[7] > 0:
            s_spec[int(row[0])] += row[1] + 1j * row[2]
    s = power_injections(case, build_admittance(case)) * base
    pq = bus[:, 1] == 1
    err = np.max(np.abs(s[pq] - s_spec[pq]))
    assert err < 1e-6, f"power flow mismatch {err}"


def solve_pypower(ppc):
    """Solve a MATPOWER-format case; returns internal 0-based numbering."""
    res, ok = runpf(ppc, ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-12))
    assert ok
    return ext2int(res)


def scaled(factory, factor):
    net = factory()
    net.load["p_mw"] *= factor
    net.load["q_mvar"] *= factor
    net.gen["p_mw"] *= factor
    return solve(net)


def v3_at(factor):
    return scaled(pn.case_ieee30, factor).res_bus.vm_pu.values[2]


def partition(case, n_areas):
    """First seed whose spectral clustering yields connected areas."""
    for seed in range(100):
        try:
            return _partition(case, n_areas, seed)
        except AssertionError:
            continue
    raise RuntimeError("no connected partition found")


def _partition(case, n_areas, seed):
    n = case.n_bus
    A = np.zeros((n, n))
    for br in case.branches:
        i, j = case.index[br.from_bus], case.index[br.to_bus]
        A[i, j] = A[j, i] = 1.0
    labels = SpectralClustering(
        n_areas, affinity="precomputed", random_state=seed, assign_labels="discretize"
    ).fit_predict(A)
    for a in range(n_areas):
        idx = np.flatnonzero(labels == a)
        n_comp, _ = connected_components(A[np.ix_(idx, idx)], directed=False)
        assert n_comp == 1, f"area {a} is not connected"
    # number areas by their lowest bus id
    order = sorted(range(n_areas), key=lambda a: min(case.buses[i].id for i in np.flatnonzero(labels == a)))
    rename = {old: new + 1 for new, old in enumerate(order)}
    return AreaPartition({case.buses[i].id: rename[labels[i]] for i in range(n)})


def write(name, text, header):
    (OUT / name).write_text(header + text, encoding="utf-8")
    print("wrote", name)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    note = "# generated by tools/make_cases.py from the solved pandapower/MATPOWER case\n"
    c30 = to_case(solve(pn.case_ieee30()))
    write("ieee30.case", serialize_case(c30), "# IEEE 30 bus test case\n" + note)
    c118 = ppc_to_case(solve_pypower(case118()))
    write("ieee118.case", serialize_case(c118), "# IEEE 118 bus test case\n" + note)

    f0 = brentq(lambda s: v3_at(s) - V3_BEFORE, 0.9, 1.3, xtol=1e-14)
    f1 = brentq(lambda s: v3_at(s) - V3_AFTER, 1.0, 1.6, xtol=1e-14)
    for name, f in (("ieee30_t0.case", f0), ("ieee30_t10.case", f1)):
        case = to_case(scaled(pn.case_ieee30, f))
        write(name, serialize_case(case),
              f"# IEEE 30 bus, load and generation scaled by {f!r}\n" + note)

    recon = "# area partition reconstructed by spectral clustering (tools/make_cases.py)\n"
    write("ieee30_3area.part", serialize_partition(partition(c30, 3)), recon)
    write("ieee118_9area.part", serialize_partition(partition(c118, 9)), recon)


if __name__ == "__main__":
    main()
