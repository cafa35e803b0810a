import sys

import numpy as np
import pytest

from gridstate.grid import Branch, Bus, NetworkCase, load_case, load_partition


def random_case(seed, n_bus, extra_edges=0, taps=True, slack=1):
    """Connected random network: a random spanning tree plus ``extra_edges`` chords."""
    rng = np.random.default_rng(seed)
    ids = list(range(1, n_bus + 1))
    buses = []
    for i in ids:
        theta = 0.0 if i == slack else float(rng.uniform(-0.3, 0.3))
        buses.append(Bus(i, float(rng.uniform(0.94, 1.06)), theta,
                         float(rng.uniform(0, 0.02)), float(rng.uniform(-0.05, 0.1))))
    pairs = set()
    branches = []

    def add(f, t):
        tap = float(rng.uniform(0.95, 1.05)) if taps and rng.random() < 0.3 else 1.0
        shift = float(rng.uniform(-0.1, 0.1)) if taps and rng.random() < 0.2 else 0.0
        branches.append(Branch(f, t, float(rng.uniform(0.005, 0.05)), float(rng.uniform(0.02, 0.3)),
                               float(rng.uniform(0, 0.05)), tap, shift))
        pairs.add((min(f, t), max(f, t)))

    for k in range(1, n_bus):
        parent = int(rng.integers(0, k))
        f, t = (ids[parent], ids[k]) if rng.random() < 0.5 else (ids[k], ids[parent])
        add(f, t)
    tries = 0
    while extra_edges and tries < 100:
        tries += 1
        f, t = (int(x) for x in rng.choice(ids, 2, replace=False))
        if (min(f, t), max(f, t)) not in pairs:
            add(f, t)
            extra_edges -= 1
    return NetworkCase(100.0, buses, branches, slack)


@pytest.fixture(scope="session")
def ieee30():
    return load_case("ieee30.case")


@pytest.fixture(scope="session")
def ieee30_part(ieee30):
    return load_partition("ieee30_3area.part", ieee30)


@pytest.fixture(scope="session")
def ieee118():
    return load_case("ieee118.case")


@pytest.fixture(scope="session")
def ieee118_part(ieee118):
    return load_partition("ieee118_9area.part", ieee118)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
