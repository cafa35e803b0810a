"""Network cases, area partitions and bus admittance construction.

Case file layout::

    #SECTION META
    base_mva 100
    slack 1
    #SECTION BUS
    # id v_true theta_true_deg shunt_g shunt_b
    1 1.06 0.0 0 0
    #SECTION BRANCH
    # from to r x b_charging tap_ratio tap_shift_deg
    1 2 0.0192 0.0575 0.0528 1 0

Angles are degrees on disk and radians in memory.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import CaseFormatError, CaseValidationError, PartitionError

DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class Bus:
    id: int
    v_true: float
    theta_true: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0
    tap_shift: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "index", {b.id: i for i, b in enumerate(self.buses)})
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def slack_index(self) -> int:
        return self.index[self.slack_bus]

    @property
    def n_state(self) -> int:
        """State dimension with the slack angle pinned."""
        return 2 * self.n_bus - 1

    def branch_index_arrays(self):
        f = np.array([self.index[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([self.index[br.to_bus] for br in self.branches], dtype=int)
        return f, t

    def neighbors(self) -> dict[int, set[int]]:
        out = {b.id: set() for b in self.buses}
        for br in self.branches:
            out[br.from_bus].add(br.to_bus)
            out[br.to_bus].add(br.from_bus)
        return out

    def with_truth(self, v, theta) -> NetworkCase:
        """Same network with a different ground-truth operating point."""
        buses = [
            Bus(b.id, float(vi), float(ti), b.shunt_g, b.shunt_b)
            for b, vi, ti in zip(self.buses, v, theta)
        ]
        return NetworkCase(self.base_mva, buses, self.branches, self.slack_bus)

    def truth(self):
        from .measurement import StateVector

        return StateVector.from_case(self)


def validate_case(case: NetworkCase) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be positive, got {case.base_mva}")
    if not case.buses:
        raise CaseValidationError("case has no buses")
    counts = Counter(b.id for b in case.buses)
    dup = [i for i, c in counts.items() if c > 1]
    if dup:
        raise CaseValidationError(f"duplicate bus id {dup[0]}", entity=dup[0])
    if case.slack_bus not in case.index:
        raise CaseValidationError(
            f"slack bus {case.slack_bus} is not in the BUS section", entity=case.slack_bus
        )
    for b in case.buses:
        if not b.v_true > 0:
            raise CaseValidationError(f"bus {b.id}: v_true must be positive", entity=b.id)
    slack = case.buses[case.index[case.slack_bus]]
    if abs(slack.theta_true) > 1e-12:
        raise CaseValidationError(
            f"slack bus {slack.id} angle must be 0, got {slack.theta_true}", entity=slack.id
        )
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in case.index:
                raise CaseValidationError(
                    f"branch {k} ({br.from_bus}-{br.to_bus}) references missing bus {end}",
                    entity=end,
                )
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k} is a self loop at bus {br.from_bus}", entity=k)
        if math.hypot(br.r, br.x) == 0:
            raise CaseValidationError(f"branch {k} has zero series impedance", entity=k)
        if not br.tap_ratio > 0:
            raise CaseValidationError(f"branch {k} has non-positive tap ratio", entity=k)
    n = case.n_bus
    if n > 1:
        f, t = case.branch_index_arrays()
        graph = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
        n_comp, labels = connected_components(graph, directed=False)
        if n_comp > 1:
            island = [case.buses[i].id for i in np.flatnonzero(labels != labels[case.slack_index])]
            raise CaseValidationError(
                f"network is not connected: bus {island[0]} is not reachable from the slack",
                entity=island[0],
            )


def _floats(tokens, lineno, expected, what):
    if len(tokens) != expected:
        raise CaseFormatError(f"{what} row needs {expected} fields, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise CaseFormatError(f"bad number in {what} row: {exc}", lineno) from None


def _bus_id(token, lineno):
    try:
        value = float(token)
    except ValueError:
        raise CaseFormatError(f"bad bus id {token!r}", lineno) from None
    if value != int(value):
        raise CaseFormatError(f"bus id {token!r} is not an integer", lineno)
    return int(value)


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_case(text: str) -> NetworkCase:
    section = None
    meta = {}
    buses, branches = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.upper().startswith("#SECTION"):
            parts = stripped.split()
            if len(parts) != 2 or parts[1].upper() not in ("BUS", "BRANCH", "META"):
                raise CaseFormatError(f"unknown section header {stripped!r}", lineno)
            section = parts[1].upper()
            continue
        line = _strip(raw)
        if not line:
            continue
        tokens = line.split()
        if section is None:
            raise CaseFormatError("data before the first #SECTION header", lineno)
        if section == "META":
            if len(tokens) != 2:
                raise CaseFormatError("META rows are 'key value'", lineno)
            key, value = tokens
            if key == "base_mva":
                meta[key] = _floats([value], lineno, 1, "META")[0]
            elif key == "slack":
                meta[key] = _bus_id(value, lineno)
            else:
                raise CaseFormatError(f"unknown META key {key!r}", lineno)
        elif section == "BUS":
            if len(tokens) != 5:
                raise CaseFormatError(f"BUS row needs 5 fields, got {len(tokens)}", lineno)
            bid = _bus_id(tokens[0], lineno)
            v, th, g, b = _floats(tokens[1:], lineno, 4, "BUS")
            buses.append(Bus(bid, v, math.radians(th), g, b))
        else:
            if len(tokens) != 7:
                raise CaseFormatError(f"BRANCH row needs 7 fields, got {len(tokens)}", lineno)
            f, t = _bus_id(tokens[0], lineno), _bus_id(tokens[1], lineno)
            r, x, bc, tap, shift = _floats(tokens[2:], lineno, 5, "BRANCH")
            branches.append(Branch(f, t, r, x, bc, tap, math.radians(shift)))
    for key in ("base_mva", "slack"):
        if key not in meta:
            raise CaseFormatError(f"META section is missing {key!r}")
    return NetworkCase(meta["base_mva"], buses, branches, meta["slack"])


def serialize_case(case: NetworkCase) -> str:
    lines = [
        "#SECTION META",
        f"base_mva {case.base_mva!r}",
        f"slack {case.slack_bus}",
        "#SECTION BUS",
        "# id v_true theta_true_deg shunt_g shunt_b",
    ]
    for b in case.buses:
        lines.append(
            f"{b.id} {b.v_true!r} {math.degrees(b.theta_true)!r} {b.shunt_g!r} {b.shunt_b!r}"
        )
    lines += ["#SECTION BRANCH", "# from to r x b_charging tap_ratio tap_shift_deg"]
    for br in case.branches:
        lines.append(
            f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} {br.b_charging!r} "
            f"{br.tap_ratio!r} {math.degrees(br.tap_shift)!r}"
        )
    return "\n".join(lines) + "\n"


def resolve_path(path, base: Path | None = None) -> Path:
    """Find a data file: as given, relative to ``base``, then in the bundled data dir."""
    p = Path(path)
    candidates = [p]
    if base is not None and not p.is_absolute():
        candidates.append(Path(base) / p)
    candidates.append(DATA_DIR / p.name)
    for c in candidates:
        if c.exists():
            return c
    raise FileNotFoundError(f"cannot find {path}")


def load_case(path) -> NetworkCase:
    return parse_case(resolve_path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class AreaPartition:
    area_of: dict[int, int]

    @property
    def areas(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.area_of.values())))

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    def buses_in(self, area: int) -> list[int]:
        return sorted(b for b, a in self.area_of.items() if a == area)

    @classmethod
    def single(cls, case: NetworkCase, area: int = 1) -> AreaPartition:
        return cls({b.id: area for b in case.buses})


def parse_partition(text: str, case: NetworkCase, n_areas: int | None = None) -> AreaPartition:
    """Read ``bus_id area_id`` rows.

    An optional ``# areas N`` comment line declares the area count; when present
    (or when ``n_areas`` is given) every area 1..N must receive at least one bus.
    """
    area_of: dict[int, int] = {}
    declared = n_areas
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("#"):
            parts = stripped.lstrip("#").split()
            if len(parts) == 2 and parts[0] == "areas" and declared is None:
                declared = _bus_id(parts[1], lineno)
            continue
        line = _strip(raw)
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise CaseFormatError("partition rows are 'bus_id area_id'", lineno)
        bus, area = _bus_id(tokens[0], lineno), _bus_id(tokens[1], lineno)
        if bus not in case.index:
            raise PartitionError(f"line {lineno}: unknown bus {bus}")
        if bus in area_of:
            raise PartitionError(f"line {lineno}: bus {bus} assigned twice")
        area_of[bus] = area
    missing = [b.id for b in case.buses if b.id not in area_of]
    if missing:
        raise PartitionError(f"bus {missing[0]} is not assigned to any area")
    partition = AreaPartition(area_of)
    if declared is not None:
        empty = sorted(set(range(1, declared + 1)) - set(partition.areas))
        if empty:
            raise PartitionError(f"area {empty[0]} is empty")
        extra = sorted(set(partition.areas) - set(range(1, declared + 1)))
        if extra:
            raise PartitionError(f"area {extra[0]} exceeds the declared count {declared}")
    return partition


def serialize_partition(partition: AreaPartition) -> str:
    lines = [f"# areas {partition.n_areas}"]
    lines += [f"{b} {a}" for b, a in sorted(partition.area_of.items())]
    return "\n".join(lines) + "\n"


def load_partition(path, case: NetworkCase) -> AreaPartition:
    return parse_partition(resolve_path(path).read_text(encoding="utf-8"), case)


@dataclass(frozen=True)
class AdmittanceModel:
    """Bus admittance matrix plus per-branch two-port parameters (per unit).

    Branch currents follow ``I_f = yff V_f + yft V_t`` and ``I_t = ytf V_f + ytt V_t``.
    """

    Y: sp.csr_matrix
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f: np.ndarray
    t: np.ndarray

    @property
    def G(self):
        return self.Y.real

    @property
    def B(self):
        return self.Y.imag


def build_admittance(case: NetworkCase) -> AdmittanceModel:
    n = case.n_bus
    f, t = case.branch_index_arrays()
    r = np.array([br.r for br in case.branches], dtype=float)
    x = np.array([br.x for br in case.branches], dtype=float)
    bc = np.array([br.b_charging for br in case.branches], dtype=float)
    tap = np.array([br.tap_ratio for br in case.branches], dtype=float)
    shift = np.array([br.tap_shift for br in case.branches], dtype=float)

    ys = 1.0 / (r + 1j * x)
    a = tap * np.exp(1j * shift)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * tap)
    yft = -ys / np.conj(a)
    ytf = -ys / a

    ysh = np.array([b.shunt_g + 1j * b.shunt_b for b in case.buses])
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh])
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    Y.sort_indices()
    return AdmittanceModel(Y, yff, yft, ytf, ytt, f, t)


def power_injections(case: NetworkCase, adm: AdmittanceModel, v=None, theta=None):
    """Complex bus injections S = V conj(Y V); ground truth by default."""
    if v is None:
        v = np.array([b.v_true for b in case.buses])
        theta = np.array([b.theta_true for b in case.buses])
    V = v * np.exp(1j * theta)
    return V * np.conj(adm.Y @ V)
