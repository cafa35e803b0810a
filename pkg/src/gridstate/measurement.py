"""Measurement functions, Jacobians and synthetic measurement generation.

The full state vector used internally is ``[v_0..v_{N-1}, theta_0..theta_{N-1}]``
(length 2N).  The public "reduced" form drops the slack angle column, giving the
n = 2N - 1 unknowns of the estimation problem.

Every nonlinear (legacy) measurement is the real or imaginary part of a sum of
bilinear terms ``c * v_a * v_b * exp(j(theta_a - theta_b))``; branch flows and
bus injections both fit this form, which keeps evaluation fully vectorised.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import CaseFormatError, CaseValidationError
from .grid import AdmittanceModel, AreaPartition, NetworkCase, build_admittance


class Kind(str, Enum):
    P_FLOW = "P_flow"
    Q_FLOW = "Q_flow"
    P_INJ = "P_inj"
    Q_INJ = "Q_inj"
    V_MAG = "V_mag"
    PMU_VMAG = "PMU_Vmag"
    PMU_VANG = "PMU_Vang"

    def __str__(self):
        return self.value


FLOW_KINDS = (Kind.P_FLOW, Kind.Q_FLOW)
PMU_KINDS = (Kind.PMU_VMAG, Kind.PMU_VANG)
LEGACY_SIGMA = 1e-2
PMU_SIGMA = 1e-4


@dataclass(frozen=True)
class StateVector:
    bus_ids: tuple[int, ...]
    v: np.ndarray
    theta: np.ndarray
    slack_index: int

    def __post_init__(self):
        object.__setattr__(self, "bus_ids", tuple(int(b) for b in self.bus_ids))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.v.shape != (len(self.bus_ids),) or self.theta.shape != self.v.shape:
            raise ValueError("v and theta must have one entry per bus")

    @classmethod
    def from_case(cls, case: NetworkCase) -> StateVector:
        return cls(
            case.bus_ids,
            [b.v_true for b in case.buses],
            [b.theta_true for b in case.buses],
            case.slack_index,
        )

    @classmethod
    def flat(cls, case: NetworkCase) -> StateVector:
        n = case.n_bus
        return cls(case.bus_ids, np.ones(n), np.zeros(n), case.slack_index)

    @classmethod
    def from_full(cls, case_or_ids, x_full, slack_index=None) -> StateVector:
        if isinstance(case_or_ids, NetworkCase):
            ids, slack_index = case_or_ids.bus_ids, case_or_ids.slack_index
        else:
            ids = case_or_ids
        n = len(ids)
        return cls(ids, np.array(x_full[:n]), np.array(x_full[n:]), slack_index)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def full(self) -> np.ndarray:
        return np.concatenate([self.v, self.theta])

    def stacked(self) -> np.ndarray:
        """(v, theta) without the pinned slack angle."""
        return np.delete(self.full(), self.n_bus + self.slack_index)


def reduced_columns(n_bus: int, slack_index: int) -> np.ndarray:
    return np.delete(np.arange(2 * n_bus), n_bus + slack_index)


@dataclass(frozen=True)
class PlanEntry:
    kind: Kind
    loc1: int
    loc2: int | None
    sigma: float
    device: str

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.kind in FLOW_KINDS and self.loc2 is None:
            raise ValueError(f"{self.kind} needs a (from, to) bus pair")
        if self.kind not in FLOW_KINDS and self.loc2 is not None:
            raise ValueError(f"{self.kind} takes a single bus location")
        expected = "pmu" if self.kind in PMU_KINDS else "legacy"
        if self.device != expected:
            raise ValueError(f"{self.kind} must come from a {expected} device")


@dataclass(frozen=True)
class Measurement(PlanEntry):
    z: float = 0.0


@dataclass(frozen=True)
class MeasurementPlan:
    entries: tuple[PlanEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __add__(self, other: MeasurementPlan) -> MeasurementPlan:
        return MeasurementPlan(self.entries + other.entries)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([e.sigma for e in self.entries], dtype=float)

    def validate(self, case: NetworkCase) -> None:
        pairs = {(br.from_bus, br.to_bus) for br in case.branches}
        pairs |= {(t, f) for f, t in pairs}
        for i, e in enumerate(self.entries):
            if e.loc1 not in case.index:
                raise CaseValidationError(f"measurement {i}: unknown bus {e.loc1}", entity=e.loc1)
            if e.kind in FLOW_KINDS and (e.loc1, e.loc2) not in pairs:
                raise CaseValidationError(
                    f"measurement {i}: no branch between {e.loc1} and {e.loc2}", entity=i
                )


@dataclass(frozen=True)
class MeasurementSet:
    """Measured values paired with their plan; ``sigma`` may differ from the plan
    after pseudo-measurement substitution."""

    plan: MeasurementPlan
    z: np.ndarray
    sigma: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        sigma = self.plan.sigma if self.sigma is None else np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "sigma", sigma)
        if self.z.shape != (len(self.plan),) or self.sigma.shape != self.z.shape:
            raise ValueError("z and sigma must have one entry per plan row")

    def __len__(self):
        return len(self.plan)

    @property
    def k(self) -> int:
        return len(self.plan)

    def __iter__(self):
        for e, z, s in zip(self.plan.entries, self.z, self.sigma):
            yield Measurement(e.kind, e.loc1, e.loc2, float(s), e.device, float(z))

    def with_values(self, z=None, sigma=None) -> MeasurementSet:
        return MeasurementSet(
            self.plan,
            self.z if z is None else z,
            self.sigma if sigma is None else sigma,
        )

    def subset(self, rows) -> MeasurementSet:
        rows = np.asarray(rows, dtype=int)
        plan = MeasurementPlan([self.plan.entries[i] for i in rows])
        return MeasurementSet(plan, self.z[rows], self.sigma[rows])


class MeasurementModel:
    """Compiled h(x) and Jacobian for one (case, plan) pair."""

    def __init__(self, case: NetworkCase, plan: MeasurementPlan, adm: AdmittanceModel | None = None):
        plan.validate(case)
        self.case = case
        self.plan = plan
        self.adm = adm if adm is not None else build_admittance(case)
        self.n_bus = case.n_bus
        self.k = len(plan)
        self.slack_index = case.slack_index
        self._compile()

    def _compile(self):
        case, adm, n = self.case, self.adm, self.n_bus
        Y = adm.Y.tocsr()
        t_row, t_a, t_b, t_c = [], [], [], []
        lin_row, lin_col = [], []
        imag_rows = np.zeros(self.k, dtype=bool)
        by_pair: dict[tuple[int, int], list[int]] = {}
        for k, br in enumerate(case.branches):
            by_pair.setdefault((br.from_bus, br.to_bus), []).append(k)
        for m, e in enumerate(self.plan.entries):
            i = case.index[e.loc1]
            if e.kind in (Kind.V_MAG, Kind.PMU_VMAG):
                lin_row.append(m)
                lin_col.append(i)
                continue
            if e.kind == Kind.PMU_VANG:
                lin_row.append(m)
                lin_col.append(n + i)
                continue
            imag_rows[m] = e.kind in (Kind.Q_FLOW, Kind.Q_INJ)
            if e.kind in FLOW_KINDS:
                j = case.index[e.loc2]
                # parallel circuits between the pair are summed
                for k in by_pair.get((e.loc1, e.loc2), []):
                    t_row += [m, m]
                    t_a += [i, i]
                    t_b += [i, j]
                    t_c += [np.conj(adm.yff[k]), np.conj(adm.yft[k])]
                for k in by_pair.get((e.loc2, e.loc1), []):
                    t_row += [m, m]
                    t_a += [i, i]
                    t_b += [i, j]
                    t_c += [np.conj(adm.ytt[k]), np.conj(adm.ytf[k])]
            else:
                lo, hi = Y.indptr[i], Y.indptr[i + 1]
                for j, y in zip(Y.indices[lo:hi], Y.data[lo:hi]):
                    t_row.append(m)
                    t_a.append(i)
                    t_b.append(int(j))
                    t_c.append(np.conj(y))
        self.t_row = np.array(t_row, dtype=int)
        self.t_a = np.array(t_a, dtype=int)
        self.t_b = np.array(t_b, dtype=int)
        self.t_c = np.array(t_c, dtype=complex)
        self.t_imag = imag_rows[self.t_row]
        self.lin_row = np.array(lin_row, dtype=int)
        self.lin_col = np.array(lin_col, dtype=int)
        self.linear_rows = np.zeros(self.k, dtype=bool)
        self.linear_rows[self.lin_row] = True

        # Jacobian slots: per term dv_a, dv_b, dth_a, dth_b (angle slots skipped
        # for diagonal terms, whose angle derivatives cancel identically).
        offdiag = self.t_a != self.t_b
        self._od = offdiag
        slot_rows = [self.t_row, self.t_row, self.t_row[offdiag], self.t_row[offdiag], self.lin_row]
        slot_cols = [
            self.t_a,
            self.t_b,
            n + self.t_a[offdiag],
            n + self.t_b[offdiag],
            self.lin_col,
        ]
        self.slot_row = np.concatenate(slot_rows)
        self.slot_col = np.concatenate(slot_cols)
        key = self.slot_row * (2 * n) + self.slot_col
        uniq, inverse = np.unique(key, return_inverse=True)
        self.entry_row = uniq // (2 * n)
        self.entry_col = uniq % (2 * n)
        self.slot_entry = inverse.ravel()

    def subset(self, rows) -> MeasurementModel:
        """Model restricted to ``rows`` of the plan (shares the admittance data)."""
        plan = MeasurementPlan([self.plan.entries[i] for i in rows])
        return MeasurementModel(self.case, plan, self.adm)

    def _terms(self, x_full):
        n = self.n_bus
        v, th = x_full[:n], x_full[n:]
        e = np.exp(1j * (th[self.t_a] - th[self.t_b]))
        return v, e

    def h_full(self, x_full) -> np.ndarray:
        x_full = np.asarray(x_full, dtype=float)
        out = np.zeros(self.k)
        if len(self.t_row):
            v, e = self._terms(x_full)
            val = self.t_c * v[self.t_a] * v[self.t_b] * e
            part = np.where(self.t_imag, val.imag, val.real)
            out += np.bincount(self.t_row, weights=part, minlength=self.k)
        out[self.lin_row] = x_full[self.lin_col]
        return out

    def jacobian_entries(self, x_full) -> np.ndarray:
        """Values for the structural nonzeros ``(entry_row, entry_col)``."""
        x_full = np.asarray(x_full, dtype=float)
        od = self._od
        if len(self.t_row):
            v, e = self._terms(x_full)
            ce = self.t_c * e
            dva = ce * v[self.t_b]
            dvb = ce * v[self.t_a]
            val = ce * v[self.t_a] * v[self.t_b]
            dtha = 1j * val[od]
            slots = np.concatenate([dva, dvb, dtha, -dtha])
            imag = np.concatenate([self.t_imag, self.t_imag, self.t_imag[od], self.t_imag[od]])
            nl = np.where(imag, slots.imag, slots.real)
        else:
            nl = np.zeros(0)
        slot_vals = np.concatenate([nl, np.ones(len(self.lin_row))])
        return np.bincount(self.slot_entry, weights=slot_vals, minlength=len(self.entry_row))

    def jacobian_full(self, x_full) -> sp.csr_matrix:
        vals = self.jacobian_entries(x_full)
        return sp.csr_matrix(
            (vals, (self.entry_row, self.entry_col)), shape=(self.k, 2 * self.n_bus)
        )

    def h(self, x: StateVector) -> np.ndarray:
        return self.h_full(x.full())

    def jacobian(self, x: StateVector) -> sp.csr_matrix:
        cols = reduced_columns(self.n_bus, self.slack_index)
        return self.jacobian_full(x.full())[:, cols].tocsr()


def eval_h(x: StateVector, plan: MeasurementPlan, case: NetworkCase, adm=None) -> np.ndarray:
    return MeasurementModel(case, plan, adm).h(x)


def eval_jacobian(x: StateVector, plan: MeasurementPlan, case: NetworkCase, adm=None):
    """Sparse k x (2N-1) Jacobian with the slack-angle column removed."""
    return MeasurementModel(case, plan, adm).jacobian(x)


def generate_measurements(
    case: NetworkCase,
    truth: StateVector,
    plan: MeasurementPlan,
    seed: int,
    model: MeasurementModel | None = None,
) -> MeasurementSet:
    """Draw ``z = h(truth) + u`` with ``u_i ~ N(0, sigma_i^2)``."""
    model = model if model is not None else MeasurementModel(case, plan)
    rng = np.random.default_rng(seed)
    sigma = plan.sigma
    noise = rng.standard_normal(len(plan))
    z = model.h(truth) + sigma * noise
    return MeasurementSet(plan, z)


def legacy_template(case: NetworkCase, sigma: float = LEGACY_SIGMA) -> MeasurementPlan:
    """P/Q injections everywhere, P/Q from-end flows on every branch, V at the slack.

    Parallel circuits share one flow pair, since flows are measured per bus pair.
    """
    entries = []
    for b in case.buses:
        entries.append(PlanEntry(Kind.P_INJ, b.id, None, sigma, "legacy"))
        entries.append(PlanEntry(Kind.Q_INJ, b.id, None, sigma, "legacy"))
    seen = set()
    for br in case.branches:
        pair = (br.from_bus, br.to_bus)
        if pair in seen or pair[::-1] in seen:
            continue
        seen.add(pair)
        entries.append(PlanEntry(Kind.P_FLOW, br.from_bus, br.to_bus, sigma, "legacy"))
        entries.append(PlanEntry(Kind.Q_FLOW, br.from_bus, br.to_bus, sigma, "legacy"))
    entries.append(PlanEntry(Kind.V_MAG, case.slack_bus, None, sigma, "legacy"))
    return MeasurementPlan(entries)


def pmu_pair(bus: int, sigma: float = PMU_SIGMA) -> list[PlanEntry]:
    return [
        PlanEntry(Kind.PMU_VMAG, bus, None, sigma, "pmu"),
        PlanEntry(Kind.PMU_VANG, bus, None, sigma, "pmu"),
    ]


def pmu_placement(case: NetworkCase, partition: AreaPartition, pmus_per_area: int) -> list[int]:
    buses = []
    for area in partition.areas:
        candidates = [b for b in partition.buses_in(area) if b != case.slack_bus]
        if len(candidates) < pmus_per_area:
            raise ValueError(
                f"area {area} has {len(candidates)} non-slack buses, "
                f"cannot host {pmus_per_area} PMUs"
            )
        buses += candidates[:pmus_per_area]
    return buses


def build_plan_with_pmus(
    case: NetworkCase,
    partition: AreaPartition,
    pmus_per_area: int,
    legacy: MeasurementPlan | None = None,
    pmu_sigma: float = PMU_SIGMA,
) -> MeasurementPlan:
    if pmus_per_area not in (0, 1, 2):
        raise ValueError("pmus_per_area must be 0, 1 or 2")
    legacy = legacy if legacy is not None else legacy_template(case)
    entries = list(legacy.entries)
    for bus in pmu_placement(case, partition, pmus_per_area):
        entries += pmu_pair(bus, pmu_sigma)
    return MeasurementPlan(entries)


def pmu_full_plan(case: NetworkCase, sigma: float = PMU_SIGMA) -> MeasurementPlan:
    entries = []
    for b in case.buses:
        entries += pmu_pair(b.id, sigma)
    return MeasurementPlan(entries)


def parse_plan(text: str) -> MeasurementPlan:
    """Rows ``kind loc1 [loc2] sigma device``."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            kind = Kind(tok[0])
        except ValueError:
            raise CaseFormatError(f"unknown measurement kind {tok[0]!r}", lineno) from None
        want = 5 if kind in FLOW_KINDS else 4
        if len(tok) != want:
            raise CaseFormatError(f"{kind} rows need {want} fields, got {len(tok)}", lineno)
        try:
            loc1 = int(tok[1])
            loc2 = int(tok[2]) if kind in FLOW_KINDS else None
            sigma = float(tok[-2])
            entries.append(PlanEntry(kind, loc1, loc2, sigma, tok[-1]))
        except ValueError as exc:
            raise CaseFormatError(str(exc), lineno) from None
    return MeasurementPlan(entries)


def serialize_plan(plan: MeasurementPlan) -> str:
    rows = []
    for e in plan:
        locs = f"{e.loc1} {e.loc2}" if e.loc2 is not None else f"{e.loc1}"
        rows.append(f"{e.kind} {locs} {e.sigma!r} {e.device}")
    return "\n".join(rows) + "\n"


def measurements_to_csv(meas: MeasurementSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "kind", "loc1", "loc2", "z", "sigma", "device"])
    for i, m in enumerate(meas):
        w.writerow([i, m.kind, m.loc1, "" if m.loc2 is None else m.loc2, repr(m.z), repr(m.sigma), m.device])
    return buf.getvalue()


def measurements_from_csv(text: str) -> MeasurementSet:
    reader = csv.DictReader(io.StringIO(text))
    entries, z, sigma = [], [], []
    for row in reader:
        loc2 = int(row["loc2"]) if row["loc2"] else None
        entries.append(PlanEntry(row["kind"], int(row["loc1"]), loc2, float(row["sigma"]), row["device"]))
        z.append(float(row["z"]))
        sigma.append(float(row["sigma"]))
    return MeasurementSet(MeasurementPlan(entries), z, sigma)
