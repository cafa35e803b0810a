"""Multi-area state estimation by consensus ADMM with successive linearization.

Every area keeps a local copy of the states its measurements touch.  States held
by more than one area (tie-line endpoints and the neighbours of boundary
injections) are consensus components.  One iteration is an x-update (Gauss-Newton
steps on the area's augmented cost), a z-update (average of ``x + lambda/rho``
over the copies) and a dual update.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import DecompositionError, SingularGainError
from .estimation import DistSEResult, numerical_rank, rmse
from .grid import AreaPartition, NetworkCase
from .measurement import FLOW_KINDS, Kind, MeasurementModel, MeasurementSet, StateVector

log = logging.getLogger(__name__)

WEAK_PRIOR_SIGMA = 1e3
BYTES_PER_VALUE = 8

# (iteration, from_area, to_area) -> delivered?
Channel = Callable[[int, int, int], bool]


@dataclass(frozen=True)
class ADMMConfig:
    rho: float = 1.0
    max_iterations: int = 3500
    primal_tol: float = 1e-6
    dual_tol: float = 1e-6
    inner_steps: int = 1
    sca_relinearize_every: int = 1
    divergence_factor: float = 10.0
    divergence_window: int = 50
    log_communication: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if min(self.max_iterations, self.inner_steps, self.sca_relinearize_every) < 1:
            raise ValueError("iteration counts must be >= 1")
        if not (self.primal_tol > 0 and self.dual_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class AreaSubproblem:
    area: int
    interior: list[int]
    local_buses: list[int]
    rows: np.ndarray  # measurement indices owned by this area
    meas: MeasurementSet
    model: MeasurementModel
    cols: np.ndarray  # global full-state index of each local variable
    shared: np.ndarray  # bool per local variable
    x: np.ndarray
    prior_weight: np.ndarray
    prior_mean: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def n_local(self) -> int:
        return len(self.cols)


@dataclass
class ConsensusState:
    """Copies of the shared components, ordered by (component, area)."""

    components: np.ndarray  # global full-state index per component
    copy_area: np.ndarray
    copy_comp: np.ndarray  # component position per copy
    x: np.ndarray
    lam: np.ndarray
    zbar: np.ndarray
    zbar_prev: np.ndarray
    rho: float

    def copies_of(self, component: int):
        idx = np.flatnonzero(self.copy_comp == component)
        return [(int(self.copy_area[i]), float(self.x[i]), float(self.lam[i])) for i in idx]


def primal_dual_residuals(state: ConsensusState) -> tuple[float, float]:
    if len(state.x) == 0:
        return 0.0, 0.0
    primal = float(np.linalg.norm(state.x - state.zbar[state.copy_comp]))
    dual = float(state.rho * np.linalg.norm(state.zbar - state.zbar_prev))
    return primal, dual


def _measurement_buses(entry) -> list[int]:
    return [entry.loc1, entry.loc2] if entry.kind in FLOW_KINDS else [entry.loc1]


def decompose(
    case: NetworkCase,
    partition: AreaPartition,
    meas: MeasurementSet,
    model: MeasurementModel | None = None,
    start: StateVector | None = None,
) -> list[AreaSubproblem]:
    """Split the global problem into one subproblem per area."""
    model = model if model is not None else MeasurementModel(case, meas.plan)
    area_of = partition.area_of
    neighbors = case.neighbors()
    adjacent = {a: {a} for a in partition.areas}
    for br in case.branches:
        a, b = area_of[br.from_bus], area_of[br.to_bus]
        adjacent[a].add(b)
        adjacent[b].add(a)

    owner = np.array([area_of[e.loc1] for e in meas.plan.entries], dtype=int)
    local = {a: set(partition.buses_in(a)) for a in partition.areas}
    for a in partition.areas:
        for b in partition.buses_in(a):
            local[a] |= neighbors[b]  # tie-line endpoints on both sides
    for m, e in enumerate(meas.plan.entries):
        a = owner[m]
        args = set(_measurement_buses(e))
        if e.kind in (Kind.P_INJ, Kind.Q_INJ):
            args |= neighbors[e.loc1]
        for b in args:
            if area_of[b] not in adjacent[a]:
                raise DecompositionError(
                    f"measurement {m} ({e.kind} at {e.loc1}) reaches area {area_of[b]}, "
                    f"which is not adjacent to owner area {a}"
                )
        local[a] |= args

    n = case.n_bus
    x0 = (start or StateVector.flat(case)).full()
    cols_of = {}
    for a in partition.areas:
        buses = sorted(local[a], key=case.index.__getitem__)
        idx = np.array([case.index[b] for b in buses], dtype=int)
        th = n + idx[idx != case.slack_index]
        cols_of[a] = (buses, np.concatenate([idx, th]))
    holders = np.zeros(2 * n, dtype=int)
    for _, cols in cols_of.values():
        holders[cols] += 1

    subs = []
    for a in partition.areas:
        buses, cols = cols_of[a]
        rows = np.flatnonzero(owner == a)
        sub_model = model.subset(rows)
        shared = holders[cols] > 1
        sub = AreaSubproblem(
            area=a,
            interior=partition.buses_in(a),
            local_buses=buses,
            rows=rows,
            meas=meas.subset(rows),
            model=sub_model,
            cols=cols,
            shared=shared,
            x=x0[cols].copy(),
            prior_weight=np.zeros(len(cols)),
            prior_mean=x0[cols].copy(),
        )
        _check_local_observability(sub, x0)
        subs.append(sub)
    return subs


def _local_jacobian(sub: AreaSubproblem, x_full: np.ndarray) -> np.ndarray:
    m = sub.model
    pos = np.full(2 * m.n_bus, -1, dtype=int)
    pos[sub.cols] = np.arange(sub.n_local)
    H = np.zeros((m.k, sub.n_local))
    vals = m.jacobian_entries(x_full)
    keep = pos[m.entry_col] >= 0  # drops the pinned slack angle
    H[m.entry_row[keep], pos[m.entry_col[keep]]] = vals[keep]
    return H


def _check_local_observability(sub: AreaSubproblem, x0: np.ndarray):
    """Add a weak prior on interior states when the area alone cannot pin them."""
    H = _local_jacobian(sub, x0) / sub.meas.sigma[:, None] if sub.meas.k else np.zeros((0, sub.n_local))
    A = np.vstack([H, np.diag(sub.shared.astype(float))])
    if numerical_rank(A) < sub.n_local:
        sub.prior_weight = np.where(sub.shared, 0.0, 1.0 / WEAK_PRIOR_SIGMA**2)
        sub.flags.append("local_unobservable")
        log.info("area %d is locally unobservable; weak prior added", sub.area)


def build_consensus(subs: list[AreaSubproblem], rho: float) -> tuple[ConsensusState, list[np.ndarray]]:
    """Consensus registry and, per subproblem, the copy index of each shared local variable."""
    entries = []  # (component col, area, sub position, local position)
    for s_pos, sub in enumerate(subs):
        for l_pos in np.flatnonzero(sub.shared):
            entries.append((int(sub.cols[l_pos]), sub.area, s_pos, int(l_pos)))
    entries.sort()
    comps = np.array(sorted({e[0] for e in entries}), dtype=int)
    comp_pos = {c: i for i, c in enumerate(comps)}
    copy_area = np.array([e[1] for e in entries], dtype=int)
    copy_comp = np.array([comp_pos[e[0]] for e in entries], dtype=int)
    x = np.array([subs[e[2]].x[e[3]] for e in entries], dtype=float)
    copy_index = [np.full(sub.n_local, -1, dtype=int) for sub in subs]
    for i, e in enumerate(entries):
        copy_index[e[2]][e[3]] = i
    count = np.bincount(copy_comp, minlength=len(comps))
    zbar = np.bincount(copy_comp, weights=x, minlength=len(comps)) / np.maximum(count, 1)
    state = ConsensusState(comps, copy_area, copy_comp, x, np.zeros(len(x)), zbar, zbar.copy(), rho)
    return state, copy_index


class _Views:
    """What each copy's area knows of the other copies of the same component."""

    def __init__(self, state: ConsensusState):
        src, dst = [], []
        for c in range(len(state.components)):
            idx = np.flatnonzero(state.copy_comp == c)
            for i in idx:
                for j in idx:
                    if i != j:
                        src.append(i)
                        dst.append(j)
        self.src = np.array(src, dtype=int)
        self.dst = np.array(dst, dtype=int)
        self.received = state.x[self.src].copy()
        self.count = np.bincount(state.copy_comp, minlength=len(state.components))
        pairs = sorted({(int(state.copy_area[s]), int(state.copy_area[d])) for s, d in zip(self.src, self.dst)})
        self.pairs = pairs
        self.pair_of = {p: k for k, p in enumerate(pairs)}
        self.edge_pair = np.array(
            [self.pair_of[(int(state.copy_area[s]), int(state.copy_area[d]))] for s, d in zip(self.src, self.dst)],
            dtype=int,
        )
        self.pair_values = np.bincount(self.edge_pair, minlength=len(pairs)) if len(pairs) else np.zeros(0, int)

    def zbar(self, state: ConsensusState, u: np.ndarray, delivered: np.ndarray | None) -> np.ndarray:
        if delivered is None:
            self.received = u[self.src]
        else:
            mask = delivered[self.edge_pair]
            self.received[mask] = u[self.src[mask]]
        others = np.bincount(self.dst, weights=self.received, minlength=len(u))
        return (u + others) / self.count[state.copy_comp]


def _owned_positions(case: NetworkCase, sub: AreaSubproblem) -> np.ndarray:
    own = np.zeros(case.n_bus, dtype=bool)
    own[[case.index[b] for b in sub.interior]] = True
    return np.flatnonzero(own[sub.cols % case.n_bus])


def _assemble(case: NetworkCase, subs: list[AreaSubproblem], owned: list[np.ndarray]) -> StateVector:
    """Global estimate from each bus's owner area."""
    x = np.zeros(2 * case.n_bus)
    for sub, pos in zip(subs, owned):
        x[sub.cols[pos]] = sub.x[pos]
    return StateVector.from_full(case, x)


def _x_update(sub, x_full, target, lam_local, rho, cfg, iteration, cache):
    """Gauss-Newton steps on f_a(x) + lam.(x - zbar) + rho/2 |x - zbar|^2 over shared entries."""
    s = sub.shared.astype(float)
    w = 1.0 / sub.meas.sigma**2
    max_step = 0.0
    for _ in range(cfg.inner_steps):
        x_full[sub.cols] = sub.x
        if iteration % cfg.sca_relinearize_every == 0 or "H" not in cache:
            cache["H"] = _local_jacobian(sub, x_full)
            cache["h0"] = sub.model.h_full(x_full)
            cache["x0"] = sub.x.copy()
        H = cache["H"]
        r = sub.meas.z - cache["h0"] - H @ (sub.x - cache["x0"])
        HtW = H.T * w
        G = HtW @ H + np.diag(rho * s + sub.prior_weight)
        g = HtW @ r - s * (lam_local + rho * (sub.x - target)) - sub.prior_weight * (sub.x - sub.prior_mean)
        try:
            dx = sla.cho_solve(sla.cho_factor(G), g)
        except np.linalg.LinAlgError:
            rank = numerical_rank(G)
            raise SingularGainError(f"area {sub.area} gain matrix is singular (rank {rank})", rank) from None
        sub.x = sub.x + dx
        max_step = max(max_step, float(np.max(np.abs(dx))) if len(dx) else 0.0)
    return max_step


def admm_solve(
    case: NetworkCase,
    subs: list[AreaSubproblem],
    cfg: ADMMConfig = ADMMConfig(),
    truth: StateVector | None = None,
    baseline_rmse: float | None = None,
    channel: Channel | None = None,
    keep_estimates: bool = False,
) -> DistSEResult:
    """Consensus ADMM; ``channel`` decides per iteration whether an area-to-area packet arrives."""
    rho = cfg.rho
    subs = sorted(subs, key=lambda s: s.area)
    state, copy_index = build_consensus(subs, rho)
    views = _Views(state)
    target = state.zbar[state.copy_comp].copy()  # each copy's view of zbar
    caches = [{} for _ in subs]
    owned = [_owned_positions(case, sub) for sub in subs]
    scratch = np.zeros(2 * case.n_bus)
    flags = sorted({f for s in subs for f in s.flags})
    rmse_trace, residuals, comm_log, estimates = [], [], [], []
    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        step = 0.0
        for k, sub in enumerate(subs):
            ci = copy_index[k]
            sel = ci >= 0
            tgt = np.zeros(sub.n_local)
            lam = np.zeros(sub.n_local)
            tgt[sel] = target[ci[sel]]
            lam[sel] = state.lam[ci[sel]]
            step = max(step, _x_update(sub, scratch, tgt, lam, rho, cfg, it - 1, caches[k]))
            state.x[ci[sel]] = sub.x[sel]

        u = state.x + state.lam / rho
        delivered = None
        if channel is not None and views.pairs:
            delivered = np.array([bool(channel(it, a, b)) for a, b in views.pairs])
        if cfg.log_communication:
            for p, (a, b) in enumerate(views.pairs):
                if delivered is None or delivered[p]:
                    comm_log.append((it, a, b, int(views.pair_values[p]) * BYTES_PER_VALUE))
        target = views.zbar(state, u, delivered) if len(u) else target
        state.lam = state.lam + rho * (state.x - target)
        state.zbar_prev = state.zbar
        count = np.maximum(views.count, 1)
        state.zbar = np.bincount(state.copy_comp, weights=target, minlength=len(state.components)) / count
        primal, dual = primal_dual_residuals(state)
        residuals.append((primal, dual))
        history.append(primal)

        est = _assemble(case, subs, owned)
        if keep_estimates:
            estimates.append(est)
        if truth is not None:
            rmse_trace.append(rmse(est, truth))
        if not np.all(np.isfinite(est.v)) or not np.all(np.isfinite(est.theta)):
            flags.append("divergence")
            log.warning("ADMM produced non-finite iterates at iteration %d", it)
            break
        W = cfg.divergence_window
        if (
            it > 2 * W
            and primal > cfg.primal_tol
            and primal > cfg.divergence_factor * history[-1 - W]
        ):
            flags.append("divergence")
            log.warning("ADMM primal residual grew %.0fx over %d iterations", cfg.divergence_factor, W)
            break
        if primal < cfg.primal_tol and dual < cfg.dual_tol and step < cfg.primal_tol:
            converged = True
            break

    rmse_arr = np.array(rmse_trace)
    norm = rmse_arr / baseline_rmse if baseline_rmse and truth is not None else None
    return DistSEResult(
        estimate=est,
        rmse_trace=rmse_arr,
        normalized_trace=norm,
        converged=converged,
        iterations=it,
        comm_log=comm_log,
        flags=flags,
        residuals=np.array(residuals).reshape(-1, 2),
        estimates=estimates if keep_estimates else None,
    )


def admm_trace_to_csv(result: DistSEResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "primal_residual", "dual_residual", "rmse", "normalized_rmse"])
    for i, (p, d) in enumerate(result.residuals, start=1):
        r = repr(float(result.rmse_trace[i - 1])) if len(result.rmse_trace) >= i else ""
        nr = repr(float(result.normalized_trace[i - 1])) if result.normalized_trace is not None else ""
        w.writerow([i, repr(float(p)), repr(float(d)), r, nr])
    return buf.getvalue()


def comm_log_to_csv(result: DistSEResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "from_area", "to_area", "bytes_estimate"])
    w.writerows(result.comm_log)
    return buf.getvalue()
