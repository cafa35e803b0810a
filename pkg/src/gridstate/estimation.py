"""Centralized weighted least-squares estimation and error metrics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ObservabilityError, SingularGainError
from .grid import NetworkCase
from .measurement import (
    MeasurementModel,
    MeasurementPlan,
    MeasurementSet,
    StateVector,
    reduced_columns,
)

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-10
RANK_TOL = 1e-10


@dataclass(frozen=True)
class SEConfig:
    max_iterations: int = 12
    tolerance: float = 1e-8
    start: StateVector | None = None  # None means flat start
    check_observability: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class SEResult:
    estimate: StateVector
    trace: list[StateVector]
    converged: bool
    iterations_used: int


@dataclass
class ObservabilityReport:
    rank: int
    n: int

    @property
    def observable(self) -> bool:
        return self.rank == self.n

    @property
    def nullity(self) -> int:
        return self.n - self.rank


@dataclass
class DistSEResult:
    """Outcome of a distributed solver run; traces are indexed by iteration."""

    estimate: StateVector
    rmse_trace: np.ndarray
    normalized_trace: np.ndarray | None = None
    converged: bool = False
    iterations: int = 0
    comm_log: list[tuple[int, int, int, int]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    residuals: np.ndarray | None = None  # (iterations, 2) primal/dual, ADMM only
    estimates: list[StateVector] | None = None


def numerical_rank(H, tol: float = RANK_TOL) -> int:
    if H.shape[0] == 0 or H.shape[1] == 0:
        return 0
    dense = H.toarray() if sp.issparse(H) else np.asarray(H)
    s = np.linalg.svd(dense, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def check_observability(case: NetworkCase, plan: MeasurementPlan, model=None) -> ObservabilityReport:
    """Numerical rank of the Jacobian at flat start."""
    n = case.n_state
    if len(plan) == 0:
        return ObservabilityReport(0, n)
    model = model if model is not None else MeasurementModel(case, plan)
    H = model.jacobian(StateVector.flat(case))
    return ObservabilityReport(numerical_rank(H), n)


def _solve_gain(G: sp.csc_matrix, rhs: np.ndarray, H_weighted) -> np.ndarray:
    try:
        lu = spla.splu(G, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
    except RuntimeError:
        rank = numerical_rank(H_weighted)
        raise SingularGainError(f"gain matrix is singular (numerical rank {rank})", rank) from None
    d = np.abs(lu.U.diagonal())
    if d.min() < PIVOT_TOL * d.max():
        rank = numerical_rank(H_weighted)
        raise SingularGainError(f"gain matrix is singular (numerical rank {rank})", rank)
    return lu.solve(rhs)


def gauss_newton_solve(
    case: NetworkCase,
    meas: MeasurementSet,
    cfg: SEConfig = SEConfig(),
    model: MeasurementModel | None = None,
) -> SEResult:
    model = model if model is not None else MeasurementModel(case, meas.plan)
    if cfg.check_observability:
        report = check_observability(case, meas.plan, model)
        if not report.observable:
            raise ObservabilityError(
                f"measurement set is unobservable: rank {report.rank} < n = {report.n}",
                report.rank,
                report.n,
            )
    cols = reduced_columns(case.n_bus, case.slack_index)
    x = (cfg.start or StateVector.flat(case)).full()
    w = 1.0 / meas.sigma**2
    W = sp.diags(w)
    sqrtW = sp.diags(np.sqrt(w))
    trace, converged = [], False
    for _ in range(cfg.max_iterations):
        H = model.jacobian_full(x)[:, cols].tocsc()
        r = meas.z - model.h_full(x)
        HtW = H.T @ W
        G = (HtW @ H).tocsc()
        dx = _solve_gain(G, HtW @ r, sqrtW @ H)
        x[cols] += dx
        trace.append(StateVector.from_full(case, x))
        if np.max(np.abs(dx)) < cfg.tolerance:
            converged = True
            break
    if not converged:
        log.info("Gauss-Newton stopped after %d iterations without convergence", len(trace))
    return SEResult(trace[-1], trace, converged, len(trace))


def _check_alignment(a: StateVector, b: StateVector):
    if a.bus_ids != b.bus_ids:
        if sorted(a.bus_ids) == sorted(b.bus_ids):
            raise ValueError("state vectors list the same buses in a different order")
        raise ValueError(f"state dimension mismatch: {a.n_bus} vs {b.n_bus} buses")
    if a.slack_index != b.slack_index:
        raise ValueError("state vectors disagree on the slack bus")


def rmse(estimate: StateVector, truth: StateVector) -> float:
    """Root mean square error over stacked (v, theta), slack angle excluded."""
    _check_alignment(estimate, truth)
    d = estimate.stacked() - truth.stacked()
    return float(np.sqrt(np.mean(d * d)))


def normalized_trace(result, truth: StateVector, baseline_rmse: float) -> np.ndarray:
    if not baseline_rmse > 0:
        raise ValueError("baseline RMSE must be positive")
    trace = result.trace if hasattr(result, "trace") else result
    return np.array([rmse(x, truth) for x in trace]) / baseline_rmse


def trace_to_csv(rmse_values, normalized=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "rmse", "normalized_rmse"])
    for i, r in enumerate(rmse_values, start=1):
        nr = "" if normalized is None else repr(float(normalized[i - 1]))
        w.writerow([i, repr(float(r)), nr])
    return buf.getvalue()
