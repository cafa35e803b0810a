"""Gaussian belief propagation on the measurement factor graph.

Each factor holds one measurement linearised at the current marginal means,
``z_f ~ sum_e a_e x_{v(e)} + N(0, sigma_f^2)``, so messages stay expressed in
state coordinates across relinearisations.  One iteration is a factor-to-variable
half-iteration followed by a variable-to-factor half-iteration; all node updates
inside a half-iteration read only the previous half's messages.

Sums "over all other edges" are formed with prefix/suffix sums over a padded
edge layout, never as total-minus-own, which would cancel catastrophically when a
near-pinned variable (precision 1e12) meets uninformative ones (1e-10).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimation import DistSEResult, rmse
from .grid import AreaPartition, NetworkCase
from .measurement import MeasurementModel, MeasurementSet, StateVector

log = logging.getLogger(__name__)

PRIOR_VARIANCE = 1e10
PIN_VARIANCE = 1e-12
VARIANCE_FLOOR = 1e-15
LINEARIZE_VARIANCE = 1.0
_COEF_EPS = 1e-300


@dataclass(frozen=True)
class BPConfig:
    max_iterations: int = 2025
    damping: float = 0.5
    prior_variance: float = PRIOR_VARIANCE
    relinearize_every: int = 1
    tolerance: float = 1e-10
    oscillation_window: int = 50

    def __post_init__(self):
        if self.max_iterations < 1 or self.relinearize_every < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if not self.prior_variance > 0 or not self.tolerance > 0:
            raise ValueError("prior variance and tolerance must be positive")


@dataclass(frozen=True)
class GaussianMessage:
    mean: float
    variance: float


def _padded(owner: np.ndarray, n_owner: int):
    """Layout mapping each owner row to its edge ids, -1 padded."""
    order = np.argsort(owner, kind="stable")
    counts = np.bincount(owner, minlength=n_owner)
    width = max(int(counts.max()) if len(counts) else 0, 1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(len(owner)) - np.repeat(starts, counts)
    slots = np.full((n_owner, width), -1, dtype=int)
    slots[owner[order], pos] = order
    return slots


def _exclusive_sum(padded: np.ndarray) -> np.ndarray:
    prefix = np.zeros_like(padded)
    suffix = np.zeros_like(padded)
    prefix[:, 1:] = np.cumsum(padded[:, :-1], axis=1)
    suffix[:, :-1] = np.cumsum(padded[:, :0:-1], axis=1)[:, ::-1]
    return prefix + suffix


class FactorGraph:
    """Bipartite graph of measurement factors and state variables.

    Variables are the full state ``[v_0..v_{N-1}, theta_0..theta_{N-1}]``; the
    slack angle gets an extra degree-one pinning factor.
    """

    def __init__(
        self,
        n_var: int,
        edge_factor,
        edge_var,
        z,
        sigma,
        linear_coef=None,
        model: MeasurementModel | None = None,
        prior_mean=None,
        factor_area=None,
        var_area=None,
        case: NetworkCase | None = None,
    ):
        self.n_var = n_var
        self.edge_factor = np.asarray(edge_factor, dtype=int)
        self.edge_var = np.asarray(edge_var, dtype=int)
        self.z = np.asarray(z, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)
        self.n_factor = len(self.z)
        self.model = model
        self.case = case
        self.linear_coef = None if linear_coef is None else np.asarray(linear_coef, dtype=float)
        self.prior_mean = np.zeros(n_var) if prior_mean is None else np.asarray(prior_mean, float)
        self.factor_area = np.ones(self.n_factor, int) if factor_area is None else np.asarray(factor_area)
        self.var_area = np.ones(n_var, int) if var_area is None else np.asarray(var_area)
        self.n_edge = len(self.edge_factor)
        self.factor_slots = _padded(self.edge_factor, self.n_factor)
        self.var_slots = _padded(self.edge_var, n_var)

    @classmethod
    def from_linear(cls, A, z, sigma, prior_mean=None):
        """Graph for the linear model ``z = A x + noise`` (dense A, for tests and tools)."""
        A = np.asarray(A, dtype=float)
        f, v = np.nonzero(A)
        return cls(A.shape[1], f, v, z, sigma, linear_coef=A[f, v], prior_mean=prior_mean)

    @property
    def edges(self):
        return list(zip(self.edge_factor.tolist(), self.edge_var.tolist()))

    def factor_degree(self) -> np.ndarray:
        return np.bincount(self.edge_factor, minlength=self.n_factor)

    def with_measurements(self, z, sigma) -> FactorGraph:
        """Copy with new values/deviations for the measurement factors (pin kept)."""
        k = self.n_factor - (1 if self.model is not None else 0)
        z_new, s_new = self.z.copy(), self.sigma.copy()
        z_new[:k] = z
        s_new[:k] = sigma
        g = object.__new__(FactorGraph)
        g.__dict__.update(self.__dict__)
        g.z, g.sigma = z_new, s_new
        return g

    def cross_edges(self) -> np.ndarray:
        return self.factor_area[self.edge_factor] != self.var_area[self.edge_var]

    def has_cycle(self) -> bool:
        """Union-find over factor and variable nodes."""
        parent = list(range(self.n_var + self.n_factor))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f, v in zip(self.edge_factor, self.edge_var):
            ra, rb = find(self.n_var + int(f)), find(int(v))
            if ra == rb:
                return True
            parent[ra] = rb
        return False

    def dump(self) -> str:
        """Edge list ``factor variable`` for debugging."""
        lines = ["# factor variable"]
        lines += [f"{f} {v}" for f, v in zip(self.edge_factor, self.edge_var)]
        return "\n".join(lines) + "\n"


def build_factor_graph(
    case: NetworkCase,
    meas: MeasurementSet,
    partition: AreaPartition | None = None,
    model: MeasurementModel | None = None,
) -> FactorGraph:
    model = model if model is not None else MeasurementModel(case, meas.plan)
    n = case.n_bus
    pin_factor = model.k
    pin_var = n + case.slack_index
    edge_factor = np.concatenate([model.entry_row, [pin_factor]])
    edge_var = np.concatenate([model.entry_col, [pin_var]])
    z = np.concatenate([meas.z, [0.0]])
    sigma = np.concatenate([meas.sigma, [np.sqrt(PIN_VARIANCE)]])
    prior_mean = np.concatenate([np.ones(n), np.zeros(n)])
    if partition is None:
        partition = AreaPartition.single(case)
    bus_area = np.array([partition.area_of[b] for b in case.bus_ids])
    var_area = np.concatenate([bus_area, bus_area])
    factor_area = np.array(
        [partition.area_of[e.loc1] for e in meas.plan.entries] + [partition.area_of[case.slack_bus]]
    )
    return FactorGraph(
        2 * n,
        edge_factor,
        edge_var,
        z,
        sigma,
        model=model,
        prior_mean=prior_mean,
        factor_area=factor_area,
        var_area=var_area,
        case=case,
    )


class BPMessages:
    """Message state for every edge, in both directions, plus the receivers' views.

    ``*_seen`` arrays hold what the receiving node currently knows; they differ
    from the sender's copy only on area-crossing edges whose updates are
    withheld or in flight.
    """

    def __init__(self, graph: FactorGraph, prior_variance: float = PRIOR_VARIANCE):
        E = graph.n_edge
        self.prior_variance = prior_variance
        self.v2f_mean = graph.prior_mean[graph.edge_var].copy()
        self.v2f_var = np.full(E, prior_variance)
        self.f2v_mean = np.zeros(E)
        self.f2v_var = np.full(E, np.inf)
        self.v2f_mean_seen = self.v2f_mean.copy()
        self.v2f_var_seen = self.v2f_var.copy()
        self.f2v_mean_seen = self.f2v_mean.copy()
        self.f2v_var_seen = self.f2v_var.copy()
        self.marg_mean = graph.prior_mean.copy()
        self.marg_var = np.full(graph.n_var, prior_variance)
        self.floored = 0

    def copy(self) -> BPMessages:
        out = object.__new__(BPMessages)
        out.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return out

    def factor_to_variable(self, edge: int) -> GaussianMessage:
        return GaussianMessage(float(self.f2v_mean[edge]), float(self.f2v_var[edge]))

    def variable_to_factor(self, edge: int) -> GaussianMessage:
        return GaussianMessage(float(self.v2f_mean[edge]), float(self.v2f_var[edge]))


class GaussianBP:
    """Synchronous loopy Gaussian BP with optional withholding of cross-area messages."""

    def __init__(self, graph: FactorGraph, cfg: BPConfig = BPConfig(), messages: BPMessages | None = None):
        self.graph = graph
        self.cfg = cfg
        self.msg = messages if messages is not None else BPMessages(graph, cfg.prior_variance)
        self.cross = graph.cross_edges()
        self.local = ~self.cross
        self.coef = np.zeros(graph.n_edge)
        self.rhs = graph.z.copy()
        self.iteration = 0
        if graph.model is None:
            self.coef = graph.linear_coef.copy()
        else:
            self.linearize(self.msg.marg_mean)

    def set_measurements(self, z, sigma):
        """Replace factor data in place (used when new samples arrive)."""
        k = len(z)
        self.graph.z[:k] = z
        self.graph.sigma[:k] = sigma
        self.linearize(self.msg.marg_mean)

    def linearization_point(self) -> np.ndarray:
        """Marginal means, keeping the previous point for still-uninformed variables."""
        msg = self.msg
        x = np.where(msg.marg_var < LINEARIZE_VARIANCE, msg.marg_mean, self.x_lin)
        n = self.graph.n_var // 2
        x[:n] = np.clip(x[:n], 0.5, 1.5)
        x[n:] = wrap_angle(x[n:])
        return x

    def linearize(self, x_full):
        self.x_lin = np.array(x_full, dtype=float)
        g = self.graph
        if g.model is None:
            self.rhs = g.z.copy()
            return
        m = g.model
        n_model = len(m.entry_row)
        self.coef[:n_model] = m.jacobian_entries(x_full)
        self.coef[n_model:] = 1.0  # pin factor
        h = np.concatenate([m.h_full(x_full), [x_full[g.edge_var[-1]]]])
        ax = np.bincount(g.edge_factor, weights=self.coef * x_full[g.edge_var], minlength=g.n_factor)
        self.rhs = g.z - h + ax

    def factor_to_variable(self):
        g, msg, a = self.graph, self.msg, self.coef
        slots = g.factor_slots
        valid = slots >= 0
        idx = np.where(valid, slots, 0)
        am = np.where(valid, a[idx] * msg.v2f_mean_seen[idx], 0.0)
        avar = np.where(valid, a[idx] ** 2 * msg.v2f_var_seen[idx], 0.0)
        other_am = _exclusive_sum(am)[valid]
        other_var = _exclusive_sum(avar)[valid]
        e = slots[valid]
        fac = g.edge_factor[e]
        ae = a[e]
        informative = np.abs(ae) > _COEF_EPS
        safe = np.where(informative, ae, 1.0)
        mean = np.where(informative, (self.rhs[fac] - other_am) / safe, 0.0)
        var = np.where(informative, (g.sigma[fac] ** 2 + other_var) / safe**2, np.inf)
        low = var < VARIANCE_FLOOR
        if low.any():
            msg.floored += int(low.sum())
            log.debug("floored %d factor-to-variable variances", int(low.sum()))
            var = np.where(low, VARIANCE_FLOOR, var)

        new_mean = np.empty(g.n_edge)
        new_var = np.empty(g.n_edge)
        new_mean[e] = mean
        new_var[e] = var
        alpha = self.cfg.damping
        if alpha > 0:
            old_mean, old_var = msg.f2v_mean, msg.f2v_var
            both = np.isfinite(old_var) & np.isfinite(new_var)
            new_mean = np.where(both, (1 - alpha) * new_mean + alpha * old_mean, new_mean)
            new_var = np.where(both, (1 - alpha) * new_var + alpha * old_var, new_var)
        msg.f2v_mean = new_mean
        msg.f2v_var = new_var
        msg.f2v_mean_seen[self.local] = new_mean[self.local]
        msg.f2v_var_seen[self.local] = new_var[self.local]

    def _variable_sums(self, exclusive: bool):
        g, msg = self.graph, self.msg
        slots = g.var_slots
        valid = slots >= 0
        idx = np.where(valid, slots, 0)
        with np.errstate(divide="ignore"):
            prec = np.where(valid, 1.0 / msg.f2v_var_seen[idx], 0.0)
        pm = np.where(valid & (prec > 0), prec * msg.f2v_mean_seen[idx], 0.0)
        p0 = 1.0 / self.cfg.prior_variance
        if exclusive:
            return slots, valid, _exclusive_sum(prec), _exclusive_sum(pm), p0
        return prec.sum(axis=1), pm.sum(axis=1), p0

    def update_marginals(self):
        g, msg = self.graph, self.msg
        p_sum, pm_sum, p0 = self._variable_sums(exclusive=False)
        total = p0 + p_sum
        msg.marg_var = 1.0 / total
        msg.marg_mean = (p0 * g.prior_mean + pm_sum) / total

    def variable_to_factor(self):
        g, msg = self.graph, self.msg
        slots, valid, other_p, other_pm, p0 = self._variable_sums(exclusive=True)
        e = slots[valid]
        var_of = g.edge_var[e]
        total = p0 + other_p[valid]
        msg.v2f_var[e] = 1.0 / total
        msg.v2f_mean[e] = (p0 * g.prior_mean[var_of] + other_pm[valid]) / total
        msg.v2f_mean_seen[self.local] = msg.v2f_mean[self.local]
        msg.v2f_var_seen[self.local] = msg.v2f_var[self.local]

    def release(self, direction: str = "both", edges=None):
        """Expose the senders' current messages on cross-area edges to their receivers."""
        msg = self.msg
        sel = self.cross if edges is None else edges
        if direction in ("f2v", "both"):
            msg.f2v_mean_seen[sel] = msg.f2v_mean[sel]
            msg.f2v_var_seen[sel] = msg.f2v_var[sel]
        if direction in ("v2f", "both"):
            msg.v2f_mean_seen[sel] = msg.v2f_mean[sel]
            msg.v2f_var_seen[sel] = msg.v2f_var[sel]

    def step(self, release_cross: bool = True, exchange=None) -> np.ndarray:
        """One iteration; returns the new marginal means.

        With ``release_cross`` false, ``exchange(direction)`` (if given) is called
        after each half-iteration to hand cross-area messages to a transport.
        """
        if self.graph.model is not None and self.iteration % self.cfg.relinearize_every == 0:
            self.linearize(self.linearization_point())
        self.iteration += 1
        self.factor_to_variable()
        if release_cross:
            self.release("f2v")
        elif exchange is not None:
            exchange("f2v")
        self.update_marginals()
        self.variable_to_factor()
        if release_cross:
            self.release("v2f")
        elif exchange is not None:
            exchange("v2f")
        return self.msg.marg_mean


def bp_half_iterations(graph: FactorGraph, messages: BPMessages, cfg: BPConfig = BPConfig()) -> BPMessages:
    """One factor->variable then variable->factor sweep on a copy of ``messages``."""
    engine = GaussianBP(graph, cfg, messages.copy())
    engine.step()
    return engine.msg


def wrap_angle(theta):
    """Map angles into (-pi, pi]; h(x) is 2*pi periodic in every bus angle."""
    return np.angle(np.exp(1j * np.asarray(theta)))


def _run(engine: GaussianBP, truth, baseline_rmse, release_rule, keep_estimates=False):
    cfg, g = engine.cfg, engine.graph
    ids = truth.bus_ids if truth is not None else tuple(range(g.n_var // 2))
    slack = truth.slack_index if truth is not None else 0
    rmse_trace, deltas, estimates = [], [], []
    prev = engine.msg.marg_mean.copy()
    prev_var = engine.msg.f2v_var.copy()
    converged, flags = False, []
    W = cfg.oscillation_window
    for it in range(1, cfg.max_iterations + 1):
        mean = engine.step(release_cross=release_rule(it))
        est = StateVector(ids, mean[: len(ids)], wrap_angle(mean[len(ids):]), slack)
        if keep_estimates:
            estimates.append(est)
        if truth is not None:
            rmse_trace.append(rmse(est, truth))
        delta = float(np.max(np.abs(mean - prev)))
        deltas.append(delta)
        prev = mean.copy()
        # Damped variances shrink geometrically from the prior, so marginals can
        # look frozen long before the messages settle; require both.
        var = engine.msg.f2v_var
        with np.errstate(invalid="ignore"):
            var_change = np.abs(var - prev_var) / var
        var_delta = float(np.nanmax(var_change, initial=0.0))
        prev_var = var.copy()
        if delta < cfg.tolerance and var_delta < cfg.tolerance and it > 1:
            converged = True
            break
        if (
            "oscillation" not in flags
            and it > 2 * W
            and deltas[-1] >= deltas[-1 - W]
            and deltas[-1] > cfg.tolerance
        ):
            flags.append("oscillation")
            log.info("BP mean change stopped decreasing at iteration %d", it)
    if engine.msg.floored:
        flags.append("variance_floor")
    rmse_arr = np.array(rmse_trace)
    norm = rmse_arr / baseline_rmse if baseline_rmse and truth is not None else None
    return DistSEResult(
        estimate=est,
        rmse_trace=rmse_arr,
        normalized_trace=norm,
        converged=converged,
        iterations=it,
        flags=flags,
        estimates=estimates if keep_estimates else None,
    )


def bp_solve(
    graph: FactorGraph,
    cfg: BPConfig = BPConfig(),
    truth: StateVector | None = None,
    baseline_rmse: float | None = None,
    keep_estimates: bool = False,
) -> DistSEResult:
    """Synchronous BP-based distributed Gauss-Newton estimate."""
    engine = GaussianBP(graph, cfg)
    return _run(engine, truth, baseline_rmse, lambda it: True, keep_estimates)


def bp_solve_multiarea(
    graph: FactorGraph,
    partition: AreaPartition,
    period: int,
    cfg: BPConfig = BPConfig(),
    truth: StateVector | None = None,
    baseline_rmse: float | None = None,
    keep_estimates: bool = False,
) -> DistSEResult:
    """BP where messages crossing area borders are exchanged only every ``period`` iterations."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if graph.case is not None:
        graph = _retag(graph, partition)
    engine = GaussianBP(graph, cfg)
    return _run(engine, truth, baseline_rmse, lambda it: it % period == 0, keep_estimates)


def _retag(graph: FactorGraph, partition: AreaPartition) -> FactorGraph:
    case = graph.case
    bus_area = np.array([partition.area_of[b] for b in case.bus_ids])
    plan = graph.model.plan
    owner = [partition.area_of[e.loc1] for e in plan.entries] + [partition.area_of[case.slack_bus]]
    g = object.__new__(FactorGraph)
    g.__dict__.update(graph.__dict__)
    g.var_area = np.concatenate([bus_area, bus_area])
    g.factor_area = np.array(owner)
    return g


def iterations_to(trace, threshold: float) -> int | None:
    """First 1-based iteration from which ``trace`` stays at or below ``threshold``."""
    trace = np.asarray(trace)
    above = np.flatnonzero(trace > threshold)
    if len(above) == 0:
        return 1 if len(trace) else None
    last = above[-1]
    return None if last == len(trace) - 1 else int(last) + 2


__all__ = [
    "BPConfig",
    "BPMessages",
    "FactorGraph",
    "GaussianBP",
    "GaussianMessage",
    "bp_half_iterations",
    "bp_solve",
    "bp_solve_multiarea",
    "build_factor_graph",
    "iterations_to",
    "wrap_angle",
]
