"""Link models for 4G/5G transport, pseudo-measurement substitution and the
timed tracking simulation.

Virtual time is kept in integer ticks of 0.1 ms so that event ordering never
depends on floating-point rounding.
"""

from __future__ import annotations

import configparser
import csv
import heapq
import io
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .admm import ADMMConfig, admm_solve, decompose
from .bp import BPConfig, GaussianBP, build_factor_graph
from .errors import ConfigError, ObservabilityError
from .estimation import SEConfig, check_observability, gauss_newton_solve, rmse
from .grid import AreaPartition, NetworkCase, load_case, load_partition, resolve_path
from .measurement import (
    PMU_KINDS,
    MeasurementModel,
    MeasurementPlan,
    MeasurementSet,
    StateVector,
    generate_measurements,
    pmu_full_plan,
)

log = logging.getLogger(__name__)

TICKS_PER_MS = 10
SUBSTITUTES = ("last-known", "prior-mean", "forecast")


def to_ticks(ms: float) -> int:
    return int(round(ms * TICKS_PER_MS))


@dataclass(frozen=True)
class LinkProfile:
    name: str
    latency_ms: float | tuple[float, float]
    plr: float = 0.0

    def __post_init__(self):
        lo, hi = self.latency_range
        if lo < 0 or hi < lo:
            raise ValueError(f"link {self.name}: invalid latency {self.latency_ms}")
        if not 0.0 <= self.plr <= 1.0:
            raise ValueError(f"link {self.name}: plr must lie in [0, 1]")

    @property
    def latency_range(self) -> tuple[float, float]:
        if isinstance(self.latency_ms, tuple):
            return float(self.latency_ms[0]), float(self.latency_ms[1])
        return float(self.latency_ms), float(self.latency_ms)

    def sample_latency(self, rng: np.random.Generator) -> float:
        lo, hi = self.latency_range
        return lo if lo == hi else float(rng.uniform(lo, hi))

    def dropped(self, rng: np.random.Generator) -> bool:
        return self.plr > 0 and rng.random() < self.plr


def preset_profiles() -> dict[str, LinkProfile]:
    presets = [
        LinkProfile("urllc", 1.0, 1e-5),
        LinkProfile("lte_no_harq", (15.0, 20.0), 1e-1),
        LinkProfile("lte_harq_rlc", (40.0, 60.0), 1e-5),
        LinkProfile("x2", 1.0, 0.0),
        LinkProfile("core", 10.0, 0.0),
        LinkProfile("external", 20.0, 0.0),
        LinkProfile("urllc_meas", 2.0, 1e-5),
        LinkProfile("ideal", 0.0, 0.0),
    ]
    return {p.name: p for p in presets}


@dataclass(frozen=True)
class PseudoMeasurementPolicy:
    """How a lost measurement is replaced.

    ``last-known`` reuses the last delivered value (flat-start prediction before
    any delivery), ``prior-mean`` always uses the flat-start prediction and
    ``forecast`` draws from N(h(x_true), sigma_pm^2), an unbiased forecast with
    the inflated deviation.
    """

    sigma_pm: float
    substitute: str = "last-known"

    def __post_init__(self):
        if not self.sigma_pm > 0:
            raise ValueError("sigma_pm must be positive")
        if self.substitute not in SUBSTITUTES:
            raise ValueError(f"substitute must be one of {SUBSTITUTES}")

    def check(self, sigma: np.ndarray):
        if len(sigma) and not self.sigma_pm > float(np.max(sigma)):
            raise ValueError("sigma_pm must exceed the deviation of the measurements it replaces")


def apply_packet_loss(
    meas: MeasurementSet,
    plr: float,
    policy: PseudoMeasurementPolicy,
    seed,
    model: MeasurementModel | None = None,
    truth: StateVector | None = None,
    last_known: np.ndarray | None = None,
) -> tuple[MeasurementSet, int]:
    """Drop each measurement with probability ``plr`` and substitute pseudo-measurements.

    The same seed gives the same loss pattern for every ``plr`` (a loss happens
    when a per-measurement uniform falls below ``plr``) and the same forecast
    noise for every ``sigma_pm``.
    """
    if not 0.0 <= plr <= 1.0:
        raise ValueError("plr must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.random(meas.k)
    xi = rng.standard_normal(meas.k)
    lost = u < plr
    n_lost = int(lost.sum())
    if n_lost == 0:
        return meas, 0
    policy.check(meas.sigma[lost])
    if policy.substitute == "forecast":
        if model is None or truth is None:
            raise ValueError("forecast substitution needs the model and the true state")
        value = model.h(truth) + policy.sigma_pm * xi
    else:
        if model is None:
            raise ValueError("substitution needs the measurement model")
        value = model.h_full(StateVector.flat(model.case).full())
        if policy.substitute == "last-known" and last_known is not None:
            value = np.where(np.isnan(last_known), value, last_known)
    z = np.where(lost, value, meas.z)
    sigma = np.where(lost, policy.sigma_pm, meas.sigma)
    return meas.with_values(z=z, sigma=sigma), n_lost


@dataclass
class SweepCell:
    plr: float
    sigma_pm: float
    solver: str
    rmse: np.ndarray  # one value per trial

    @property
    def mean(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def stderr(self) -> float:
        n = len(self.rmse)
        return float(np.std(self.rmse, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def trial_seed(seed: int, trial: int, stream: int = 0) -> int:
    """Independent per-trial integer seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, trial, stream]).generate_state(1)[0])


def _plr_trial(args):
    case, partition, plan, plrs, sigma_pms, substitute, solvers, seed, trial, se_cfg, admm_cfg = args
    model = MeasurementModel(case, plan)
    truth = case.truth()
    meas = generate_measurements(case, truth, plan, trial_seed(seed, trial, 0), model)
    loss_seed = trial_seed(seed, trial, 1)
    out = {}
    for plr in plrs:
        for spm in sigma_pms:
            policy = PseudoMeasurementPolicy(spm, substitute)
            lossy, _ = apply_packet_loss(meas, plr, policy, loss_seed, model, truth)
            for solver in solvers:
                if solver == "gn":
                    est = gauss_newton_solve(case, lossy, se_cfg, model).estimate
                else:
                    subs = decompose(case, partition, lossy, model)
                    est = admm_solve(case, subs, admm_cfg).estimate
                out[(plr, spm, solver)] = rmse(est, truth)
    return out


def run_plr_sweep(
    case: NetworkCase,
    plan: MeasurementPlan,
    plrs,
    sigma_pms,
    trials: int,
    seed: int,
    partition: AreaPartition | None = None,
    substitute: str = "forecast",
    solvers=("gn", "admm"),
    se_cfg: SEConfig = SEConfig(),
    admm_cfg: ADMMConfig = ADMMConfig(log_communication=False),
    executor=None,
) -> list[SweepCell]:
    """Mean RMSE for every (plr, sigma_pm, solver) cell over seeded trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = check_observability(case, plan)
    if not report.observable:
        raise ObservabilityError(
            f"plan is unobservable: rank {report.rank} < n = {report.n}", report.rank, report.n
        )
    partition = partition or AreaPartition.single(case)
    jobs = [
        (case, partition, plan, list(plrs), list(sigma_pms), substitute, list(solvers), seed, t, se_cfg, admm_cfg)
        for t in range(trials)
    ]
    results = list(executor.map(_plr_trial, jobs)) if executor else [_plr_trial(j) for j in jobs]
    cells = []
    for plr in plrs:
        for spm in sigma_pms:
            for solver in solvers:
                vals = np.array([r[(plr, spm, solver)] for r in results])
                cells.append(SweepCell(plr, spm, solver, vals))
    return cells


def sweep_to_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["plr", "sigma_pm", "solver", "mean_rmse"])
    for c in cells:
        w.writerow([repr(c.plr), repr(c.sigma_pm), c.solver, repr(c.mean)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# timed tracking scenario


@dataclass
class TimedScenario:
    case: NetworkCase
    plan: MeasurementPlan
    timeline: list[tuple[float, StateVector]]
    device_link: LinkProfile
    inter_area_link: LinkProfile = field(default_factory=lambda: preset_profiles()["ideal"])
    central_links: tuple[LinkProfile, ...] = ()
    estimator: str = "bp-distributed"
    partition: AreaPartition | None = None
    pmu_period_ms: float = 10.0
    iteration_cost_ms: float = 0.1
    duration_ms: float = 60.0
    warmup_ms: float = 0.0  # simulated time before t = 0; outputs start at t = 0
    seed: int = 0
    noise_scale: float = 1.0
    bp: BPConfig = BPConfig()
    policy: PseudoMeasurementPolicy = PseudoMeasurementPolicy(1e-2)
    buses: tuple[int, ...] | None = None  # buses written to the time series (None: all)

    def __post_init__(self):
        times = [t for t, _ in self.timeline]
        if not times or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timeline times must be strictly increasing")
        if min(times) < 0:
            raise ValueError("timeline times must be non-negative")
        if not (self.pmu_period_ms > 0 and self.iteration_cost_ms > 0 and self.duration_ms > 0):
            raise ValueError("periods and duration must be positive")
        if self.warmup_ms < 0:
            raise ValueError("warmup must be non-negative")
        if to_ticks(self.iteration_cost_ms) < 1 or to_ticks(self.pmu_period_ms) < 1:
            raise ValueError("periods must be at least one 0.1 ms tick")
        if self.estimator not in ("bp-distributed", "bp-centralized"):
            raise ValueError("estimator must be bp-distributed or bp-centralized")
        if any(e.kind not in PMU_KINDS for e in self.plan.entries):
            raise ValueError("timed scenarios take PMU-only plans")

    def truth_at(self, t_ms: float) -> StateVector:
        current = self.timeline[0][1]
        for t, x in self.timeline:
            if t <= t_ms:
                current = x
        return current


@dataclass
class TimedOutput:
    t_ms: float
    estimate: StateVector
    truth: StateVector
    newest_sample_ms: float  # provenance: latest sample time that reached the estimator


@dataclass
class TimedResult:
    outputs: list[TimedOutput]
    events: list[tuple]  # (tick, kind, detail) trace
    substituted: int


# event priorities inside one tick
STATE, SAMPLE, MEAS, MSG, ITERATE = range(5)


class _Transport:
    """Cross-area BP messages with per-area-pair latency."""

    def __init__(self, engine: GaussianBP, link: LinkProfile, rng, push):
        self.engine = engine
        self.link = link
        self.rng = rng
        self.push = push
        g = engine.graph
        self.cross = np.flatnonzero(engine.cross)
        fa = g.factor_area[g.edge_factor[self.cross]]
        va = g.var_area[g.edge_var[self.cross]]
        self.f2v_pair = list(zip(fa.tolist(), va.tolist()))
        self.v2f_pair = list(zip(va.tolist(), fa.tolist()))
        self.stamp = {"f2v": np.full(len(self.cross), -1), "v2f": np.full(len(self.cross), -1)}
        self.now = 0

    def __call__(self, direction: str):
        msg = self.engine.msg
        mean = getattr(msg, f"{direction}_mean")[self.cross].copy()
        var = getattr(msg, f"{direction}_var")[self.cross].copy()
        pairs = self.f2v_pair if direction == "f2v" else self.v2f_pair
        groups: dict[tuple[int, int], list[int]] = {}
        for i, p in enumerate(pairs):
            groups.setdefault(p, []).append(i)
        for pair in sorted(groups):
            idx = np.array(groups[pair])
            if self.link.dropped(self.rng):
                continue
            delay = to_ticks(self.link.sample_latency(self.rng))
            payload = (direction, idx, mean[idx], var[idx], self.now)
            if delay == 0:
                self.deliver(payload)
            else:
                self.push(self.now + delay, MSG, payload)

    def deliver(self, payload):
        direction, idx, mean, var, sent = payload
        newer = sent >= self.stamp[direction][idx]
        idx, mean, var = idx[newer], mean[newer], var[newer]
        edges = self.cross[idx]
        msg = self.engine.msg
        getattr(msg, f"{direction}_mean_seen")[edges] = mean
        getattr(msg, f"{direction}_var_seen")[edges] = var
        self.stamp[direction][idx] = sent


def run_timed_scenario(s: TimedScenario) -> TimedResult:
    """Discrete-event simulation of PMU sampling, transport and continuous BP."""
    case = s.case
    model = MeasurementModel(case, s.plan)
    rng = np.random.default_rng(s.seed)
    link_rng = np.random.default_rng(trial_seed(s.seed, 0, 7))
    centralized = s.estimator == "bp-centralized"
    partition = AreaPartition.single(case) if centralized or s.partition is None else s.partition
    route = (s.device_link, *s.central_links) if centralized else (s.device_link,)

    flat_h = model.h_full(StateVector.flat(case).full())
    placeholder = MeasurementSet(s.plan, flat_h, np.full(model.k, s.policy.sigma_pm))
    graph = build_factor_graph(case, placeholder, partition, model)
    engine = GaussianBP(graph, s.bp)
    z = flat_h.copy()
    sigma = np.full(model.k, s.policy.sigma_pm)
    last_known = np.full(model.k, np.nan)
    sample_of = np.full(model.k, -np.inf)  # sample time of the value each factor holds
    engine.set_measurements(z, sigma)

    queue: list = []
    counter = itertools.count()

    def push(tick, prio, payload):
        heapq.heappush(queue, (tick, prio, next(counter), payload))

    transport = _Transport(engine, s.inter_area_link, link_rng, push)
    end = to_ticks(s.duration_ms)
    start = -to_ticks(s.warmup_ms)
    for t, x in s.timeline:
        push(to_ticks(t), STATE, x)
    period = to_ticks(s.pmu_period_ms)
    first_sample = -(-start // period) * period
    for tick in range(first_sample, end + 1, period):
        push(tick, SAMPLE, None)
    push(start + to_ticks(s.iteration_cost_ms), ITERATE, None)

    truth = s.timeline[0][1]
    outputs, events = [], []
    substituted = 0
    dirty = False
    while queue:
        tick, prio, _, payload = heapq.heappop(queue)
        if tick > end:
            break
        transport.now = tick
        if prio == STATE:
            truth = payload
            events.append((tick, "state", ""))
        elif prio == SAMPLE:
            noise = rng.standard_normal(model.k) * s.plan.sigma * s.noise_scale
            values = model.h(truth) + noise
            for m in range(model.k):
                lost = False
                delay = 0
                for link in route:
                    lost = lost or link.dropped(link_rng)
                    delay += to_ticks(link.sample_latency(link_rng))
                push(tick + delay, MEAS, (m, tick, None if lost else float(values[m])))
            events.append((tick, "sample", ""))
        elif prio == MEAS:
            m, sampled, value = payload
            if sampled < sample_of[m]:
                continue  # overtaken by a newer sample
            sample_of[m] = sampled
            if value is None:
                substituted += 1
                if s.policy.substitute == "last-known" and not np.isnan(last_known[m]):
                    z[m] = last_known[m]
                elif s.policy.substitute == "forecast":
                    z[m] = model.h(truth)[m] + s.policy.sigma_pm * rng.standard_normal()
                else:
                    z[m] = flat_h[m]
                sigma[m] = s.policy.sigma_pm
                events.append((tick, "lost", f"{m}@{sampled}"))
            else:
                z[m] = value
                sigma[m] = s.plan.entries[m].sigma
                last_known[m] = value
            dirty = True
        elif prio == MSG:
            transport.deliver(payload)
        else:
            if dirty:
                engine.set_measurements(z, sigma)
                dirty = False
            mean = engine.step(release_cross=centralized, exchange=None if centralized else transport)
            n = case.n_bus
            est = StateVector(case.bus_ids, mean[:n].copy(), mean[n:].copy(), case.slack_index)
            newest = float(np.max(sample_of)) / TICKS_PER_MS if np.isfinite(sample_of).any() else -np.inf
            if tick >= 0:
                outputs.append(TimedOutput(tick / TICKS_PER_MS, est, truth, newest))
            push(tick + to_ticks(s.iteration_cost_ms), ITERATE, None)
    return TimedResult(outputs, events, substituted)


def timed_to_csv(result: TimedResult, buses=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_ms", "bus", "v_est", "v_true"])
    for out in result.outputs:
        ids = out.estimate.bus_ids
        for i, b in enumerate(ids):
            if buses is None or b in buses:
                w.writerow([f"{out.t_ms:.1f}", b, repr(float(out.estimate.v[i])), repr(float(out.truth.v[i]))])
    return buf.getvalue()


def settle_time(result: TimedResult, bus: int, t_step_ms: float, threshold: float) -> float | None:
    """Time after ``t_step_ms`` from which every output keeps |v_est - v_true| < threshold."""
    outs = [o for o in result.outputs if o.t_ms >= t_step_ms]
    if not outs:
        return None
    i = outs[0].estimate.bus_ids.index(bus)
    ok = [abs(o.estimate.v[i] - o.truth.v[i]) < threshold for o in outs]
    if not ok[-1]:
        return None
    k = len(ok)
    while k > 0 and ok[k - 1]:
        k -= 1
    return round(outs[k].t_ms - t_step_ms, 1)


def first_response(result: TimedResult, bus: int, t_step_ms: float, before: float) -> float | None:
    """Time after the step until the estimate has covered half the jump from ``before``."""
    for o in result.outputs:
        if o.t_ms < t_step_ms:
            continue
        i = o.estimate.bus_ids.index(bus)
        if abs(o.estimate.v[i] - o.truth.v[i]) < 0.5 * abs(before - o.truth.v[i]):
            return round(o.t_ms - t_step_ms, 1)
    return None


# --------------------------------------------------------------------------
# scenario files


def _link(cp: configparser.ConfigParser, name: str, presets) -> LinkProfile:
    name = name.strip()
    section = f"link.{name}"
    if cp.has_section(section):
        sec = cp[section]
        lat = sec.get("latency_ms", "0")
        if "-" in lat.strip()[1:]:
            lo, hi = lat.split("-", 1)
            latency = (float(lo), float(hi))
        else:
            latency = float(lat)
        return LinkProfile(name, latency, sec.getfloat("plr", 0.0))
    if name not in presets:
        raise ConfigError(f"unknown link profile {name!r}")
    return presets[name]


def parse_scenario(text: str, base: Path | None = None) -> TimedScenario:
    """Build a TimedScenario from INI-style ``key = value`` text."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"scenario file: {exc}") from None
    if not cp.has_section("scenario") or not cp.has_section("timeline"):
        raise ConfigError("scenario file needs [scenario] and [timeline] sections")
    sc = cp["scenario"]
    presets = preset_profiles()
    try:
        case = load_case(resolve_path(sc["case"], base))
        partition = load_partition(resolve_path(sc["partition"], base), case) if "partition" in sc else None
        steps = []
        for key, value in cp["timeline"].items():
            step_case = load_case(resolve_path(value.strip(), base))
            steps.append((float(key), step_case.truth()))
        steps.sort(key=lambda p: p[0])
        links = cp["links"] if cp.has_section("links") else {}
        device = _link(cp, links.get("device", "ideal"), presets)
        inter = _link(cp, links.get("inter_area", "ideal"), presets)
        central = tuple(_link(cp, n, presets) for n in links.get("central", "").split(",") if n.strip())
        bp_sec = cp["bp"] if cp.has_section("bp") else {}
        bp = BPConfig(
            damping=float(bp_sec.get("damping", BPConfig.damping)),
            relinearize_every=int(bp_sec.get("relinearize_every", 1)),
        )
        pseudo = cp["pseudo"] if cp.has_section("pseudo") else {}
        policy = PseudoMeasurementPolicy(
            float(pseudo.get("sigma_pm", 1e-2)), pseudo.get("substitute", "last-known").strip()
        )
        buses = tuple(int(b) for b in sc.get("buses", "").split(",") if b.strip()) or None
        return TimedScenario(
            case=case,
            plan=pmu_full_plan(case, sc.getfloat("pmu_sigma", 1e-4)),
            timeline=steps,
            device_link=device,
            inter_area_link=inter,
            central_links=central,
            estimator=sc.get("estimator", "bp-distributed").strip(),
            partition=partition,
            pmu_period_ms=sc.getfloat("pmu_period_ms", 10.0),
            iteration_cost_ms=sc.getfloat("iteration_cost_ms", 0.1),
            duration_ms=sc.getfloat("duration_ms", 60.0),
            warmup_ms=sc.getfloat("warmup_ms", 0.0),
            seed=sc.getint("seed", 0),
            noise_scale=sc.getfloat("noise_scale", 1.0),
            bp=bp,
            policy=policy,
            buses=buses,
        )
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"scenario file: {exc}") from None


def load_scenario(path) -> TimedScenario:
    path = resolve_path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), base=path.parent)
