"""Experiment recipes: convergence traces, packet-loss sweep and latency tracking.

Configs are INI files read with :mod:`configparser`.  Every run writes its CSVs,
optional PNG figures and a ``manifest.json`` that echoes the effective
configuration, seed and library versions.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .admm import ADMMConfig, admm_solve, decompose
from .bp import BPConfig, bp_solve, build_factor_graph, iterations_to
from .comm import (
    SUBSTITUTES,
    SweepCell,
    TimedResult,
    first_response,
    load_scenario,
    run_plr_sweep,
    run_timed_scenario,
    settle_time,
    sweep_to_csv,
    timed_to_csv,
    trial_seed,
)
from .errors import ConfigError
from .estimation import SEConfig, check_observability, gauss_newton_solve, rmse, trace_to_csv
from .grid import load_case, load_partition, resolve_path
from .measurement import (
    LEGACY_SIGMA,
    PMU_SIGMA,
    MeasurementModel,
    build_plan_with_pmus,
    generate_measurements,
    legacy_template,
    pmu_full_plan,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "plr", "latency")
SOLVERS = ("bp", "admm")
V3_BEFORE = 1.02099501402936


@dataclass
class ExperimentConfig:
    experiment: str
    case_path: Path | None = None
    partition_path: Path | None = None
    pmus_per_area: tuple[int, ...] = (0, 1, 2)
    solvers: tuple[str, ...] = SOLVERS
    legacy_sigma: float = LEGACY_SIGMA
    pmu_sigma: float = PMU_SIGMA
    trials: int = 50
    seed: int = 0
    workers: int = 1
    threshold: float = 1.05
    se: SEConfig = SEConfig()
    admm: ADMMConfig = ADMMConfig(log_communication=False)
    bp: BPConfig = BPConfig()
    plrs: tuple[float, ...] = (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    sigma_pms: tuple[float, ...] = (0.01, 0.1, 0.5)
    substitute: str = "forecast"
    variants: dict[str, Path] = field(default_factory=dict)
    report_bus: int = 3
    step_ms: float = 10.0
    settle_threshold: float = 1e-4
    out_dir: Path = Path("results")
    plot: bool = True
    raw: dict = field(default_factory=dict)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.experiment in ("convergence", "plr"):
            for p in (self.case_path, self.partition_path):
                if p is None or not Path(p).is_file():
                    raise ConfigError(f"referenced file not found: {p}")
        if self.experiment == "convergence":
            bad = [s for s in self.solvers if s not in SOLVERS]
            if bad:
                raise ConfigError(f"unknown solver(s) {bad}")
            if any(p not in (0, 1, 2) for p in self.pmus_per_area):
                raise ConfigError("pmus_per_area values must be 0, 1 or 2")
        if self.experiment == "plr":
            if any(s not in ("gn", "admm") for s in self.solvers):
                raise ConfigError("plr solvers must be gn and/or admm")
            if self.substitute not in SUBSTITUTES:
                raise ConfigError(f"substitute must be one of {SUBSTITUTES}")
            if any(not 0 <= p <= 1 for p in self.plrs):
                raise ConfigError("plr values must lie in [0, 1]")
        if self.experiment == "latency":
            if not self.variants:
                raise ConfigError("latency experiment needs a [variants] section")
            for name, p in self.variants.items():
                if not Path(p).is_file():
                    raise ConfigError(f"variant {name}: scenario file not found: {p}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _section_kwargs(cp, name, types: dict) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, value in cp[name].items():
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = types[key](value)
    return out


_SE_KEYS = {"max_iterations": int, "tolerance": float}
_ADMM_KEYS = {
    "rho": float,
    "max_iterations": int,
    "primal_tol": float,
    "dual_tol": float,
    "inner_steps": int,
    "sca_relinearize_every": int,
}
_BP_KEYS = {
    "max_iterations": int,
    "damping": float,
    "prior_variance": float,
    "relinearize_every": int,
    "tolerance": float,
}


def parse_config(text: str, base: Path | None = None, experiment: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    if not cp.has_section("experiment"):
        raise ConfigError("config needs an [experiment] section")
    ex = cp["experiment"]
    kind = ex.get("kind", experiment)
    if kind is None:
        raise ConfigError("experiment kind not given")
    kind = kind.strip()
    if experiment is not None and kind != experiment:
        raise ConfigError(f"config describes a {kind!r} experiment, not {experiment!r}")

    def path(key):
        if key not in ex:
            return None
        try:
            return resolve_path(ex[key].strip(), base)
        except FileNotFoundError:
            raise ConfigError(f"referenced file not found: {ex[key].strip()}") from None

    try:
        kwargs = {}
        if "pmus_per_area" in ex:
            kwargs["pmus_per_area"] = _ints(ex["pmus_per_area"])
        if "solvers" in ex:
            kwargs["solvers"] = _names(ex["solvers"])
        elif kind == "plr":
            kwargs["solvers"] = ("gn", "admm")
        for key in ("legacy_sigma", "pmu_sigma", "threshold", "step_ms", "settle_threshold"):
            if key in ex:
                kwargs[key] = float(ex[key])
        for key in ("trials", "seed", "workers", "report_bus"):
            if key in ex:
                kwargs[key] = int(ex[key])
        if "plrs" in ex:
            kwargs["plrs"] = _floats(ex["plrs"])
        if "sigma_pms" in ex:
            kwargs["sigma_pms"] = _floats(ex["sigma_pms"])
        if "substitute" in ex:
            kwargs["substitute"] = ex["substitute"].strip()
        if "out" in ex:
            kwargs["out_dir"] = Path(ex["out"].strip())
        se = SEConfig(**_section_kwargs(cp, "gn", _SE_KEYS))
        admm = ADMMConfig(log_communication=False, **_section_kwargs(cp, "admm", _ADMM_KEYS))
        bp = BPConfig(**_section_kwargs(cp, "bp", _BP_KEYS))
        variants = {}
        if cp.has_section("variants"):
            for name, value in cp["variants"].items():
                try:
                    variants[name] = resolve_path(value.strip(), base)
                except FileNotFoundError:
                    raise ConfigError(f"variant {name}: scenario file not found: {value.strip()}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config: {exc}") from None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    cfg = ExperimentConfig(
        experiment=kind,
        case_path=path("case"),
        partition_path=path("partition"),
        se=se,
        admm=admm,
        bp=bp,
        variants=variants,
        raw=raw,
        **kwargs,
    )
    cfg.validate()
    return cfg


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    try:
        p = resolve_path(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(p.read_text(encoding="utf-8"), base=p.parent, experiment=experiment)


# --------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceResult:
    """Mean traces keyed by (pmus_per_area, solver)."""

    normalized: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    per_trial: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    threshold: float = 1.05

    def iterations_to(self, pmus: int, solver: str, threshold: float | None = None):
        return iterations_to(self.normalized[(pmus, solver)], threshold or self.threshold)


def _pad(trace: np.ndarray, length: int) -> np.ndarray:
    out = np.full(length, trace[-1] if len(trace) else np.nan)
    out[: len(trace)] = trace[:length]
    return out


def _convergence_trial(job):
    case_path, part_path, pmus, trial, cfg = job
    case = load_case(case_path)
    partition = load_partition(part_path, case)
    truth = case.truth()
    plan = build_plan_with_pmus(
        case, partition, pmus, legacy_template(case, cfg.legacy_sigma), cfg.pmu_sigma
    )
    model = MeasurementModel(case, plan)
    meas = generate_measurements(case, truth, plan, trial_seed(cfg.seed, trial, pmus), model)
    baseline = rmse(gauss_newton_solve(case, meas, cfg.se, model).estimate, truth)
    out = {}
    if "bp" in cfg.solvers:
        graph = build_factor_graph(case, meas, partition, model)
        res = bp_solve(graph, cfg.bp, truth, baseline)
        out["bp"] = (res.rmse_trace, res.flags)
    if "admm" in cfg.solvers:
        subs = decompose(case, partition, meas, model)
        res = admm_solve(case, subs, cfg.admm, truth, baseline)
        out["admm"] = (res.rmse_trace, res.flags)
    return baseline, out


def _budget(cfg: ExperimentConfig, solver: str) -> int:
    return cfg.bp.max_iterations if solver == "bp" else cfg.admm.max_iterations


def _map(cfg: ExperimentConfig, fn, jobs):
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_convergence(cfg: ExperimentConfig) -> ConvergenceResult:
    case = load_case(cfg.case_path)
    partition = load_partition(cfg.partition_path, case)
    result = ConvergenceResult(threshold=cfg.threshold)
    for pmus in cfg.pmus_per_area:
        plan = build_plan_with_pmus(
            case, partition, pmus, legacy_template(case, cfg.legacy_sigma), cfg.pmu_sigma
        )
        report = check_observability(case, plan)
        if not report.observable:
            msg = f"{pmus} PMU(s)/area: unobservable (rank {report.rank} < {report.n})"
            log.error(msg)
            result.errors[pmus] = msg
            continue
        jobs = [(cfg.case_path, cfg.partition_path, pmus, t, cfg) for t in range(cfg.trials)]
        trials = _map(cfg, _convergence_trial, jobs)
        for solver in cfg.solvers:
            n = _budget(cfg, solver)
            rm = np.array([_pad(t[1][solver][0], n) for t in trials])
            norm = np.array([_pad(t[1][solver][0] / t[0], n) for t in trials])
            result.rmse[(pmus, solver)] = rm.mean(axis=0)
            result.normalized[(pmus, solver)] = norm.mean(axis=0)
            result.per_trial[(pmus, solver)] = norm
            result.flags[(pmus, solver)] = sorted({f for t in trials for f in t[1][solver][1]})
    return result


def convergence_summary_csv(result: ConvergenceResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pmus_per_area", "solver", "iterations_to_threshold", "threshold", "final_normalized_rmse", "flags"])
    for (pmus, solver), trace in sorted(result.normalized.items()):
        it = result.iterations_to(pmus, solver)
        w.writerow([pmus, solver, "" if it is None else it, result.threshold, repr(float(trace[-1])),
                    ";".join(result.flags.get((pmus, solver), []))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# packet loss


def run_plr(cfg: ExperimentConfig) -> list[SweepCell]:
    case = load_case(cfg.case_path)
    partition = load_partition(cfg.partition_path, case)
    plan = pmu_full_plan(case, cfg.pmu_sigma)
    executor = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        return run_plr_sweep(
            case, plan, cfg.plrs, cfg.sigma_pms, cfg.trials, cfg.seed, partition,
            substitute=cfg.substitute, solvers=cfg.solvers, se_cfg=cfg.se, admm_cfg=cfg.admm,
            executor=executor,
        )
    finally:
        if executor is not None:
            executor.shutdown()


# --------------------------------------------------------------------------
# latency


@dataclass
class LatencyVariant:
    name: str
    result: TimedResult
    settle_ms: float | None
    first_response_ms: float | None
    buses: tuple[int, ...] | None = None


def run_latency(cfg: ExperimentConfig, seed_override: int | None = None) -> list[LatencyVariant]:
    out = []
    for name, path in cfg.variants.items():
        scenario = load_scenario(path)
        if seed_override is not None:
            scenario = replace(scenario, seed=seed_override)
        res = run_timed_scenario(scenario)
        out.append(
            LatencyVariant(
                name,
                res,
                settle_time(res, cfg.report_bus, cfg.step_ms, cfg.settle_threshold),
                first_response(res, cfg.report_bus, cfg.step_ms, V3_BEFORE),
                scenario.buses,
            )
        )
    return out


def latency_summary_csv(variants: list[LatencyVariant]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "settle_ms", "first_response_ms", "substituted"])
    for v in variants:
        w.writerow([v.name, "" if v.settle_ms is None else v.settle_ms,
                    "" if v.first_response_ms is None else v.first_response_ms, v.result.substituted])
    return buf.getvalue()


# --------------------------------------------------------------------------
# output


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "matplotlib", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _write(out_dir: Path, name: str, text: str, written: dict):
    path = out_dir / name
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    written[name] = hashlib.sha256(text.encode()).hexdigest()


def write_manifest(cfg: ExperimentConfig, out_dir: Path, written: dict, extra: dict | None = None):
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "config": cfg.raw,
        "effective": {
            "case": str(cfg.case_path) if cfg.case_path else None,
            "partition": str(cfg.partition_path) if cfg.partition_path else None,
            "trials": cfg.trials,
            "seed": cfg.seed,
        },
        "argv": sys.argv[1:],
        "versions": versions(),
        "outputs": written,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def execute(cfg: ExperimentConfig, seed_override: int | None = None) -> dict:
    """Run ``cfg.experiment`` and write all outputs; returns a status dict."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}
    status = {"failed": []}
    if cfg.experiment == "convergence":
        res = run_convergence(cfg)
        for (pmus, solver), trace in sorted(res.normalized.items()):
            text = trace_to_csv(res.rmse[(pmus, solver)], trace)
            _write(out_dir, f"convergence_{solver}_{pmus}pmu.csv", text, written)
        _write(out_dir, "convergence_summary.csv", convergence_summary_csv(res), written)
        status["failed"] = sorted(res.errors.values())
        status["failed"] += [f"{p} PMU(s)/area {s}: divergence" for (p, s), f in res.flags.items() if "divergence" in f]
        if cfg.plot and res.normalized:
            from .plotting import plot_convergence

            for solver in cfg.solvers:
                plot_convergence(res, solver, out_dir / f"convergence_{solver}.png")
        status["result"] = res
    elif cfg.experiment == "plr":
        cells = run_plr(cfg)
        _write(out_dir, "plr.csv", sweep_to_csv(cells), written)
        if cfg.plot:
            from .plotting import plot_plr

            plot_plr(cells, out_dir / "plr.png")
        status["result"] = cells
    else:
        variants = run_latency(cfg, seed_override)
        for v in variants:
            _write(out_dir, f"latency_{v.name}.csv", timed_to_csv(v.result, v.buses), written)
        _write(out_dir, "latency_summary.csv", latency_summary_csv(variants), written)
        if cfg.plot:
            from .plotting import plot_latency

            plot_latency(variants, cfg.report_bus, out_dir / "latency.png")
        status["result"] = variants
    write_manifest(cfg, out_dir, written, {"failures": status["failed"]})
    status["outputs"] = written
    return status


__all__ = [
    "ConvergenceResult",
    "ExperimentConfig",
    "LatencyVariant",
    "execute",
    "load_config",
    "parse_config",
    "run_convergence",
    "run_latency",
    "run_plr",
]
