"""PNG figures written next to the experiment CSVs."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}
# PNG metadata without a Software/timestamp entry keeps reruns byte-stable
META = {"Software": None}
LABELS = {0: "no PMUs", 1: "1 PMU per area", 2: "2 PMUs per area"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=META)
    plt.close(fig)


def plot_convergence(result, solver: str, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (pmus, s), trace in sorted(result.normalized.items()):
            if s != solver:
                continue
            ax.plot(range(1, len(trace) + 1), trace, label=LABELS.get(pmus, f"{pmus} PMUs"))
        ax.axhline(1.0, color="k", lw=0.8, ls=":")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("RMSE / RMSE of centralized GN")
        ax.set_title(solver.upper())
        ax.legend()
        _save(fig, path)


def plot_plr(cells, path):
    curves = defaultdict(list)
    for c in cells:
        curves[(c.solver, c.sigma_pm)].append((c.plr, c.mean))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for (solver, spm), pts in sorted(curves.items()):
            pts.sort()
            # plr = 0 sits at the left edge of the symlog axis
            ax.plot([p for p, _ in pts], [m for _, m in pts],
                    marker="o" if solver == "gn" else "x", ls="-" if solver == "gn" else "--",
                    label=f"{solver.upper()}, $\\sigma_{{pm}}$={spm:g}")
        ax.set_xscale("symlog", linthresh=1e-5)
        ax.set_yscale("log")
        ax.set_xlabel("packet loss rate")
        ax.set_ylabel("mean RMSE")
        ax.legend(ncol=2)
        _save(fig, path)


def plot_latency(variants, bus: int, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        truth_drawn = False
        for v in variants:
            outs = v.result.outputs
            if not outs:
                continue
            i = outs[0].estimate.bus_ids.index(bus)
            t = [o.t_ms for o in outs]
            if not truth_drawn:
                ax.plot(t, [o.truth.v[i] for o in outs], "k-", lw=1.5, label="exact")
                truth_drawn = True
            ax.plot(t, [o.estimate.v[i] for o in outs], lw=0.9, label=v.name)
        ax.set_xlabel("time [ms]")
        ax.set_ylabel(f"$V_{{{bus}}}$ [p.u.]")
        ax.legend()
        _save(fig, path)
