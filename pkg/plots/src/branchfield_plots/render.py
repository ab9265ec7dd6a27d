"""Figure rendering for branchfield artifacts.

Five figure kinds: ``riccati`` (coefficient curves), ``moments`` (Monte
Carlo vs ODE overlay with a 3-SE band), ``convergence`` (cost vs tree count
with error bars), ``density`` (space-time heatmap), ``summary``
(check-suite dashboard).  Rendering is read-only and deterministic: fixed
style, fixed dpi, no timestamps; identical inputs give identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import (read_csv_artifact, read_json_artifact,
                        require_common_hash)

KINDS = ("riccati", "moments", "convergence", "density", "summary")

_STYLE = {
    "figure.figsize": (8.0, 5.0),
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
}


@dataclass(frozen=True)
class PlotJob:
    kind: str
    inputs: tuple[str, ...]
    output: str
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; "
                             f"choose from {KINDS}")
        if not self.inputs:
            raise ValueError("need at least one input artifact")


def render(job: PlotJob) -> dict:
    """Render the figure; returns diagnostics (config hash, band containment
    for overlays).  Writes nothing if inputs are inconsistent."""
    with plt.rc_context({**_STYLE, **job.style}):
        fig, diagnostics = _RENDERERS[job.kind](job)
        try:
            out = Path(job.output)
            out.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out, metadata={"Software": "branchfield-plots"})
        finally:
            plt.close(fig)
    return diagnostics


def _render_riccati(job: PlotJob):
    art = read_csv_artifact(job.inputs[0], "riccati.csv")
    fig, ax = plt.subplots()
    for name in ("Lambda", "Gamma1", "Gamma2", "Gamma3", "Gamma4"):
        ax.plot(art.column("t"), art.column(name), label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("coefficient value")
    ax.set_title(f"Backward coefficient system  [run {art.config_hash}]")
    ax.legend()
    return fig, {"config_hash": art.config_hash}


def _render_moments(job: PlotJob):
    if len(job.inputs) < 2:
        raise ValueError("moments overlay needs flow_moments.csv and "
                         "value_surface.csv")
    mc = read_csv_artifact(job.inputs[0], "flow_moments.csv")
    ode = read_csv_artifact(job.inputs[1], "value_surface.csv")
    common = require_common_hash(mc.config_hash, ode.config_hash)

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8.0, 7.5))
    contained = {}
    for ax, name in zip(axes, ("mass", "m1", "m2")):
        t_mc = mc.column("t")
        mid = mc.column(name)
        band = 3 * mc.column(f"se_{name}")
        t_ode = ode.column("t")
        ref = np.interp(t_mc, t_ode, ode.column(name))
        ax.fill_between(t_mc, ref - band, ref + band, alpha=0.25,
                        label="ODE +- 3 SE")
        ax.plot(t_ode, ode.column(name), lw=1.2, label="moment ODE")
        ax.plot(t_mc, mid, ".", ms=2.5, label="Monte Carlo")
        ax.set_ylabel(name)
        inside = np.abs(mid - ref) <= band + 1e-12
        contained[name] = float(inside.mean())
    axes[0].set_title(f"Moment flow, Monte Carlo vs ODE  [run {common}]")
    axes[0].legend(loc="best")
    axes[-1].set_xlabel("t")
    return fig, {"config_hash": common, "band_containment": contained}


def _render_convergence(job: PlotJob):
    points = []
    hashes = []
    for path in job.inputs:
        h, payload = read_json_artifact(path)
        hashes.append(h)
        cost = payload.get("cost")
        if not cost:
            raise ValueError(f"{path} carries no cost estimate")
        points.append((cost["n"], cost["mean"], cost["se"]))
    # convergence studies vary the tree budget, which necessarily changes
    # the config hash, so unlike overlays this figure accepts mixed hashes
    # and records them in the diagnostics
    points.sort()
    ns, means, ses = map(np.array, zip(*points))
    fig, ax = plt.subplots()
    ax.errorbar(ns, means, yerr=3 * ses, fmt="o-", capsize=3,
                label="cost +- 3 SE")
    ax.set_xscale("log")
    ax.set_xlabel("trees")
    ax.set_ylabel("cost estimate")
    ax.set_title("Cost convergence with tree budget")
    ax.legend()
    return fig, {"config_hash": ",".join(dict.fromkeys(hashes)),
                 "n_points": len(points)}


def _render_density(job: PlotJob):
    art = read_csv_artifact(job.inputs[0], "density.csv")
    ts = np.unique(art.column("t"))
    xs = np.unique(art.column("x"))
    grid = art.column("rho").reshape(ts.size, xs.size)
    fig, ax = plt.subplots()
    mesh = ax.pcolormesh(ts, xs, grid.T, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="density")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    ax.set_title(f"Density history  [run {art.config_hash}]")
    return fig, {"config_hash": art.config_hash,
                 "shape": [int(ts.size), int(xs.size)]}


def _render_summary(job: PlotJob):
    h, payload = read_json_artifact(job.inputs[0])
    checks = payload.get("checks", [])
    names = [c["name"] for c in checks]
    passed = [bool(c["passed"]) for c in checks]
    margins = []
    for c in checks:
        stat, thr = c["statistic"], c["threshold"]
        margins.append(stat / thr if thr else np.nan)
    fig, ax = plt.subplots(figsize=(8.0, max(2.5, 0.5 * len(names) + 1.5)))
    y = np.arange(len(names))
    colors = ["#2a9d3a" if ok else "#c03a2b" for ok in passed]
    ax.barh(y, [min(m, 2.0) if np.isfinite(m) else 2.0 for m in margins],
            color=colors)
    ax.axvline(1.0, color="k", lw=1, ls="--", label="threshold")
    ax.set_yticks(y, names)
    ax.set_xlabel("statistic / threshold (clipped at 2)")
    n_pass = sum(passed)
    ax.set_title(f"Check suite: {n_pass}/{len(names)} passed  [run {h}]")
    ax.legend()
    return fig, {"config_hash": h, "n_passed": n_pass,
                 "n_checks": len(names)}


_RENDERERS = {
    "riccati": _render_riccati,
    "moments": _render_moments,
    "convergence": _render_convergence,
    "density": _render_density,
    "summary": _render_summary,
}
