"""Batch front door: config-driven experiments with CSV/JSON artifacts.

Subcommands: ``lq-solve`` (closed-form coefficient system and optimal
feedback), ``simulate`` (fixed-point flow + Monte Carlo run), ``verify``
(certification suite), ``fp`` (density solver), ``dpp-check`` (alias for the
dynamic-programming subset of verify).

Exit codes: 0 success, 1 configuration error, 2 numerical blow-up or
instability, 3 fixed point not converged in strict mode, 4 failed check.
Artifacts are byte-stable for a fixed (config, seed); timestamps live only
in the ``run_meta.json`` sidecar.
"""

from __future__ import annotations

import datetime
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__, rng
from .config import Experiment
from .cost import estimate_cost, lq_cost_spec
from .engine import active_lane, init_population, simulate_tree
from .engine.simulate import RecordOptions, simulate_population
from .errors import ConfigError, RiccatiBlowupError, StabilityError
from .fokker_planck import FrozenCoefficients, fp_solve
from .lq import (Moments, lq_value, optimal_affine_coefficients,
                 solve_riccati)
from .measures import wbar1_subsampled
from .meanfield import solve_flow_picard
from .timegrid import TimeGrid
from .verify import (CheckReport, CylindricalFunction, check_dpp,
                     check_flow_property, check_hjb_grid,
                     check_initial_law_invariance, check_mass_law,
                     check_population_bound, check_verification,
                     ito_formula_check, lq_exact_flow, run_suite,
                     suite_summary)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BLOWUP = 2
EXIT_NOT_CONVERGED = 3
EXIT_CHECK_FAILED = 4


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray],
               cfg_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def _write_json(path: Path, payload: dict, cfg_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": cfg_hash, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _write_meta(out: Path, exp: Experiment, seed: int) -> None:
    meta = {
        "config_hash": exp.hash,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "package_version": __version__,
        "kernel_lane": active_lane(),
        "seed": seed,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _load(config_path, out_dir, seed):
    exp = Experiment.from_file(config_path)
    out = exp.output_dir(out_dir)
    use_seed = exp.budget("seed", 2024) if seed is None else seed
    return exp, out, int(use_seed)


@click.group()
def main():
    """Simulation and certification of controlled branching particle
    systems with mean-field interaction."""


_common = [
    click.option("--config", "config_path", required=True,
                 type=click.Path(exists=True), help="experiment JSON"),
    click.option("--out-dir", default=None, help="output directory override"),
    click.option("--seed", default=None, type=int, help="seed override"),
    click.option("--workers", default=1, type=int,
                 help="max parallel checks (verify only)"),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@main.command("lq-solve")
@common_options
def cmd_lq_solve(config_path, out_dir, seed, workers):
    """Solve the backward coefficient system; write riccati.csv,
    value_surface.csv and control_table.csv."""
    try:
        exp, out, use_seed = _load(config_path, out_dir, seed)
        lqm = exp.lq_model()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        convention = exp.model_cfg.get("riccati_convention", "theta_explicit")
        sol = solve_riccati(lqm, exp.budget("riccati_steps", 2000),
                            convention)
    except RiccatiBlowupError as exc:
        click.echo(f"blow-up: {exc}", err=True)
        sys.exit(EXIT_BLOWUP)

    _write_csv(out / "riccati.csv",
               ["t", "Lambda", "Gamma1", "Gamma2", "Gamma3", "Gamma4"],
               [sol.times] + [sol.values[:, i] for i in range(5)], exp.hash)

    law = exp.initial_law()
    mass0, m1v, m20 = law.moments()
    m0 = Moments(mass0, float(m1v[0]), m20)
    k0, k1 = optimal_affine_coefficients(sol, lqm.t0, m0.mass)
    from .lq import lq_moment_flow

    flow = lq_moment_flow(lqm, (k0, k1), lqm.t0, m0,
                          n_steps=exp.budget("riccati_steps", 2000))
    values = np.array([
        lq_value(sol, t, Moments(mb, m1, m2))
        for t, mb, m1, m2 in zip(flow.times, flow.mass, flow.m1, flow.m2)
    ])
    _write_csv(out / "value_surface.csv",
               ["t", "mass", "m1", "m2", "value"],
               [flow.times, flow.mass, flow.m1, flow.m2, values], exp.hash)
    _write_csv(out / "control_table.csv",
               ["t", "k0", "k1"],
               [sol.times,
                np.array([k0(t) for t in sol.times]),
                np.array([k1(t) for t in sol.times])], exp.hash)
    _write_meta(out, exp, use_seed)
    click.echo(f"wrote {out}/riccati.csv (convention {convention})")
    sys.exit(EXIT_OK)


@main.command("simulate")
@common_options
def cmd_simulate(config_path, out_dir, seed, workers):
    """Resolve the mean-field flow and run the Monte Carlo population;
    write flow_moments.csv, tree samples and cost.json."""
    try:
        exp, out, use_seed = _load(config_path, out_dir, seed)
        model = exp.dynamics()
        grid = exp.time_grid()
        law = exp.initial_law()
        sol = None
        if exp.is_lq:
            convention = exp.model_cfg.get("riccati_convention",
                                           "theta_explicit")
            sol = solve_riccati(exp.lq_model(),
                                exp.budget("riccati_steps", 2000), convention)
        control = exp.control(riccati_solution=sol)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except RiccatiBlowupError as exc:
        click.echo(f"blow-up: {exc}", err=True)
        sys.exit(EXIT_BLOWUP)

    scheme = exp.budget("init_scheme", "deterministic_rounding")
    if exp.budget("flow_engine", "picard") == "fd":
        from .meanfield import solve_flow_fd

        try:
            sgrid = exp.space_grid()
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        flow = solve_flow_fd(model, control, law, grid, sgrid.x_lo,
                             sgrid.x_hi, sgrid.n_cells)
        diag = None
    else:
        flow, diag = solve_flow_picard(
            model, control, law, grid,
            n_trees=exp.budget("picard_n_trees", 2000),
            tol=exp.budget("picard_tol", 0.1),
            max_iter=exp.budget("picard_max_iter", 6),
            rng_seed=use_seed, scheme=scheme,
            damping=exp.budget("picard_damping", 1.0),
        )
        if not diag.converged and exp.budget("strict", False):
            click.echo(
                f"fixed point not converged: residuals {diag.residuals}",
                err=True)
            sys.exit(EXIT_NOT_CONVERGED)

    n_trees = exp.budget("n_trees", 10_000)
    result = simulate_population(
        model, control, flow, grid, n_trees,
        rng.derive_seed(use_seed, 1), law, scheme=scheme,
        record=RecordOptions(per_tree_moment_times="all"),
    )
    ts, mass, m1, m2 = result.moment_estimates()
    _, se_mass, se_m1, se_m2 = result.moment_standard_errors()
    _write_csv(out / "flow_moments.csv",
               ["t", "mass", "m1", "m2", "se_mass", "se_m1", "se_m2"],
               [ts, mass, m1, m2, se_mass, se_m1, se_m2], exp.hash)

    if exp.cfg.get("outputs", {}).get("flow_atoms", False):
        (out / "flow_atoms.csv").write_text(
            f"# config_hash={exp.hash}\n" + flow.atoms_csv()
        )

    n_sample = exp.cfg.get("outputs", {}).get("n_sample_trees", 2)
    samples = []
    for i in range(n_sample):
        cfg0 = init_population(law, scheme, rng.derive_seed(use_seed, 1), i)
        traj = simulate_tree(model, control, flow, cfg0, grid,
                             rng.derive_seed(use_seed, 1), tree_index=i)
        samples.append({
            "tree_index": i,
            "events": json.loads(traj.events_json()),
            "final_labels": [".".join(map(str, lab))
                             for lab in traj.snapshots[-1].labels],
        })
    _write_json(out / "trees_sample.json", {"trees": samples}, exp.hash)

    if diag is None:
        flow_diag = {"engine": "fd"}
    else:
        flow_diag = {"engine": "picard", "iterations": diag.iterations,
                     "converged": diag.converged,
                     "residuals": diag.residuals}
    payload = {
        "picard": flow_diag,
        "n_trees": n_trees,
    }
    if exp.is_lq:
        est = estimate_cost(model, lq_cost_spec(exp.lq_model()), control,
                            law, grid, n_trees,
                            rng.derive_seed(use_seed, 2), flow=flow,
                            scheme=scheme)
        payload["cost"] = {"mean": est.mean, "se": est.std_error,
                           "running": est.running,
                           "terminal": est.terminal, "n": est.n_trees}
    _write_json(out / "cost.json", payload, exp.hash)
    _write_meta(out, exp, use_seed)
    status = "fd flow" if diag is None else f"picard converged={diag.converged}"
    click.echo(f"wrote {out}/flow_moments.csv ({status})")
    sys.exit(EXIT_OK)


def _build_check_thunks(exp: Experiment, use_seed: int, only_kinds=None):
    checks = exp.cfg.get("checks", [])
    if only_kinds is not None:
        checks = [c for c in checks if c["kind"] in only_kinds]
    thunks = []
    for spec in checks:
        params = dict(spec.get("params", {}))
        thunks.append((spec["name"],
                       _make_thunk(exp, use_seed, spec["kind"],
                                   spec["name"], params)))
    return thunks


def _make_thunk(exp: Experiment, seed: int, kind: str, name: str,
                params: dict):
    grid = exp.time_grid()
    law = exp.initial_law()

    def resolved_control() -> object:
        if exp.cfg.get("control", {}).get("kind") == "optimal":
            sol = solve_riccati(exp.lq_model(),
                                exp.budget("riccati_steps", 2000))
            return exp.control(riccati_solution=sol)
        return exp.control()

    def thunk() -> CheckReport:
        if kind == "hjb_residual":
            return check_hjb_grid(
                exp.lq_model(), n_points=params.get("n_points", 1000),
                tol=params.get("tol", 1e-6),
                convention=params.get("convention", "theta_explicit"),
                riccati_steps=exp.budget("riccati_steps", 2000), name=name,
            )
        mass0, m1v, m20 = law.moments()
        m0 = Moments(mass0, float(m1v[0]), m20)
        if kind == "verification":
            n_pert = params.get("n_perturbations", 20)
            scale = params.get("perturbation_scale", 0.5)
            base = np.linspace(-scale, scale, n_pert)
            perts = [(float(d), float(-d) / 2) for d in base if d != 0]
            mc = params.get("mc")
            if mc:
                mc = {"grid": TimeGrid.from_dt(grid.t0, grid.t_end,
                                               mc.get("dt", grid.dt)),
                      "n_trees": mc.get("n_trees", 10_000),
                      "seed": rng.derive_seed(seed, 41)}
            return check_verification(exp.lq_model(), m0, perts,
                                      tol=params.get("tol", 1e-6),
                                      mc=mc, name=name)
        if kind == "dpp":
            t = params.get("t", grid.t0)
            s = params.get("s", grid.times[grid.n_steps // 2])
            n_panel = params.get("panel_size", 20)
            spread = params.get("panel_scale", 1.0)
            panel_rng = np.linspace(-spread, spread, n_panel)
            panel = [(float(a), float(b))
                     for a, b in zip(panel_rng, panel_rng[::-1])]
            return check_dpp(exp.lq_model(), m0, t, s, panel,
                             tol=params.get("tol", 1e-6), name=name)
        if kind == "population_bound":
            model = exp.dynamics()
            probs = np.asarray(exp.model_cfg["progeny"], dtype=float)
            m1_bound = params.get("m1_bound",
                                  float(np.arange(probs.size) @ probs))
            return check_population_bound(
                model, resolved_control(), law, grid,
                n_trees=params.get("n_trees", 10_000),
                rng_seed=rng.derive_seed(seed, 11),
                m1_bound=m1_bound,
                scheme=exp.budget("init_scheme", "deterministic_rounding"),
                name=name,
            )
        if kind == "mass_law":
            model = exp.dynamics()
            probs = np.asarray(exp.model_cfg["progeny"], dtype=float)
            theta = exp.model_cfg["gamma"] * float(
                (np.arange(probs.size) - 1) @ probs
            )
            return check_mass_law(
                model, resolved_control(), law, grid,
                n_trees=params.get("n_trees", 10_000),
                rng_seed=rng.derive_seed(seed, 12), theta=theta,
                scheme=exp.budget("init_scheme", "deterministic_rounding"),
                name=name,
            )
        if kind == "initial_law_invariance":
            schemes = tuple(params.get("schemes",
                                       ["bernoulli_residual", "poisson"]))
            return check_initial_law_invariance(
                exp.dynamics(), resolved_control(), law, schemes, grid,
                n_trees=params.get("n_trees", 10_000),
                rng_seed=rng.derive_seed(seed, 13), name=name,
            )
        if kind == "ito_formula":
            which = params.get("functional", "mass")
            F = {"mass": CylindricalFunction.total_mass,
                 "m1": CylindricalFunction.first_moment,
                 "m1sq": CylindricalFunction.squared_first_moment}[which]()
            lqm = exp.lq_model()
            control = resolved_control()
            mass0, m1v, m20 = law.moments()
            flow = lq_exact_flow(lqm, Moments(mass0, float(m1v[0]), m20),
                                 control, grid)
            return ito_formula_check(F, exp.dynamics(), control, flow,
                                     (grid.t0, grid.t_end),
                                     tol=params.get("tol", 1e-6), name=name)
        if kind == "flow_property":
            return check_flow_property(
                exp.dynamics(), resolved_control(), law, grid,
                n_trees=params.get("n_trees", 4000),
                rng_seed=rng.derive_seed(seed, 14),
                u=params.get("u"), name=name,
            )
        raise ConfigError(f"unknown check kind {kind!r}")

    return thunk


def _run_verify(exp, out, use_seed, workers, only_kinds=None) -> int:
    thunks = _build_check_thunks(exp, use_seed, only_kinds)
    if workers > 1 and len(thunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(nm, pool.submit(fn)) for nm, fn in thunks]
            wrapped = [(nm, (lambda f=fut: f.result()))
                       for nm, fut in futures]
            reports = run_suite(wrapped, config_hash=exp.hash)
    else:
        reports = run_suite(thunks, config_hash=exp.hash)
    summary = suite_summary(reports)
    _write_json(out / "summary.json", summary, exp.hash)
    for rep in reports:
        _write_csv(out / "checks" / f"{rep.name}.csv",
                   ["statistic", "threshold", "passed"],
                   [np.array([rep.statistic]), np.array([rep.threshold]),
                    np.array([int(rep.passed)])], exp.hash)
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        click.echo(f"[{status}] {rep.name}: statistic={rep.statistic:.6g} "
                   f"threshold={rep.threshold:.6g}")
    _write_meta(out, exp, use_seed)
    return EXIT_OK if summary["all_passed"] else EXIT_CHECK_FAILED


@main.command("verify")
@common_options
def cmd_verify(config_path, out_dir, seed, workers):
    """Run the configured certification checks; write summary.json."""
    try:
        exp, out, use_seed = _load(config_path, out_dir, seed)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(_run_verify(exp, out, use_seed, workers))


@main.command("dpp-check")
@common_options
def cmd_dpp_check(config_path, out_dir, seed, workers):
    """Run only the dynamic-programming checks from the config."""
    try:
        exp, out, use_seed = _load(config_path, out_dir, seed)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(_run_verify(exp, out, use_seed, workers,
                         only_kinds={"dpp", "verification"}))


@main.command("fp")
@common_options
def cmd_fp(config_path, out_dir, seed, workers):
    """Solve the frozen-flow density equation; write density.csv and
    mass_trace.csv."""
    try:
        exp, out, use_seed = _load(config_path, out_dir, seed)
        model = exp.dynamics()
        grid = exp.time_grid()
        sgrid = exp.space_grid()
        law = exp.initial_law()
        if not hasattr(law, "density"):
            raise ConfigError("density solves need a gaussian or uniform "
                              "initial measure")
        # mass-leak guard: the domain must carry the initial measure
        xs = np.linspace(sgrid.x_lo, sgrid.x_hi, 20001)
        inside = float(np.trapezoid(law.density(xs), xs))
        if abs(inside - law.mass) > 1e-6 * max(law.mass, 1.0):
            raise ConfigError(
                f"initial measure leaks outside [{sgrid.x_lo}, "
                f"{sgrid.x_hi}]: contained mass {inside:.9g} of {law.mass}"
            )
        control = exp.control()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    fp_cfg = exp.cfg.get("fp", {})
    # frozen flow: moment flow of the model itself under the configured
    # control (mass coupling only)
    from .meanfield import solve_flow_picard as _picard

    if exp.is_lq:
        lqm = exp.lq_model()
        mass0, m1v, m20 = law.moments()
        flow = lq_exact_flow(lqm, Moments(mass0, float(m1v[0]), m20),
                             control, grid)
    else:
        flow, _ = _picard(model, control, law, grid,
                          n_trees=exp.budget("picard_n_trees", 2000),
                          tol=exp.budget("picard_tol", 0.1),
                          max_iter=exp.budget("picard_max_iter", 4),
                          rng_seed=use_seed)
    coeffs = FrozenCoefficients.from_model(model, flow, control)
    try:
        dflow = fp_solve(coeffs, law.density, sgrid, grid,
                         scheme=fp_cfg.get("scheme", "imex"),
                         boundary=fp_cfg.get("boundary", "zero_flux"))
    except StabilityError as exc:
        click.echo(f"instability: {exc}", err=True)
        sys.exit(EXIT_BLOWUP)

    (out / "density.csv").parent.mkdir(parents=True, exist_ok=True)
    (out / "density.csv").write_text(
        f"# config_hash={exp.hash}\n" + dflow.to_csv()
    )
    (out / "mass_trace.csv").write_text(
        f"# config_hash={exp.hash}\n" + dflow.mass_trace_csv()
    )

    if fp_cfg.get("crosscheck", False):
        n_trees = fp_cfg.get("crosscheck_n_trees", 10_000)
        result = simulate_population(
            model, control, flow, grid, n_trees,
            rng.derive_seed(use_seed, 3), law,
            scheme=exp.budget("init_scheme", "bernoulli_residual"),
            record=RecordOptions(snapshot_times=[grid.t_end]),
        )
        emp = result.empirical_measure(grid.t_end)
        fd_measure = dflow.as_equal_weight_measure(grid.t_end,
                                                   unit_weight=1.0 / n_trees)
        dist = wbar1_subsampled(fd_measure, emp, cap=1500)
        _write_json(out / "fp_crosscheck.json",
                    {"wbar1": dist, "n_trees": n_trees,
                     "dx": sgrid.dx, "min_density": dflow.min_density},
                    exp.hash)
    _write_meta(out, exp, use_seed)
    click.echo(f"wrote {out}/density.csv")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
