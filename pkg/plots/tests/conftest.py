"""Generate primary-toolkit artifacts once per session via its CLI (the
plots package consumes the artifact interface only)."""

import json
import subprocess
import sys

import pytest

LQ_CONFIG = {
    "model": {"kind": "lq", "b1": -0.3, "b2": 0.4, "b3": 1.0, "sigma": 0.5,
              "gamma": 0.8, "progeny": [0.3, 0.2, 0.5],
              "L1": 1.0, "L2": 0.2, "L3": 0.1, "L4": 1.0,
              "g1": 0.5, "g2": 0.3, "g3": 0.2, "horizon": 1.0},
    "control": {"kind": "optimal"},
    "initial_measure": {"family": "gaussian", "mass": 2.0, "mean": 0.5,
                        "sd": 0.5},
    "grids": {"t0": 0.0, "T": 1.0, "dt": 0.001},
    "budgets": {"n_trees": 10000, "picard_n_trees": 8000,
                "picard_tol": 0.35, "picard_max_iter": 4, "seed": 314},
    "checks": [
        {"name": "hjb-residual", "kind": "hjb_residual",
         "params": {"n_points": 125}},
        {"name": "verification", "kind": "verification",
         "params": {"n_perturbations": 8}},
        {"name": "dpp", "kind": "dpp", "params": {"panel_size": 8}},
    ],
}

FP_CONFIG = {
    "model": {"kind": "branching1d", "b1": -0.2, "b2": 0.0, "b3": 0.0,
              "sigma": 0.5, "gamma": 1.0, "progeny": [0.3, 0.0, 0.7],
              "horizon": 0.5},
    "control": {"kind": "zero"},
    "initial_measure": {"family": "gaussian", "mass": 1.0, "mean": 0.0,
                        "sd": 0.4},
    "grids": {"t0": 0.0, "T": 0.5, "dt": 0.005, "x_lo": -4.0, "x_hi": 4.0,
              "dx": 0.02},
    "budgets": {"seed": 9},
}


def run_primary(*args):
    proc = subprocess.run([sys.executable, "-m", "branchfield.cli", *args],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr + proc.stdout
    return proc


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    """Criterion-1 style (lq-solve), criterion-3 style (simulate), density
    and summary artifacts, plus a second run for convergence/hash tests."""
    root = tmp_path_factory.mktemp("artifacts")
    main_dir = root / "main"
    cfg = dict(LQ_CONFIG, outputs={"directory": str(main_dir)})
    cfg_path = root / "lq.json"
    cfg_path.write_text(json.dumps(cfg))
    run_primary("lq-solve", "--config", str(cfg_path))
    run_primary("simulate", "--config", str(cfg_path))
    run_primary("verify", "--config", str(cfg_path))

    fp_dir = root / "fp"
    fp_cfg = dict(FP_CONFIG, outputs={"directory": str(fp_dir)})
    fp_path = root / "fp.json"
    fp_path.write_text(json.dumps(fp_cfg))
    run_primary("fp", "--config", str(fp_path))

    # a smaller-budget variant: different hash, used for convergence and
    # for the mismatch-refusal test
    alt_dir = root / "alt"
    alt = json.loads(json.dumps(LQ_CONFIG))
    alt["budgets"].update({"n_trees": 2500, "seed": 315})
    alt["grids"]["dt"] = 0.002
    alt["outputs"] = {"directory": str(alt_dir)}
    alt_path = root / "lq_alt.json"
    alt_path.write_text(json.dumps(alt))
    run_primary("simulate", "--config", str(alt_path))

    return {
        "riccati": main_dir / "riccati.csv",
        "value_surface": main_dir / "value_surface.csv",
        "flow_moments": main_dir / "flow_moments.csv",
        "cost": main_dir / "cost.json",
        "summary": main_dir / "summary.json",
        "density": fp_dir / "density.csv",
        "alt_flow_moments": alt_dir / "flow_moments.csv",
        "alt_cost": alt_dir / "cost.json",
        "out": root / "figures",
    }
