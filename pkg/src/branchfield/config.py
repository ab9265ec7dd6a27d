"""Experiment configuration: JSON schema, validation, object builders.

One JSON file describes an experiment (model, control, initial measure,
grids, budgets, outputs, checks).  Unknown keys are rejected.  A content
hash of the canonical form is stamped into every artifact so downstream
tooling can refuse to mix runs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
from scipy.interpolate import CubicSpline

from .engine.initial import AtomicLaw, GaussianLaw, UniformLaw
from .errors import ConfigError
from .lq import LQModel
from .measures import FiniteMeasure
from .model import ClosedLoopControl, ModelCoefficients, affine_model_1d
from .timegrid import TimeGrid

_time_fn = {
    "oneOf": [
        {"type": "number"},
        {
            "type": "object",
            "properties": {
                "t": {"type": "array", "items": {"type": "number"},
                      "minItems": 2},
                "v": {"type": "array", "items": {"type": "number"},
                      "minItems": 2},
            },
            "required": ["t", "v"],
            "additionalProperties": False,
        },
    ]
}

_lq_model = {
    "type": "object",
    "properties": {
        "kind": {"const": "lq"},
        "b1": _time_fn, "b2": _time_fn, "b3": _time_fn,
        "sigma": {"type": "number"},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "gamma_bar": {"type": "number"},
        "progeny": {"type": "array", "items": {"type": "number",
                                               "minimum": 0}},
        "L1": _time_fn, "L2": _time_fn, "L3": _time_fn, "L4": _time_fn,
        "g1": {"type": "number"}, "g2": {"type": "number"},
        "g3": {"type": "number"},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "t0": {"type": "number"},
        "riccati_convention": {"enum": ["theta_explicit", "paper_printed"]},
    },
    "required": ["kind", "sigma", "gamma", "progeny", "L4", "horizon"],
    "additionalProperties": False,
}

_branching_model = {
    "type": "object",
    "properties": {
        "kind": {"const": "branching1d"},
        "b1": _time_fn, "b2": _time_fn, "b3": _time_fn,
        "sigma": {"type": "number"},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "gamma_bar": {"type": "number"},
        "progeny": {"type": "array", "items": {"type": "number",
                                               "minimum": 0}},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "t0": {"type": "number"},
    },
    "required": ["kind", "sigma", "gamma", "progeny", "horizon"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "model": {"oneOf": [_lq_model, _branching_model]},
        "control": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["affine", "optimal", "table", "zero"]},
                "k0": {"type": "number"},
                "k1": {"type": "number"},
                "t": {"type": "array", "items": {"type": "number"}},
                "k0_values": {"type": "array", "items": {"type": "number"}},
                "k1_values": {"type": "array", "items": {"type": "number"}},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "initial_measure": {
            "type": "object",
            "properties": {
                "family": {"enum": ["gaussian", "uniform", "atoms"]},
                "mass": {"type": "number", "minimum": 0},
                "mean": {"type": "number"},
                "sd": {"type": "number", "exclusiveMinimum": 0},
                "lo": {"type": "number"},
                "hi": {"type": "number"},
                "positions": {"type": "array",
                              "items": {"type": "number"}},
                "weights": {"type": "array",
                            "items": {"type": "number", "minimum": 0}},
            },
            "required": ["family"],
            "additionalProperties": False,
        },
        "grids": {
            "type": "object",
            "properties": {
                "t0": {"type": "number"},
                "T": {"type": "number"},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "x_lo": {"type": "number"},
                "x_hi": {"type": "number"},
                "dx": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["T", "dt"],
            "additionalProperties": False,
        },
        "budgets": {
            "type": "object",
            "properties": {
                "n_trees": {"type": "integer", "minimum": 1},
                "picard_n_trees": {"type": "integer", "minimum": 100},
                "picard_tol": {"type": "number", "minimum": 0},
                "picard_max_iter": {"type": "integer", "minimum": 1},
                "picard_damping": {"type": "number", "exclusiveMinimum": 0,
                                   "maximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "init_scheme": {"enum": ["deterministic_rounding",
                                         "bernoulli_residual", "poisson"]},
                "strict": {"type": "boolean"},
                "riccati_steps": {"type": "integer", "minimum": 10},
                "flow_engine": {"enum": ["picard", "fd"]},
            },
            "additionalProperties": False,
        },
        "outputs": {
            "type": "object",
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array",
                            "items": {"enum": ["csv", "json"]}},
                "flow_atoms": {"type": "boolean"},
                "n_sample_trees": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"enum": [
                        "hjb_residual", "verification", "dpp",
                        "population_bound", "mass_law",
                        "initial_law_invariance", "ito_formula",
                        "flow_property",
                    ]},
                    "params": {"type": "object"},
                },
                "required": ["name", "kind"],
                "additionalProperties": False,
            },
        },
        "fp": {
            "type": "object",
            "properties": {
                "scheme": {"enum": ["imex", "explicit"]},
                "boundary": {"enum": ["zero_flux", "zero_value"]},
                "crosscheck": {"type": "boolean"},
                "crosscheck_n_trees": {"type": "integer", "minimum": 100},
            },
            "additionalProperties": False,
        },
    },
    "required": ["model", "initial_measure", "grids"],
    "additionalProperties": False,
}


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        # pin the model variant by its kind tag for a crisper diagnostic
        # than the generic oneOf best-match
        model = cfg.get("model") if isinstance(cfg, dict) else None
        if isinstance(model, dict) and model.get("kind") in ("lq",
                                                             "branching1d"):
            variant = _lq_model if model["kind"] == "lq" else _branching_model
            try:
                jsonschema.validate(model, variant)
            except jsonschema.ValidationError as inner:
                path = "/".join(["model"]
                                + [str(p) for p in inner.absolute_path])
                raise ConfigError(
                    f"config invalid at '{path}': {inner.message}"
                ) from inner
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"config invalid at '{path}': {exc.message}") from exc


def _build_time_fn(spec) -> Any:
    if isinstance(spec, (int, float)):
        return float(spec)
    ts = np.asarray(spec["t"], dtype=float)
    vs = np.asarray(spec["v"], dtype=float)
    if ts.size != vs.size:
        raise ConfigError("table lengths differ")
    spline = CubicSpline(ts, vs)
    return lambda t: float(spline(np.clip(t, ts[0], ts[-1])))


@dataclass
class Experiment:
    """Validated configuration with lazily built model objects."""

    cfg: dict
    hash: str

    @classmethod
    def from_file(cls, path) -> "Experiment":
        cfg = load_config(path)
        return cls(cfg, config_hash(cfg))

    @classmethod
    def from_dict(cls, cfg: dict) -> "Experiment":
        validate_config(cfg)
        return cls(cfg, config_hash(cfg))

    # -- sections -------------------------------------------------------------

    @property
    def model_cfg(self) -> dict:
        return self.cfg["model"]

    @property
    def is_lq(self) -> bool:
        return self.model_cfg["kind"] == "lq"

    def budget(self, key: str, default):
        return self.cfg.get("budgets", {}).get(key, default)

    def output_dir(self, override=None) -> Path:
        """Precedence: CLI flag, config, BRANCHFIELD_OUT_DIR, ./out."""
        base = (override
                or self.cfg.get("outputs", {}).get("directory")
                or os.environ.get("BRANCHFIELD_OUT_DIR")
                or "out")
        return Path(base)

    def time_grid(self) -> TimeGrid:
        g = self.cfg["grids"]
        return TimeGrid.from_dt(g.get("t0", 0.0), g["T"], g["dt"])

    def space_grid(self):
        from .fokker_planck import SpaceGrid

        g = self.cfg["grids"]
        if "x_lo" not in g or "x_hi" not in g or "dx" not in g:
            raise ConfigError("grids must define x_lo, x_hi, dx for density "
                              "solves")
        n = int(round((g["x_hi"] - g["x_lo"]) / g["dx"]))
        if n < 3 or abs(n * g["dx"] - (g["x_hi"] - g["x_lo"])) > 1e-9:
            raise ConfigError("dx must evenly divide [x_lo, x_hi]")
        return SpaceGrid(g["x_lo"], g["x_hi"], n)

    def lq_model(self) -> LQModel:
        if not self.is_lq:
            raise ConfigError("this command needs an 'lq' model section")
        m = self.model_cfg
        g = self.cfg["grids"]
        return LQModel(
            b1=_build_time_fn(m.get("b1", 0.0)),
            b2=_build_time_fn(m.get("b2", 0.0)),
            b3=_build_time_fn(m.get("b3", 0.0)),
            sigma=m["sigma"], gamma=m["gamma"], progeny=m["progeny"],
            L1=_build_time_fn(m.get("L1", 0.0)),
            L2=_build_time_fn(m.get("L2", 0.0)),
            L3=_build_time_fn(m.get("L3", 0.0)),
            L4=_build_time_fn(m["L4"]),
            g1=m.get("g1", 0.0), g2=m.get("g2", 0.0), g3=m.get("g3", 0.0),
            horizon=m["horizon"], t0=m.get("t0", g.get("t0", 0.0)),
            gamma_bar=m.get("gamma_bar"),
        )

    def dynamics(self) -> ModelCoefficients:
        m = self.model_cfg
        if self.is_lq:
            return self.lq_model().dynamics()
        return affine_model_1d(
            b1=_build_time_fn(m.get("b1", 0.0)),
            b2=_build_time_fn(m.get("b2", 0.0)),
            b3=_build_time_fn(m.get("b3", 0.0)),
            sigma=m["sigma"], gamma=m["gamma"],
            progeny_probs=m["progeny"], gamma_bar=m.get("gamma_bar"),
        )

    def control(self, riccati_solution=None) -> ClosedLoopControl:
        c = self.cfg.get("control", {"kind": "zero"})
        kind = c["kind"]
        if kind == "zero":
            return ClosedLoopControl.zero()
        if kind == "affine":
            return ClosedLoopControl.affine(c.get("k0", 0.0),
                                            c.get("k1", 0.0))
        if kind == "table":
            for key in ("t", "k0_values", "k1_values"):
                if key not in c:
                    raise ConfigError(f"table control needs '{key}'")
            k0 = _build_time_fn({"t": c["t"], "v": c["k0_values"]})
            k1 = _build_time_fn({"t": c["t"], "v": c["k1_values"]})
            return ClosedLoopControl.affine(k0, k1)
        # optimal feedback needs the Riccati solution and the initial mass
        if riccati_solution is None:
            raise ConfigError("control kind 'optimal' needs an LQ model")
        from .lq import optimal_control_feedback

        law = self.initial_law()
        lqm = self.lq_model()
        return optimal_control_feedback(riccati_solution, lqm.t0, law.mass)

    def initial_law(self):
        im = self.cfg["initial_measure"]
        fam = im["family"]
        if fam == "gaussian":
            for key in ("mass", "mean", "sd"):
                if key not in im:
                    raise ConfigError(f"gaussian initial measure needs "
                                      f"'{key}'")
            return GaussianLaw(im["mass"], im["mean"], im["sd"])
        if fam == "uniform":
            for key in ("mass", "lo", "hi"):
                if key not in im:
                    raise ConfigError(f"uniform initial measure needs "
                                      f"'{key}'")
            return UniformLaw(im["mass"], im["lo"], im["hi"])
        if "positions" not in im or "weights" not in im:
            raise ConfigError("atom initial measure needs positions/weights")
        return AtomicLaw(FiniteMeasure(
            np.asarray(im["positions"], dtype=float).reshape(-1, 1),
            im["weights"], 1,
        ))
