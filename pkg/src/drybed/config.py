"""Configuration loading, validation, and CLI overrides.

One YAML file drives every subcommand. The packaged defaults are always the
base layer; a user file overrides selectively; --set path=value overrides
single keys on top of that. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import csv
import importlib.resources
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
import yaml

from .errors import ConfigError, IoError
from .gpr import gpr_fit
from .model import CoefficientMaps, GridConfig, PhysicalParams


def _packaged(name):
    return importlib.resources.files("drybed.data").joinpath(name)


DEFAULTS = {
    "grid": {"N": 1000, "L": 0.5},
    "physical": {
        "k_d1": 12.0, "rho_s": 1200.0, "rho_a": 1.1, "mu_a": 1.8e-5,
        "d_p": 1.0e-3, "A_bed": 0.03, "c_pa": 1006.0, "dh_v": 2.26e6,
        "P_a": 101325.0, "lambda_phi": 0.2, "g": 9.81,
    },
    "gpr": {
        "training_csv": None,      # null selects the packaged table
        "clamp_floor": 1.0e-8,
        "lengthscales": [0.05, 0.45],
        "noise_relative": 1.0e-6,  # noise variance as a fraction of signal variance
    },
    "numerics": {
        "collocation_family": "gauss",
        "collocation_nodes": 3,
        "newton_atol": 1.0e-10,
        "newton_max_iter": 60,
        "fd_step": 1.0e-6,
        "expm_cap": 400,
    },
    "mor": {
        "r": 7,
        "max_iterations": 100,
        "progression_tol": 1.0e-6,
        "sylvester_update_tol": 1.0e-10,
        "sylvester_max_sweeps": 200,
        "validation_seed": 20260818,
        "validation_duration": 600.0,
    },
    "observer": {
        "variant": 2,
        "dt": 2.0,
        "nu": 3.6e-5,              # measurement noise variance (0.006 std)
        "omega": 1.0e-6,           # uniform state noise
        "p0_x1": 1.0e-2,
        "p0_m_h": 1.0e-1,
        "p0_alg": 1.0e-2,
        "negate_psi_lower": False,
        "reconcile_atol": 1.0e-9,
        "plausibility": {
            "m_h_min": 0.2, "m_h_max": 2.2,
            "x1_max": 1.0,
        },
    },
    "montecarlo": {
        "runs": 100,
        "duration": 120.0,
        "seed": 7071,
        "workers": 1,
        "init": {
            "m_h_range": [1.0, 2.0],
            "x1_mode_std": 0.02,
            "x1_point_std": 0.002,
        },
        "convergence": {
            "state_tol": 0.02,
            "alg_tol": 0.01,
            "final_samples": 10,
        },
    },
    "bench": {
        "N_list": [30, 100, 200, 500, 1000],
        "r": 7,
        "repetitions": 50,
        "warmup": 10,
    },
    "synth": {
        "duration": 1800.0,
        "dt": 2.0,
        "seed": 4242,
        "segment_seconds": 120.0,
        "noise_std": 0.0,
        "ranges": {
            "T_a": [50.0, 85.0],
            "mdot_a": [0.05, 0.12],
            "a_vib": [0.1, 0.9],
            "dP": [1800.0, 2600.0],
            "mdot_s": [0.012, 0.028],
            "c_in": [0.08, 0.35],
            "phi_a": [0.05, 0.45],
        },
    },
    "io": {"out_dir": "out", "float_format": "%.17g"},
}


def _deep_merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _coerce_like(reference, text, path):
    if isinstance(reference, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{path} expects a boolean, got {text!r}")
    if isinstance(reference, int) and not isinstance(reference, bool):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{path} expects an integer, got {text!r}") from exc
    if isinstance(reference, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{path} expects a number, got {text!r}") from exc
    if isinstance(reference, list):
        return yaml.safe_load(text)
    return text


def apply_overrides(tree, assignments):
    """Apply key.path=value strings onto a plain configuration tree."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, text = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = tree
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown configuration key: {dotted}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown configuration key: {dotted}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted} is a section, not a value")
        node[leaf] = _coerce_like(node[leaf], text.strip(), dotted)
    return tree


def load_config_tree(path=None, overrides=()):
    """Defaults, overlaid by an optional YAML file, overlaid by --set items."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = yaml.safe_load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except OSError as exc:
            raise IoError(f"cannot read configuration file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError(f"top level of {path} must be a mapping")
        tree = _deep_merge(tree, user)
    if overrides:
        tree = apply_overrides(tree, overrides)
    _validate(tree)
    return tree


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _validate(tree):
    g = tree["grid"]
    _require(isinstance(g["N"], int) and g["N"] >= 2, "grid.N must be an integer >= 2")
    _require(g["L"] > 0, "grid.L must be positive")
    for key, val in tree["physical"].items():
        _require(isinstance(val, (int, float)) and val > 0,
                 f"physical.{key} must be a positive number")
    ob = tree["observer"]
    _require(ob["variant"] in (1, 2), "observer.variant must be 1 or 2")
    _require(ob["nu"] > 0, "observer.nu must be positive")
    _require(ob["omega"] >= 0, "observer.omega must be nonnegative")
    _require(ob["dt"] > 0, "observer.dt must be positive")
    mc = tree["montecarlo"]
    _require(mc["runs"] >= 1, "montecarlo.runs must be at least 1")
    _require(mc["duration"] > 0, "montecarlo.duration must be positive")
    num = tree["numerics"]
    _require(num["collocation_family"] in ("gauss", "radau"),
             "numerics.collocation_family must be gauss or radau")
    _require(num["newton_atol"] > 0, "numerics.newton_atol must be positive")
    sy = tree["synth"]
    for key, rng in sy["ranges"].items():
        _require(isinstance(rng, list) and len(rng) == 2 and rng[0] <= rng[1],
                 f"synth.ranges.{key} must be [low, high]")
    _require(sy["dt"] > 0 and sy["duration"] >= 0, "synth timing must be positive")


def load_training_table(path=None):
    """Training rows for the three coefficient maps.

    Returns (theta, v, D, zeta) arrays read from the given CSV or the
    packaged default table.
    """
    if path is None:
        source = _packaged("gpr_training.csv")
        fh = source.open("r", encoding="utf-8")
    else:
        try:
            fh = open(path, "r", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read training table {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        expected = ["mdot_a", "a_vib", "v", "D", "zeta"]
        if reader.fieldnames != expected:
            raise ConfigError(
                f"training table header {reader.fieldnames} does not match {expected}"
            )
        rows = [[float(row[k]) for k in expected] for row in reader]
    if not rows:
        raise ConfigError("training table is empty")
    data = np.array(rows)
    return data[:, :2], data[:, 2], data[:, 3], data[:, 4]


def build_coefficient_maps(tree):
    """Fit the three surrogates from the configured training table."""
    theta, v, D, zeta = load_training_table(tree["gpr"]["training_csv"])
    ls = tree["gpr"]["lengthscales"]
    floor = tree["gpr"]["clamp_floor"]
    rel = tree["gpr"]["noise_relative"]
    maps = []
    for target in (v, D, zeta):
        sig = float(np.var(target)) + float(np.mean(target)) ** 2
        maps.append(gpr_fit(zip(theta, target), ls, signal_variance=sig,
                            noise_variance=rel * sig, clamp_floor=floor))
    return CoefficientMaps(v=maps[0], D=maps[1], zeta=maps[2])


def grid_from_tree(tree):
    return GridConfig(N=tree["grid"]["N"], L=tree["grid"]["L"])


def params_from_tree(tree):
    return PhysicalParams(**tree["physical"])
