"""Experiment configuration: YAML tree with defaults and typo safety.

Every field has a default; unknown keys are rejected with the offending
path.  The fully resolved config is persisted alongside run outputs so a
run can be reproduced from its own directory.
"""

from __future__ import annotations

import copy

import yaml


class ConfigError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/run",
    "system": {
        "kind": "lorenz63",
        "parameters": {},  # system-specific scalars, validated by SystemSpec
        "integrator_dt": 0.01,
        "subsample_factor": 10,
        "spinup_steps": 1000,
        "n_traj": 20,
        "n_steps": 200,     # stored steps per trajectory
        "n_raw_steps": 0,   # optional; when set, n_steps = n_raw_steps // subsample_factor
    },
    "surrogate": {
        "arch": "mlp",  # mlp | fno_lite
        "width": 128,
        "depth": 3,
        "activation": "tanh",
        "modes": 12,
        "n_layers": 4,
    },
    "loss": {
        "mode": "one_step",  # one_step | multi_rollout | mp
        "n_rollouts": 1,
        "lambda_decay": 1.0,
        "pushforward": False,
        "norm": "mse",
    },
    "curriculum": {
        "mu_init": 1.0e-5,
        "mu_growth": 10.0,
        "mu_update_every": 5,
        "mu_max": 1.0e5,
        "r_schedule": [],  # [[epoch, r], ...]
        "s_schedule": [],
        "penalty_norm": "l2_sq",
    },
    "optimizer": {
        "lr": 1.0e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1.0e-8,
        "clip": 1.0,
    },
    "training": {
        "epochs": 20,
    },
    "evaluation": {
        "horizon": 100,
        "n_initial_conditions": 10,
        "correlation_threshold": 0.8,
        "spectrum_band": [1, 8],
        "spectrum_times": [],
        "stability_factor": 10.0,
    },
}

# sections whose sub-keys are free-form
_FREE_SECTIONS = {("system", "parameters")}


def _merge(defaults, user, path=()):
    if not isinstance(user, dict):
        raise ConfigError(f"section {'.'.join(path) or '<root>'} must be a mapping")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(defaults[key], dict) and path + (key,) not in _FREE_SECTIONS:
            out[key] = _merge(defaults[key], value, path + (key,))
        else:
            expected = defaults[key]
            if isinstance(expected, bool) and not isinstance(value, bool):
                raise ConfigError(f"{'.'.join(path + (key,))} must be a boolean")
            if isinstance(expected, int) and not isinstance(expected, bool) \
                    and isinstance(value, float) and value != int(value):
                raise ConfigError(f"{'.'.join(path + (key,))} must be an integer")
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user=None):
    """Merge a user tree over the defaults, rejecting unknown keys."""
    return _merge(DEFAULTS, user or {})


def load_config(path):
    with open(path) as f:
        user = yaml.safe_load(f) or {}
    return resolve_config(user)


def save_config(config, path):
    with open(path, "w") as f:
        yaml.safe_dump(config, f, sort_keys=True, default_flow_style=False)
