"""Problem registry and the desk-scale configurations used by the CLI and the acceptance suite."""

from __future__ import annotations

import copy
import math

from .diffcore import InvalidInputError
from .problems import (
    MfgProblem,
    make_crowd_motion,
    make_crowd_obstacle,
    make_half_terminal,
    make_traffic_flow,
)
from .sde import TimeGrid
from .trainer import TrainConfig

PROBLEM_TAGS = ("traffic", "crowd2d", "crowd50d", "obstacle", "half_terminal")

_OVERRIDES = {
    "traffic": {"sigma", "N", "T", "mu0"},
    "crowd2d": {"sigma", "N", "T", "mu0", "x_T"},
    "crowd50d": {"sigma", "N", "T", "mu0", "x_T", "d"},
    "obstacle": {"sigma", "N", "T", "mu0", "x_T", "lam_obs"},
    "half_terminal": {"sigma", "N", "T", "mu0", "target_x1"},
}

_DEFAULT_N = {"traffic": 50, "crowd2d": 100, "crowd50d": 100, "obstacle": 20, "half_terminal": 20}


def make_problem(tag: str, overrides: dict | None = None) -> MfgProblem:
    """Build a shipped problem from its tag plus optional parameter overrides."""
    if tag not in PROBLEM_TAGS:
        raise InvalidInputError(f"unknown problem tag {tag!r}; choose from {PROBLEM_TAGS}")
    ov = dict(overrides or {})
    unknown = set(ov) - _OVERRIDES[tag]
    if unknown:
        raise InvalidInputError(f"unknown {tag} overrides: {sorted(unknown)}")
    grid = TimeGrid(float(ov.pop("T", 1.0)), int(ov.pop("N", _DEFAULT_N[tag])))
    mu0 = ov.pop("mu0", None)
    if tag == "traffic":
        return make_traffic_flow(grid, ov.get("sigma", 0.5), mu0)
    sigma = ov.get("sigma", math.sqrt(2.0))
    if tag == "crowd2d":
        return make_crowd_motion(2, ov.get("x_T"), sigma, grid, mu0)
    if tag == "crowd50d":
        return make_crowd_motion(int(ov.get("d", 50)), ov.get("x_T"), sigma, grid, mu0)
    if tag == "obstacle":
        return make_crowd_obstacle(grid, sigma, ov.get("lam_obs", 5.0), ov.get("x_T", (4.0, 0.0)), mu0)
    return make_half_terminal(grid, sigma, ov.get("target_x1", 4.0), mu0)


# Desk configurations sized for one CPU core.  Shared choices: the crowd
# family clips gradients (the exponential terminal cost produces gradient
# spikes of 1e40 and beyond) and subsamples flow time steps per epoch.
_CROWD_TRAIN = {
    "M": 512, "M_mu": 128, "value_epochs": 60, "flow_epochs": 40, "flow_steps": 10, "flow_batch": 256,
    "lr_value": 1e-2, "lr_flow": 1e-3, "grad_clip": 1.0,
}

DESK_CONFIGS = {
    "traffic": {
        "problem": {"sigma": 0.5, "N": 50},
        "train": {"M": 512, "M_mu": 512, "outer_iters": 8, "value_epochs": 60, "flow_epochs": 200,
                  "lr_value": 1e-2, "lr_flow": 3e-3, "lr_decay": 0.6, "warmup_steps": 0, "flow_steps": 10,
                  "resimulate_every": 1, "knots": 8},
    },
    "crowd2d": {
        "problem": {"N": 100},
        "train": {**_CROWD_TRAIN, "outer_iters": 6},
    },
    "crowd50d": {
        "problem": {"N": 50},
        "train": {**_CROWD_TRAIN, "M": 256, "M_mu": 64, "flow_batch": 128, "outer_iters": 1, "warmup_steps": 50,
                  "lr_value": 1e-3},
    },
    "obstacle": {
        "problem": {"N": 20, "lam_obs": 1000.0},
        "train": {**_CROWD_TRAIN, "outer_iters": 24, "flow_steps": None},
    },
    "half_terminal": {
        "problem": {"N": 20},
        "train": {**_CROWD_TRAIN, "outer_iters": 8, "flow_steps": None, "clip_per_loss": True},
    },
}


def desk_config(tag: str) -> tuple[dict, TrainConfig]:
    """(problem overrides, TrainConfig) of the desk run for ``tag``."""
    if tag not in DESK_CONFIGS:
        raise InvalidInputError(f"unknown problem tag {tag!r}")
    cfg = copy.deepcopy(DESK_CONFIGS[tag])
    return cfg["problem"], TrainConfig(**cfg["train"])
