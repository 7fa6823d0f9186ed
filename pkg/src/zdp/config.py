"""Run configuration: a strict YAML schema binding every module's knobs.

Unknown keys are errors (fail fast), and the file must carry a matching
``schema_version``.  All defaults live here so a missing config section means
"use the documented desk-scale defaults".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .hopper import HopperParams, InputBox
from .policy import RaibertParams
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed, unknown or missing configuration content."""


@dataclass
class EvalConfig:
    n_starts: int = 20
    n_hops: int = 30
    start_norm: float = 0.5
    decay_lambda_max: float = 0.9
    lqr_radius: float = 0.1
    lqr_grid: int = 9
    lqr_max_deviation: float = 0.05
    residual_ratio_max: float = 0.1
    heldout_samples: int = 256
    disturbance_impulse: float = 0.5
    disturbance_recovery_hops: int = 10
    disturbance_recovery_norm: float = 0.05


@dataclass
class CostConfig:
    q_eta: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    q_z: list = field(default_factory=lambda: [10.0, 10.0, 1.0, 1.0])
    r: list = field(default_factory=lambda: [1.0, 1.0])
    terminal: str = "riccati"


@dataclass
class PathsConfig:
    weights: str = "weights.txt"
    log: str = "hops.csv"
    out_dir: str = "."


@dataclass
class RunConfig:
    hopper: HopperParams = field(default_factory=HopperParams)
    input_box: InputBox = field(default_factory=InputBox)
    cost: CostConfig = field(default_factory=CostConfig)
    raibert: RaibertParams = field(default_factory=RaibertParams)
    policy_hidden: int = 128
    pretrain_steps: int = 12000
    pretrain_rate: float = 2e-3
    pretrain_target: float = 3e-5
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0


_HOPPER_KEYS = {
    "mass", "gravity", "leg_length", "apex_height", "ground_duration",
    "body_inertia", "flywheel_inertia", "torque_limit", "spindown_gain",
    "kp", "kd", "max_lean", "dt",
}
_BOX_KEYS = {"lower", "upper"}
_COST_KEYS = {"q_eta", "q_z", "r", "terminal"}
_RAIBERT_KEYS = {"velocity_gain", "feedback_gain", "reference_velocity"}
_POLICY_KEYS = {"hidden", "pretrain_steps", "pretrain_rate", "pretrain_target"}
_TRAIN_KEYS = {
    "batch_size", "learning_rate", "num_steps", "z_lower", "z_upper",
    "horizon", "ilqr_max_iter", "ilqr_tol", "optimizer", "seed", "jobs",
    "checkpoint_every",
}
_EVAL_KEYS = {
    "n_starts", "n_hops", "start_norm", "decay_lambda_max", "lqr_radius",
    "lqr_grid", "lqr_max_deviation", "residual_ratio_max", "heldout_samples",
    "disturbance_impulse", "disturbance_recovery_hops", "disturbance_recovery_norm",
}
_PATH_KEYS = {"weights", "log", "out_dir"}
_TOP_KEYS = {
    "schema_version", "seed", "hopper", "input_box", "cost", "raibert",
    "policy", "train", "eval", "paths",
}


def _check_keys(section: str, data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def _maybe_diag(value):
    """3-vectors in the config stand for diagonal 3x3 matrices."""
    arr = np.asarray(value, dtype=float)
    return np.diag(arr) if arr.ndim == 1 else arr


def load_config(path: Optional[str] = None) -> RunConfig:
    """Parse and validate a YAML config; None yields the built-in defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("top level", data, _TOP_KEYS)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    hop = dict(data.get("hopper") or {})
    _check_keys("hopper", hop, _HOPPER_KEYS)
    for key in ("body_inertia", "kp", "kd"):
        if key in hop:
            hop[key] = _maybe_diag(hop[key])
    box = dict(data.get("input_box") or {})
    _check_keys("input_box", box, _BOX_KEYS)
    cost = dict(data.get("cost") or {})
    _check_keys("cost", cost, _COST_KEYS)
    raib = dict(data.get("raibert") or {})
    _check_keys("raibert", raib, _RAIBERT_KEYS)
    pol = dict(data.get("policy") or {})
    _check_keys("policy", pol, _POLICY_KEYS)
    train = dict(data.get("train") or {})
    _check_keys("train", train, _TRAIN_KEYS)
    evl = dict(data.get("eval") or {})
    _check_keys("eval", evl, _EVAL_KEYS)
    paths = dict(data.get("paths") or {})
    _check_keys("paths", paths, _PATH_KEYS)

    try:
        cfg = RunConfig(
            hopper=HopperParams(**hop),
            input_box=InputBox(**box),
            cost=CostConfig(**cost),
            raibert=RaibertParams(**raib),
            policy_hidden=int(pol.get("hidden", 128)),
            pretrain_steps=int(pol.get("pretrain_steps", 12000)),
            pretrain_rate=float(pol.get("pretrain_rate", 2e-3)),
            pretrain_target=float(pol.get("pretrain_target", 3e-5)),
            train=TrainConfig(**train),
            eval=EvalConfig(**evl),
            paths=PathsConfig(**paths),
            seed=int(data.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg


def make_problem(cfg: RunConfig):
    """Training/eval problem (closed-form model, cost, warm start) for a config."""
    from .training import make_hopper_problem

    return make_hopper_problem(
        cfg.hopper, cfg.input_box, cfg.raibert,
        q_eta=cfg.cost.q_eta, q_z=cfg.cost.q_z, r=cfg.cost.r,
        terminal=cfg.cost.terminal,
    )
