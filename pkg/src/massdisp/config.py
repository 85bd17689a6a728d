"""Experiment JSON configuration: parsing, defaults, and validation.

Schema (all keys optional unless noted):

    {
      "task":   "within" | "cross",
      "mode":   "additive" | "noisy_or" | "max",
      "kernel": {"family": "gaussian"|"bilinear", "kf": int,
                 "sigma": float|null, "normalized": bool},
      "loss":   {"eps_c": float, "eps_m": float, "huber_delta": float,
                 "gaussian_target_sigma": float,
                 "weights": [float, float, float]},
      "train":  {"steps": int, "lr": float, "decay": float, "seed": int}
    }

Ablation configs may additionally carry "variants", "kernels" (a list of
kernel objects) and "seeds" (a list of ints).
"""

from __future__ import annotations

import json

from .errors import ConfigError
from .kernels import KernelSpec
from .supervision import LossParams
from .toynet import TASKS, TrainConfig

# Calibrated per-task defaults: the within task votes for its own refined
# location (noisy-OR evidence), the cross task transfers additive evidence
# along the chain and needs the longer schedule to converge.
TASK_DEFAULTS = {
    "within": {"mode": "noisy_or", "steps": 800},
    "cross": {"mode": "additive", "steps": 1600},
}

_MODE_ALIASES = {
    "additive": "additive",
    "noisy_or": "noisy_or",
    "noisyor": "noisy_or",
    "max": "max",
}


def canonical_mode(name: str) -> str:
    try:
        return _MODE_ALIASES[name.lower().replace("-", "_")]
    except KeyError:
        raise ConfigError(f"unknown vote mode {name!r}") from None


def kernel_from_dict(obj: dict | None) -> KernelSpec:
    obj = obj or {}
    if not isinstance(obj, dict):
        raise ConfigError("kernel must be an object")
    return KernelSpec(
        family=obj.get("family", "gaussian"),
        k_f=int(obj.get("kf", 5)) if obj.get("family", "gaussian") == "gaussian" else 2,
        sigma=obj.get("sigma"),
        normalized=bool(obj.get("normalized", False)),
    )


def kernel_label(spec: KernelSpec) -> str:
    if spec.family == "bilinear":
        return "bilinear"
    return f"gaussian_kf{spec.k_f}"


def loss_from_dict(obj: dict | None) -> tuple[LossParams, tuple[float, float, float]]:
    obj = obj or {}
    params = LossParams(
        eps_c=float(obj.get("eps_c", 4.0)),
        eps_m=float(obj.get("eps_m", 1.0)),
        huber_delta=float(obj.get("huber_delta", 1.0)),
        gaussian_target_sigma=float(obj.get("gaussian_target_sigma", 1.0)),
    )
    weights = obj.get("weights", (1.0, 1.0, 1.0))
    if len(weights) != 3:
        raise ConfigError("loss.weights must have exactly three entries")
    return params, tuple(float(w) for w in weights)


def train_config_from_dict(obj: dict, variant: str = "mdn", threads: int = 1) -> TrainConfig:
    """Build a runnable training configuration from a parsed JSON object."""
    if not isinstance(obj, dict):
        raise ConfigError("experiment config must be a JSON object")
    task = obj.get("task", "within")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    defaults = TASK_DEFAULTS[task]
    mode = canonical_mode(obj.get("mode", defaults["mode"]))
    kernel = kernel_from_dict(obj.get("kernel"))
    loss, weights = loss_from_dict(obj.get("loss"))
    train = obj.get("train") or {}
    return TrainConfig(
        task=task,
        variant=variant,
        mode=mode,
        kernel=kernel,
        steps=int(train.get("steps", defaults["steps"])),
        seed=int(train.get("seed", 0)),
        learning_rate=float(train.get("lr", 0.0025)),
        decay=float(train.get("decay", 0.99)),
        loss=loss,
        loss_weights=weights,
        eval_every=int(train.get("eval_every", 0)),
        eval_limit=train.get("eval_limit"),
        threads=threads,
    )


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
