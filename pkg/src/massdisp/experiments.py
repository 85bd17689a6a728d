"""Variant runners and the toy-scale ablation.

Three training regimes are compared, mirroring the classic progression from
a plain heatmap network to fully end-to-end displacement voting:

* ``novote``  -- confidence head only, argmax localization.
* ``posthoc`` -- confidence + offset heads trained independently, voting
  applied only at evaluation time.
* ``mdn``     -- all heads trained jointly with gradients flowing through
  the vote operator.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import TASK_DEFAULTS, kernel_label, train_config_from_dict
from .kernels import KernelSpec
from .toynet import TrainConfig, TrainResult, train

ABLATION_VARIANTS = ("novote", "posthoc", "mdn")

DEFAULT_ABLATION = {
    "task": "within",
    "seeds": [0, 1, 2, 3, 4],
    "kernels": [
        {"family": "bilinear"},
        {"family": "gaussian", "kf": 5},
    ],
}


def run_variant(base: TrainConfig, variant: str, seed: int) -> TrainResult:
    return train(replace(base, variant=variant, seed=seed))


def ablation_rows(config: dict, threads: int = 1, progress=None) -> list[dict]:
    """Sweep training variants x kernels, averaging metrics over seeds.

    Returns one row per (variant, kernel) with mean/std PCK and mean
    localization error. The no-voting variant ignores the kernel, so it is
    reported once under the label "none".
    """
    seeds = config.get("seeds", DEFAULT_ABLATION["seeds"])
    kernels = [
        # kernel_from_dict lives in config; route dictionaries through the
        # same validation the single-run path uses.
        train_config_from_dict({**config, "kernel": k}, threads=threads).kernel
        for k in config.get("kernels", DEFAULT_ABLATION["kernels"])
    ]
    variants = config.get("variants", list(ABLATION_VARIANTS))
    rows = []
    for variant in variants:
        specs: list[KernelSpec | None] = [None] if variant == "novote" else kernels
        for spec in specs:
            pcks, errs = [], []
            for seed in seeds:
                cfg = train_config_from_dict(config, variant=variant, threads=threads)
                if spec is not None:
                    cfg = replace(cfg, kernel=spec)
                cfg = replace(cfg, seed=int(seed))
                result = train(cfg)
                pcks.append(result.final["pck"])
                errs.append(result.final["mean_err_mid"])
                if progress is not None:
                    progress(variant, spec, seed, result)
            rows.append(
                {
                    "variant": variant,
                    "kernel": "none" if spec is None else kernel_label(spec),
                    "mean_pck": float(np.mean(pcks)),
                    "std_pck": float(np.std(pcks)),
                    "mean_err": float(np.mean(errs)),
                    "seeds": len(pcks),
                }
            )
    return rows


def ablation_csv(rows: list[dict]) -> str:
    cols = ["variant", "kernel", "mean_pck", "std_pck", "mean_err", "seeds"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(
            ",".join(
                str(row[c]) if isinstance(row[c], (int, str)) else f"{row[c]:.6f}" for c in cols
            )
        )
    return "\n".join(lines) + "\n"


def cross_recovery_rows(seeds, steps: int | None = None, threads: int = 1, progress=None
                        ) -> list[dict]:
    """Occluded-middle-joint localization error: voting vs. plain argmax."""
    steps = steps if steps is not None else TASK_DEFAULTS["cross"]["steps"]
    rows = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for variant in ("novote", "mdn"):
            cfg = train_config_from_dict(
                {"task": "cross", "train": {"steps": steps, "seed": int(seed)}},
                variant=variant,
                threads=threads,
            )
            result = train(cfg)
            row[f"err_{variant}"] = result.final["mean_err_mid"]
            if progress is not None:
                progress(variant, None, seed, result)
        row["mdn_wins"] = bool(row["err_mdn"] < row["err_novote"])
        rows.append(row)
    return rows
