"""Command-line driver: gradient checks, demos, training, ablation, bench.

Every subcommand is deterministic given its --seed and writes machine-
readable outputs (JSON / CSV / PGM) plus rendered PNG figures next to them.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthdata
from .config import canonical_mode, load_config, train_config_from_dict
from .demo import SHAPES, run_demo
from .errors import MassDispError
from .experiments import DEFAULT_ABLATION, ablation_csv, ablation_rows, cross_recovery_rows
from .field import displacement_from_arrays, export_pgm, field_from_array, save_mdnf
from .figures import (
    save_ablation_figure,
    save_demo_panel,
    save_scene_figure,
    save_training_figure,
)
from .kernels import BILINEAR, GAUSSIAN, KernelSpec
from .toynet import train
from .verify import brute_conv_oracle, exhaustive_noisyor_oracle, finite_diff_check
from .voting import ADDITIVE, NOISY_OR, fd_safety_masks, vote_backward, vote_forward, within_graph


def _add_kernel_args(parser: argparse.ArgumentParser):
    parser.add_argument("--kernel", choices=[GAUSSIAN, BILINEAR], default=GAUSSIAN)
    parser.add_argument("--kf", type=int, default=5, help="gaussian support size")
    parser.add_argument("--sigma", type=float, default=None, help="gaussian bandwidth")
    parser.add_argument("--normalized", action="store_true", help="density-normalized gaussian")


def _kernel_from_args(args) -> KernelSpec:
    if args.kernel == BILINEAR:
        return KernelSpec(BILINEAR, 2)
    return KernelSpec(GAUSSIAN, args.kf, sigma=args.sigma, normalized=args.normalized)


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gradcheck(args) -> int:
    mode = canonical_mode(args.mode)
    spec = _kernel_from_args(args)
    graph = within_graph(1)
    h = w = 8
    rng = np.random.default_rng(args.seed)
    c = field_from_array(rng.uniform(0.05, 0.95, (1, h, w)))
    o = displacement_from_arrays(
        rng.uniform(-2.5, 2.5, (1, h, w)), rng.uniform(-2.5, 2.5, (1, h, w))
    )
    delta = field_from_array(rng.normal(0.0, 1.0, (1, h, w)))

    def fn(inputs):
        cf = field_from_array(inputs[0].reshape(1, h, w))
        of = displacement_from_arrays(inputs[1].reshape(1, h, w), inputs[2].reshape(1, h, w))
        m, ctx = vote_forward(cf, of, spec, mode, graph, threads=args.threads)
        value = float(np.sum(delta.data * m.data))
        gc, gx, gy = vote_backward(delta, cf, of, spec, mode, graph, ctx, threads=args.threads)
        return value, [gc.data.ravel(), gx.data.ravel(), gy.data.ravel()]

    sc, sx, sy = fd_safety_masks(c, o, spec, graph)
    report = finite_diff_check(
        fn,
        [c.data.ravel(), o.ox.data.ravel(), o.oy.data.ravel()],
        skip_masks=[sc.ravel(), sx.ravel(), sy.ravel()],
    )
    m_nor, _ = vote_forward(c, o, spec, NOISY_OR, graph)
    nor_diff = float(
        np.abs(m_nor.data - exhaustive_noisyor_oracle(c, o, spec, graph).data).max()
    )
    zero = displacement_from_arrays(np.zeros((1, h, w)), np.zeros((1, h, w)))
    m_add, _ = vote_forward(c, zero, spec, ADDITIVE, graph)
    conv_diff = float(np.abs(m_add.data - brute_conv_oracle(c, spec).data).max())
    passed = report.passed and nor_diff < 1e-12 and conv_diff < 1e-12
    print(
        json.dumps(
            {
                "mode": mode,
                "kernel": {"family": spec.family, "kf": spec.k_f, "sigma": spec.sigma},
                "finite_diff": json.loads(report.to_json()),
                "noisyor_oracle_max_abs_diff": nor_diff,
                "conv_oracle_max_abs_diff": conv_diff,
                "passed": passed,
            },
            indent=2,
        )
    )
    return 0 if passed else 1


def cmd_demo(args) -> int:
    spec = _kernel_from_args(args)
    mode = canonical_mode(args.mode)
    out = _outdir(args.out)
    mass, offsets, voted, _ = run_demo(args.shape, spec, mode, threads=args.threads)
    export_pgm(mass, 0, out / f"{args.shape}_mass.pgm")
    export_pgm(offsets.ox, 0, out / f"{args.shape}_offset_x.pgm")
    export_pgm(offsets.oy, 0, out / f"{args.shape}_offset_y.pgm")
    export_pgm(voted, 0, out / f"{args.shape}_voted.pgm")
    save_mdnf(voted, out / f"{args.shape}_voted.mdnf")
    save_demo_panel(mass, offsets, voted, f"{args.shape} ({mode}, {spec.family})",
                    out / f"{args.shape}_panel.png")
    bright_in = int((mass.data > 0.5 * mass.data.max()).sum())
    bright_out = int((voted.data > 0.5 * voted.data.max()).sum())
    print(f"{args.shape}: bright support {bright_in} px -> {bright_out} px; wrote {out}")
    return 0


def cmd_train(args) -> int:
    out = _outdir(args.out)
    cfg_dict = {
        "task": args.task,
        "mode": args.mode,
        "kernel": {
            "family": args.kernel,
            "kf": args.kf,
            "sigma": args.sigma,
            "normalized": args.normalized,
        },
        "train": {
            "steps": args.steps,
            "seed": args.seed,
            "eval_every": args.eval_every,
        },
    }
    if args.mode is None:
        del cfg_dict["mode"]
    if args.steps is None:
        del cfg_dict["train"]["steps"]
    cfg = train_config_from_dict(cfg_dict, variant=args.variant, threads=args.threads)
    result = train(cfg)
    (out / "metrics.csv").write_text(result.metrics_csv())
    save_training_figure(result.metrics, out / "training.png")

    scene = (
        synthdata.gen_within(synthdata.EVAL_SEED_START)
        if cfg.task == "within"
        else synthdata.gen_cross(synthdata.EVAL_SEED_START, occlude=True)
    )
    model = result.model
    pred = model.predict(scene.image)
    conf, offsets = model.heads(scene.image)
    export_pgm(scene.image, 0, out / "scene.pgm")
    panels = [(scene.image.data[0], "input")]
    for j in range(conf.channels):
        export_pgm(conf, j, out / f"confidence_j{j}.pgm")
        export_pgm(pred, j, out / f"localization_j{j}.pgm")
        panels.append((conf.data[j], f"confidence {j}"))
        panels.append((pred.data[j], f"localization {j}"))
    for e in range(offsets.channels):
        export_pgm(offsets.ox, e, out / f"offset_x_e{e}.pgm")
        export_pgm(offsets.oy, e, out / f"offset_y_e{e}.pgm")
    save_scene_figure(panels, out / "sample_fields.png")
    final = result.final
    print(
        f"task={cfg.task} variant={cfg.variant} mode={cfg.mode} steps={cfg.steps} "
        f"seed={cfg.seed}: pck@{cfg.pck_tol}px={final['pck']:.4f} "
        f"mean_err={final['mean_err_mid']:.3f}px -> {out}"
    )
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config) if args.config else dict(DEFAULT_ABLATION)
    out = _outdir(args.out)

    def progress(variant, spec, seed, result):
        label = spec.family if spec is not None else "none"
        print(
            f"  {variant:8s} kernel={label:9s} seed={seed}: "
            f"pck={result.final['pck']:.3f} err={result.final['mean_err_mid']:.2f}px",
            flush=True,
        )

    rows = ablation_rows(config, threads=args.threads, progress=progress)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    save_ablation_figure(rows, out / "ablation.png")
    for row in rows:
        print(
            f"{row['variant']:8s} {row['kernel']:13s} mean_pck={row['mean_pck']:.4f} "
            f"std={row['std_pck']:.4f} mean_err={row['mean_err']:.3f}px"
        )
    if config.get("task", "within") == "cross" and args.recovery:
        rec = cross_recovery_rows(config.get("seeds", DEFAULT_ABLATION["seeds"]),
                                  threads=args.threads)
        wins = sum(r["mdn_wins"] for r in rec)
        print(f"cross recovery: voting beats argmax in {wins}/{len(rec)} seeds")
    print(f"wrote {out / 'ablation.csv'} and {out / 'ablation.png'}")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rng = np.random.default_rng(args.seed)
    graph = within_graph(1)
    lines = ["size,mode,family,kf,forward_s,backward_s,votes_per_s"]
    for size in sizes:
        c = field_from_array(rng.uniform(0.05, 0.95, (1, size, size)))
        o = displacement_from_arrays(
            rng.uniform(-3, 3, (1, size, size)), rng.uniform(-3, 3, (1, size, size))
        )
        delta = field_from_array(rng.normal(0, 1, (1, size, size)))
        for mode in (ADDITIVE, NOISY_OR, "max"):
            for spec in (KernelSpec(GAUSSIAN, 5), KernelSpec(BILINEAR, 2)):
                reps = max(1, args.reps)
                t0 = time.perf_counter()
                for _ in range(reps):
                    m, ctx = vote_forward(c, o, spec, mode, graph, threads=args.threads)
                fwd = (time.perf_counter() - t0) / reps
                t0 = time.perf_counter()
                for _ in range(reps):
                    vote_backward(delta, c, o, spec, mode, graph, ctx, threads=args.threads)
                bwd = (time.perf_counter() - t0) / reps
                votes = size * size / (fwd + bwd)
                lines.append(
                    f"{size},{mode},{spec.family},{spec.k_f},{fwd:.6f},{bwd:.6f},{votes:.1f}"
                )
    csv = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv)
    print(csv, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="massdisp",
        description="Differentiable geometric voting: checks, demos, training, ablation.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for the voting operator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--mode", default="noisy_or",
                   help="additive | noisyor | max")
    _add_kernel_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("demo", help="render a hand-built displacement demo")
    p.add_argument("--shape", choices=SHAPES, required=True)
    p.add_argument("--out", default="demo_out")
    p.add_argument("--mode", default="noisy_or")
    _add_kernel_args(p)
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("train", help="train a toy voting network")
    p.add_argument("--task", choices=["within", "cross"], default="within")
    p.add_argument("--variant", choices=["novote", "posthoc", "mdn"], default="mdn")
    p.add_argument("--mode", default=None, help="defaults to the task preset")
    _add_kernel_args(p)
    p.add_argument("--steps", type=int, default=None, help="defaults to the task preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0, help="0 evaluates only at the end")
    p.add_argument("--out", default="train_out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="sweep variants x kernels, write a results table")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--out", default="ablate_out")
    p.add_argument("--recovery", action="store_true",
                   help="also run the occluded-joint recovery comparison (cross task)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="vote operator throughput")
    p.add_argument("--sizes", default="16,32,64", help="comma-separated grid sizes")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MassDispError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
