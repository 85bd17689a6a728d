"""Acceptance suite: one test per release criterion, strictest tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion. The two training criteria (6 and 7) retrain everything from
scratch and dominate the runtime (tens of minutes single-threaded).
"""

import time

import numpy as np
import pytest

from massdisp import (
    ADDITIVE,
    BILINEAR,
    GAUSSIAN,
    MAX,
    MODES,
    NOISY_OR,
    KernelSpec,
    displacement_from_arrays,
    field_from_array,
    new_field,
    vote_backward,
    vote_forward,
    within_graph,
)
from massdisp.experiments import ablation_rows, cross_recovery_rows
from massdisp.toynet import TrainConfig, train
from massdisp.verify import brute_conv_oracle, exhaustive_noisyor_oracle, finite_diff_check
from massdisp.voting import fd_safety_masks


def report(number: int, description: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:2d} [{status}] {description}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert passed, line


def random_instance(seed, h=8, w=8, c_hi=0.95, off=2.5):
    rng = np.random.default_rng(seed)
    g = within_graph(1)
    c = field_from_array(rng.uniform(0.05, c_hi, (1, h, w)))
    o = displacement_from_arrays(
        rng.uniform(-off, off, (1, h, w)), rng.uniform(-off, off, (1, h, w))
    )
    return c, o, g, rng


def test_criterion_1_gradient_suite():
    """Analytic backward matches central differences for every mode x kernel."""
    start = time.perf_counter()
    worst = 0.0
    detail = []
    for mode in MODES:
        for spec in (KernelSpec(GAUSSIAN, 5), KernelSpec(BILINEAR, 2)):
            c, o, g, rng = random_instance(42)
            delta = field_from_array(rng.normal(0, 1, (1, 8, 8)))

            def fn(inputs):
                cf = field_from_array(inputs[0].reshape(1, 8, 8))
                of = displacement_from_arrays(
                    inputs[1].reshape(1, 8, 8), inputs[2].reshape(1, 8, 8)
                )
                m, ctx = vote_forward(cf, of, spec, mode, g)
                value = float(np.sum(delta.data * m.data))
                gc, gx, gy = vote_backward(delta, cf, of, spec, mode, g, ctx)
                return value, [gc.data.ravel(), gx.data.ravel(), gy.data.ravel()]

            masks = None
            if spec.family == BILINEAR:
                sc, sx, sy = fd_safety_masks(c, o, spec, g)
                masks = [sc.ravel(), sx.ravel(), sy.ravel()]
            rep = finite_diff_check(
                fn,
                [c.data.ravel(), o.ox.data.ravel(), o.oy.data.ravel()],
                skip_masks=masks,
            )
            worst = max(worst, rep.max_rel_err)
            detail.append(f"{mode}/{spec.family}={rep.max_rel_err:.2e}")
            assert rep.passed, f"{mode}/{spec.family}: {rep.to_json()}"
    elapsed = time.perf_counter() - start
    report(
        1,
        "gradient suite matches finite differences (<1e-5)",
        worst < 1e-5 and elapsed < 5.0,
        f"worst={worst:.2e}, {elapsed:.2f}s",
    )


def test_criterion_2_noisyor_range_validity():
    """10,000 random noisy-OR evaluations stay inside [0, 1]."""
    rng = np.random.default_rng(1234)
    specs = [KernelSpec(GAUSSIAN, 3), KernelSpec(GAUSSIAN, 5), KernelSpec(BILINEAR, 2)]
    violations = 0
    lo, hi = np.inf, -np.inf
    for i in range(10_000):
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        g = within_graph(1)
        # mix interior values with exact 0s and 1s
        c_data = rng.uniform(0, 1, (1, h, w))
        mask = rng.random((1, h, w))
        c_data[mask < 0.15] = 0.0
        c_data[mask > 0.85] = 1.0
        c = field_from_array(c_data)
        o = displacement_from_arrays(
            rng.uniform(-3, 3, (1, h, w)), rng.uniform(-3, 3, (1, h, w))
        )
        m, _ = vote_forward(c, o, specs[i % 3], NOISY_OR, g)
        lo = min(lo, m.data.min())
        hi = max(hi, m.data.max())
        if m.data.min() < 0.0 or m.data.max() > 1.0:
            violations += 1
    report(
        2,
        "10,000 noisy-OR evaluations in [0,1] with zero violations",
        violations == 0,
        f"range [{lo:.3e}, {hi:.17f}]",
    )


def test_criterion_3_concentrated_evidence():
    """Normalized-kernel delta cap and the >1 vs <1 split of the two rules."""
    # (a) delta input, normalized gaussian sigma=1, additive: peak 1/(2*pi)
    g = within_graph(1)
    data = np.zeros((1, 9, 9))
    data[0, 4, 4] = 1.0
    spec_norm = KernelSpec(GAUSSIAN, 5, sigma=1.0, normalized=True)
    zero = displacement_from_arrays(np.zeros((1, 9, 9)), np.zeros((1, 9, 9)))
    m, _ = vote_forward(field_from_array(data), zero, spec_norm, ADDITIVE, g)
    peak = m.data[0, 4, 4]
    ok_a = abs(peak - 1.0 / (2.0 * np.pi)) <= 1e-9

    # (b) full confidence, all offsets onto one pixel, unnormalized k_f=5
    h = w = 8
    c = new_field(h, w, 1, 1.0)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    o = displacement_from_arrays(
        (4.0 - xs)[None].astype(float), (4.0 - ys)[None].astype(float)
    )
    spec = KernelSpec(GAUSSIAN, 5)
    m_add, _ = vote_forward(c, o, spec, ADDITIVE, g)
    m_nor, _ = vote_forward(c, o, spec, NOISY_OR, g)
    ok_b = m_add.data[0, 4, 4] > 1.0 and m_nor.data[0, 4, 4] < 1.0
    report(
        3,
        "concentrated evidence: normalized cap 1/(2*pi), additive >1, noisy-OR <1",
        ok_a and ok_b,
        f"peak={peak:.12f}, add={m_add.data[0, 4, 4]:.1f}, nor={m_nor.data[0, 4, 4]:.17f}",
    )


def test_criterion_4_first_order_agreement():
    """Additive is the first-order expansion of noisy-OR: quadratic gap."""
    worst_ratio = 0.0
    for seed in range(20):
        c, o, g, _ = random_instance(seed, h=8, w=8)
        diffs = {}
        for eps in (1e-2, 1e-3):
            scaled = field_from_array(c.data * eps)
            m_add, _ = vote_forward(scaled, o, KernelSpec(GAUSSIAN, 5), ADDITIVE, g)
            m_nor, _ = vote_forward(scaled, o, KernelSpec(GAUSSIAN, 5), NOISY_OR, g)
            diffs[eps] = np.abs(m_add.data - m_nor.data).max()
        assert diffs[1e-3] <= diffs[1e-2] / 50.0, f"seed {seed}: {diffs}"
        worst_ratio = max(worst_ratio, diffs[1e-3] / diffs[1e-2])
    report(
        4,
        "noisy-OR vs additive gap shrinks quadratically with confidence scale",
        worst_ratio <= 1 / 50.0,
        f"worst ratio {worst_ratio:.4f} (quadratic predicts 0.01)",
    )


def test_criterion_5_oracle_equivalence():
    """Fast scatter path equals the exhaustive gather oracles to 1e-12."""
    worst_nor = 0.0
    worst_conv = 0.0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        g = within_graph(2)
        c = field_from_array(rng.uniform(0, 1, (2, 6, 6)))
        o = displacement_from_arrays(
            rng.uniform(-2, 2, (2, 6, 6)), rng.uniform(-2, 2, (2, 6, 6))
        )
        spec = [KernelSpec(GAUSSIAN, 3), KernelSpec(GAUSSIAN, 5), KernelSpec(BILINEAR, 2)][
            seed % 3
        ]
        m, _ = vote_forward(c, o, spec, NOISY_OR, g)
        oracle = exhaustive_noisyor_oracle(c, o, spec, g)
        worst_nor = max(worst_nor, float(np.abs(m.data - oracle.data).max()))

        zero = displacement_from_arrays(np.zeros((2, 6, 6)), np.zeros((2, 6, 6)))
        m_add, _ = vote_forward(c, zero, spec, ADDITIVE, g)
        conv = brute_conv_oracle(c, spec)
        worst_conv = max(worst_conv, float(np.abs(m_add.data - conv.data).max()))
    report(
        5,
        "oracle equivalence (noisy-OR exhaustive, zero-offset convolution)",
        worst_nor < 1e-12 and worst_conv < 1e-12,
        f"nor={worst_nor:.2e}, conv={worst_conv:.2e}",
    )


def test_criterion_6_within_part_ordering():
    """End-to-end voting >= post-hoc voting >= no voting on held-out PCK."""
    config = {
        "task": "within",
        "seeds": [0, 1, 2, 3, 4],
        "kernels": [{"family": "gaussian", "kf": 5}],
    }
    t0 = time.perf_counter()
    per_run = []

    def progress(variant, spec, seed, result):
        per_run.append(time.perf_counter() - t0 - sum(per_run))

    rows = {r["variant"]: r for r in ablation_rows(config, progress=progress)}
    mdn = rows["mdn"]["mean_pck"]
    posthoc = rows["posthoc"]["mean_pck"]
    novote = rows["novote"]["mean_pck"]
    ok = (
        mdn >= posthoc >= novote
        and mdn - novote >= 0.02
        and mdn >= 0.9
        and max(per_run) <= 600.0
    )
    report(
        6,
        "within-part ordering mdn >= posthoc >= novote (PCK@2px)",
        ok,
        f"mdn={mdn:.4f}, posthoc={posthoc:.4f}, novote={novote:.4f}, "
        f"slowest run {max(per_run):.0f}s",
    )


def test_criterion_7_cross_part_recovery():
    """Cross-voting recovers the occluded middle joint better than argmax."""
    rows = cross_recovery_rows(seeds=range(5))
    wins = sum(r["mdn_wins"] for r in rows)
    detail = ", ".join(
        f"s{r['seed']}: {r['err_mdn']:.2f} vs {r['err_novote']:.2f}" for r in rows
    )
    report(7, "occluded-joint recovery wins in >=4 of 5 seeds", wins >= 4, detail)


def test_criterion_8_translation_equivariance():
    """Integer shifts of all inputs shift the outputs exactly (interior)."""
    rng = np.random.default_rng(5)
    h = w = 16
    margin, dy, dx = 6, 2, 3
    g = within_graph(1)
    c_data = np.zeros((1, h, w))
    c_data[0, margin : h - margin, margin : w - margin] = rng.uniform(
        0.05, 0.95, (h - 2 * margin, w - 2 * margin)
    )
    ox = rng.uniform(-1.5, 1.5, (1, h, w))
    oy = rng.uniform(-1.5, 1.5, (1, h, w))
    worst = 0.0
    for mode in MODES:
        for spec in (KernelSpec(GAUSSIAN, 5), KernelSpec(BILINEAR, 2)):
            m, _ = vote_forward(
                field_from_array(c_data), displacement_from_arrays(ox, oy), spec, mode, g
            )
            m_s, _ = vote_forward(
                field_from_array(np.roll(np.roll(c_data, dy, 1), dx, 2)),
                displacement_from_arrays(
                    np.roll(np.roll(ox, dy, 1), dx, 2), np.roll(np.roll(oy, dy, 1), dx, 2)
                ),
                spec,
                mode,
                g,
            )
            expected = np.roll(np.roll(m.data, dy, 1), dx, 2)
            worst = max(worst, float(np.abs(m_s.data - expected).max()))
    report(8, "integer translation equivariance (exact)", worst < 1e-12, f"worst={worst:.2e}")


def test_criterion_9_determinism_and_parallel_agreement():
    """Same seed, one thread: identical logs. Threads agree to 1e-10."""
    cfg = TrainConfig(task="within", variant="mdn", steps=40, seed=11,
                      eval_every=20, eval_limit=25)
    log_a = train(cfg).metrics_csv()
    log_b = train(cfg).metrics_csv()
    identical = log_a == log_b

    worst = 0.0
    rng = np.random.default_rng(77)
    for seed in range(5):
        c, o, g, _ = random_instance(seed, h=16, w=16)
        for mode in MODES:
            spec = KernelSpec(GAUSSIAN, 5)
            m1, ctx1 = vote_forward(c, o, spec, mode, g, threads=1)
            m4, ctx4 = vote_forward(c, o, spec, mode, g, threads=4)
            denom = np.maximum(np.abs(m1.data), 1e-8)
            worst = max(worst, float((np.abs(m4.data - m1.data) / denom).max()))
            delta = field_from_array(rng.normal(0, 1, m1.shape))
            g1 = vote_backward(delta, c, o, spec, mode, g, ctx1, threads=1)
            g4 = vote_backward(delta, c, o, spec, mode, g, ctx4, threads=4)
            for a, b in zip(g1, g4):
                denom = np.maximum(np.abs(a.data), 1e-8)
                worst = max(worst, float((np.abs(b.data - a.data) / denom).max()))
    report(
        9,
        "bit-identical logs on one thread; parallel path within 1e-10",
        identical and worst < 1e-10,
        f"logs identical={identical}, parallel worst rel={worst:.2e}",
    )
