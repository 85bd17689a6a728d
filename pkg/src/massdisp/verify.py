"""Independent oracles: finite-difference gradient checks, an exhaustive
noisy-OR evaluator, and a direct-convolution reference.

These deliberately avoid the scatter/log-domain machinery of the fast path:
the noisy-OR oracle gathers per output pixel and multiplies survivals in
linear space, and the convolution oracle is a padded shift-and-sum. Keeping
the routes independent is what makes agreement between them evidence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import SizeError
from .field import DisplacementField, ScalarField
from .kernels import GAUSSIAN, KernelSpec, kernel_weight, support_window
from .voting import CLAMP_LIMIT, VoteGraph

_ORACLE_MAX_SIDE = 16


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_err: float
    worst_input: int
    worst_coord: int
    analytic_at_worst: float
    numeric_at_worst: float
    checked: int
    skipped: int
    tol: float
    step: float
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(fn, inputs, h: float = 1e-6, tol: float = 1e-5, skip_masks=None
                      ) -> FiniteDiffReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn(inputs) -> (value, grads)`` must be pure and deterministic, with one
    gradient array per input. ``skip_masks`` optionally marks coordinates to
    leave unchecked (e.g. bilinear kinks); they count into ``skipped``.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, grads = fn(inputs)
    if len(grads) != len(inputs):
        raise ValueError("fn must return one gradient per input")
    worst = FiniteDiffReport(True, 0.0, -1, -1, 0.0, 0.0, 0, 0, tol, h)
    for idx, (x, g) in enumerate(zip(inputs, grads)):
        g = np.asarray(g, dtype=np.float64)
        skip = None if skip_masks is None else np.asarray(skip_masks[idx], dtype=bool).ravel()
        flat = x.ravel()
        for coord in range(flat.size):
            if skip is not None and skip[coord]:
                worst.skipped += 1
                continue
            orig = flat[coord]
            flat[coord] = orig + h
            up, _ = fn(inputs)
            flat[coord] = orig - h
            down, _ = fn(inputs)
            flat[coord] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                worst.passed = False
                worst.note = f"non-finite evaluation at input {idx}, coordinate {coord}"
                return worst
            numeric = float((up - down) / (2.0 * h))
            analytic = float(g.ravel()[coord])
            err = rel_err(analytic, numeric)
            worst.checked += 1
            if err > worst.max_rel_err:
                worst.max_rel_err = err
                worst.worst_input = idx
                worst.worst_coord = coord
                worst.analytic_at_worst = analytic
                worst.numeric_at_worst = numeric
    worst.passed = bool(worst.max_rel_err < tol)
    return worst


def exhaustive_noisyor_oracle(
    c: ScalarField, o: DisplacementField, spec: KernelSpec, graph: VoteGraph
) -> ScalarField:
    """Noisy-OR voting by brute force: per output pixel, multiply survival
    factors over every (input pixel, edge) pair, truncating the kernel the
    same way the fast path does but with no other shortcuts.
    """
    height, width = c.height, c.width
    if height > _ORACLE_MAX_SIDE or width > _ORACLE_MAX_SIDE:
        raise SizeError(f"oracle limited to {_ORACLE_MAX_SIDE}x{_ORACLE_MAX_SIDE} grids")
    survival = np.ones((graph.num_joints, height, width))
    for e, (j, k) in enumerate(graph.edges):
        for py in range(height):
            for px in range(width):
                conf = c.data[j, py, px]
                tx = px + o.ox.data[e, py, px]
                ty = py + o.oy.data[e, py, px]
                for qx, qy in support_window(spec, (tx, ty), (height, width)):
                    w = kernel_weight(spec, (qx - tx, qy - ty))
                    wc = min(w * conf, CLAMP_LIMIT)
                    survival[k, qy, qx] *= 1.0 - wc
    return ScalarField(1.0 - survival)


def brute_conv_oracle(c: ScalarField, spec: KernelSpec) -> ScalarField:
    """Direct dense 2-D convolution with the truncated kernel image.

    This is what additive voting reduces to when all offsets are zero.
    """
    if spec.family == GAUSSIAN:
        h = spec.half
        taps = [(dy, dx, kernel_weight(spec, (dx, dy)))
                for dy in range(-h, h + 1) for dx in range(-h, h + 1)]
    else:
        taps = [(0, 0, 1.0)]
        h = 0
    height, width = c.height, c.width
    padded = np.zeros((c.channels, height + 2 * h, width + 2 * h))
    padded[:, h : h + height, h : h + width] = c.data
    out = np.zeros(c.shape)
    for dy, dx, w in taps:
        out += w * padded[:, h - dy : h - dy + height, h - dx : h - dx + width]
    return ScalarField(out)
