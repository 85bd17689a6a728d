"""Ground-truth target construction, training losses, and the PCK metric.

Targets live on the output grid. Disk targets mark a Chebyshev (square)
vicinity of half-width eps around each visible keypoint; offset targets
store, for every vicinity pixel of a vote edge's source joint, the
normalized displacement that lands exactly on the edge's target joint.
Invisible joints produce empty targets and are skipped by the metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .field import GradSignal, ScalarField
from .voting import VoteGraph

_BCE_EPS = 1e-7


@dataclass(frozen=True)
class KeypointSet:
    """Per-joint (x, y) positions in output-grid pixels plus visibility."""

    positions: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ShapeError(f"positions must be (num_joints, 2), got {pos.shape}")
        if vis.shape != (pos.shape[0],):
            raise ShapeError("visibility must have one flag per joint")
        if not np.all(np.isfinite(pos)):
            raise ShapeError("keypoint positions must be finite")
        pos.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "visible", vis)

    @property
    def num_joints(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class LossParams:
    eps_c: float = 4.0
    eps_m: float = 1.0
    huber_delta: float = 1.0
    gaussian_target_sigma: float = 1.0

    def __post_init__(self):
        for name in ("eps_c", "eps_m", "huber_delta", "gaussian_target_sigma"):
            if not getattr(self, name) > 0:
                raise ShapeError(f"{name} must be positive")
        if self.eps_m > self.eps_c:
            raise ShapeError("eps_m must not exceed eps_c")


def _grids(shape):
    height, width = shape
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return ys, xs


def make_disk_target(kps: KeypointSet, eps: float, shape) -> ScalarField:
    """Binary square disks of half-width ``eps`` around visible keypoints."""
    height, width = shape
    ys, xs = _grids(shape)
    target = np.zeros((kps.num_joints, height, width))
    for j in range(kps.num_joints):
        if not kps.visible[j]:
            continue
        x0, y0 = kps.positions[j]
        target[j] = ((np.abs(xs - x0) <= eps) & (np.abs(ys - y0) <= eps)).astype(np.float64)
    return ScalarField(target)


def make_gaussian_target(kps: KeypointSet, sigma: float, shape) -> ScalarField:
    """Unit-peak Gaussian bumps at visible keypoints."""
    if sigma <= 0:
        raise ShapeError("sigma must be positive")
    height, width = shape
    ys, xs = _grids(shape)
    target = np.zeros((kps.num_joints, height, width))
    for j in range(kps.num_joints):
        if not kps.visible[j]:
            continue
        x0, y0 = kps.positions[j]
        target[j] = np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) / (2.0 * sigma * sigma))
    return ScalarField(target)


def make_offset_target(
    kps: KeypointSet, graph: VoteGraph, eps_c: float, d: float, shape
) -> tuple[ScalarField, ScalarField, ScalarField]:
    """Normalized vote-offset targets and their supervision mask.

    For edge (j, k) and every pixel x in the eps_c-vicinity of joint j, the
    stored target satisfies x + d * target == position of joint k, i.e. a
    perfect prediction votes exactly onto the target joint.
    """
    if d <= 0:
        raise ShapeError("offset normalizer d must be positive")
    height, width = shape
    ys, xs = _grids(shape)
    num_edges = graph.num_edges
    ox = np.zeros((num_edges, height, width))
    oy = np.zeros((num_edges, height, width))
    mask = np.zeros((num_edges, height, width))
    for e, (j, k) in enumerate(graph.edges):
        if not (kps.visible[j] and kps.visible[k]):
            continue
        xj, yj = kps.positions[j]
        xk, yk = kps.positions[k]
        vicinity = (np.abs(xs - xj) <= eps_c) & (np.abs(ys - yj) <= eps_c)
        ox[e][vicinity] = (xk - xs[vicinity]) / d
        oy[e][vicinity] = (yk - ys[vicinity]) / d
        mask[e][vicinity] = 1.0
    return ScalarField(ox), ScalarField(oy), ScalarField(mask)


def bce_loss(pred: ScalarField, target: ScalarField) -> tuple[float, GradSignal]:
    """Mean pixelwise binary cross entropy and its gradient.

    Predictions are clamped to [1e-7, 1 - 1e-7] and the gradient is taken at
    the clamped value, so saturated predictions keep a restoring gradient.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    t = target.data
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    n = p.size
    loss = float(-np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n)
    grad = (p - t) / (p * (1.0 - p)) / n
    return loss, ScalarField(grad)


def huber_loss_masked(
    pred: ScalarField, target: ScalarField, mask: ScalarField, delta: float = 1.0
) -> tuple[float, GradSignal]:
    """Huber loss averaged over masked pixels; zero everywhere else."""
    if not (pred.shape == target.shape == mask.shape):
        raise ShapeError("prediction, target and mask shapes must match")
    m = mask.data > 0
    count = int(m.sum())
    if count == 0:
        return 0.0, ScalarField(np.zeros(pred.shape))
    r = np.where(m, pred.data - target.data, 0.0)
    absr = np.abs(r)
    quad = absr <= delta
    per_pixel = np.where(quad, 0.5 * r * r, delta * (absr - 0.5 * delta))
    loss = float(per_pixel[m].sum() / count)
    grad = np.where(m, np.where(quad, r, delta * np.sign(r)) / count, 0.0)
    return loss, ScalarField(grad)


def mse_loss(pred: ScalarField, target: ScalarField) -> tuple[float, GradSignal]:
    """Mean squared error and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    r = pred.data - target.data
    n = r.size
    return float(np.sum(r * r) / n), ScalarField(2.0 * r / n)


def argmax_positions(pred: ScalarField) -> np.ndarray:
    """Per-channel argmax as (x, y); ties resolve to the lowest linear index."""
    out = np.zeros((pred.channels, 2))
    for j in range(pred.channels):
        flat = int(np.argmax(pred.data[j]))
        out[j, 0] = flat % pred.width
        out[j, 1] = flat // pred.width
    return out


def localization_errors(pred: ScalarField, kps: KeypointSet) -> np.ndarray:
    """Euclidean argmax-to-truth distance per joint (NaN when invisible)."""
    if pred.channels != kps.num_joints:
        raise ShapeError("prediction channels must match keypoint count")
    peaks = argmax_positions(pred)
    err = np.hypot(*(peaks - kps.positions).T)
    return np.where(kps.visible, err, np.nan)


def pck_metric(pred: ScalarField, kps: KeypointSet, tol: float) -> float:
    """Fraction of visible joints localized within ``tol`` pixels.

    Returns NaN when no joint is visible.
    """
    err = localization_errors(pred, kps)
    vis = kps.visible
    if not vis.any():
        return math.nan
    return float(np.sum(err[vis] <= tol) / vis.sum())
