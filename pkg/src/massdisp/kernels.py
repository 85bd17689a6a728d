"""Vote-dilation kernels: evaluation, derivatives, and support windows.

Two families are supported. The truncated Gaussian spreads a vote over a
k_f×k_f window centred on the rounded continuous target while evaluating
the kernel at exact continuous distances, so sub-pixel gradients survive
truncation. The bilinear kernel splits a vote over the (at most four)
integer neighbours of the target, exactly like a backward warping tap.

With ``normalized=False`` (the default, and the setting every training
path uses) the Gaussian satisfies K(0)=1, so a fully confident vote landing
exactly on a pixel supports it with weight 1. ``normalized=True`` rescales
by 1/(2πσ²); it exists to demonstrate how a density-style kernel caps the
support a perfectly confident, perfectly localized vote can deliver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

GAUSSIAN = "gaussian"
BILINEAR = "bilinear"

_GAUSSIAN_SIZES = (3, 5, 7, 9, 11, 13)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    k_f: int = 5
    sigma: float | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.family == GAUSSIAN:
            if self.k_f not in _GAUSSIAN_SIZES:
                raise ShapeError(f"gaussian k_f must be one of {_GAUSSIAN_SIZES}, got {self.k_f}")
            sigma = self.sigma if self.sigma is not None else self.k_f / 4.0
            if not (sigma > 0 and math.isfinite(sigma)):
                raise ShapeError(f"sigma must be positive and finite, got {sigma!r}")
            object.__setattr__(self, "sigma", float(sigma))
        elif self.family == BILINEAR:
            if self.k_f != 2:
                raise ShapeError(f"bilinear kernels have fixed support 2, got k_f={self.k_f}")
            if self.normalized:
                raise ShapeError("normalization applies only to the gaussian family")
            object.__setattr__(self, "sigma", None)
        else:
            raise ShapeError(f"unknown kernel family {self.family!r}")

    @property
    def half(self) -> int:
        """Half-width of the scatter window (gaussian only)."""
        return (self.k_f - 1) // 2

    @property
    def norm_factor(self) -> float:
        if self.family == GAUSSIAN and self.normalized:
            return 1.0 / (2.0 * math.pi * self.sigma * self.sigma)
        return 1.0


def kernel_weight(spec: KernelSpec, d) -> float:
    """Kernel value at displacement d = (d_x, d_y) from the vote target."""
    dx, dy = float(d[0]), float(d[1])
    if spec.family == GAUSSIAN:
        s2 = spec.sigma * spec.sigma
        return spec.norm_factor * math.exp(-(dx * dx + dy * dy) / (2.0 * s2))
    return max(0.0, 1.0 - abs(dx)) * max(0.0, 1.0 - abs(dy))


def kernel_grad(spec: KernelSpec, d) -> tuple[float, float]:
    """(∂K/∂d_x, ∂K/∂d_y) at displacement d.

    The bilinear kernel uses subgradient 0 at its kinks (|d| in {0, 1}).
    """
    dx, dy = float(d[0]), float(d[1])
    if spec.family == GAUSSIAN:
        s2 = spec.sigma * spec.sigma
        k = spec.norm_factor * math.exp(-(dx * dx + dy * dy) / (2.0 * s2))
        return (-dx / s2 * k, -dy / s2 * k)
    wx = max(0.0, 1.0 - abs(dx))
    wy = max(0.0, 1.0 - abs(dy))
    gx = -math.copysign(1.0, dx) * wy if 0.0 < abs(dx) < 1.0 else 0.0
    gy = -math.copysign(1.0, dy) * wx if 0.0 < abs(dy) < 1.0 else 0.0
    return (gx, gy)


def support_window(spec: KernelSpec, target, grid: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer pixels (x, y) that can receive a vote aimed at ``target``.

    ``grid`` is (height, width). Pixels outside the grid are dropped, so the
    list may be empty for far out-of-bounds targets.
    """
    tx, ty = float(target[0]), float(target[1])
    height, width = grid
    pixels: list[tuple[int, int]] = []
    if spec.family == GAUSSIAN:
        cx = int(math.floor(tx + 0.5))
        cy = int(math.floor(ty + 0.5))
        h = spec.half
        for y in range(cy - h, cy + h + 1):
            if not 0 <= y < height:
                continue
            for x in range(cx - h, cx + h + 1):
                if 0 <= x < width:
                    pixels.append((x, y))
        return pixels
    xs = sorted({int(math.floor(tx)), int(math.ceil(tx))})
    ys = sorted({int(math.floor(ty)), int(math.ceil(ty))})
    for y in ys:
        if not 0 <= y < height:
            continue
        for x in xs:
            if 0 <= x < width:
                pixels.append((x, y))
    return pixels


# ---------------------------------------------------------------------------
# Vectorized forms used by the voting operator. These accept arrays of
# displacements and must agree exactly with the scalar functions above.


def weight_array(spec: KernelSpec, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if spec.family == GAUSSIAN:
        s2 = spec.sigma * spec.sigma
        return spec.norm_factor * np.exp(-(dx * dx + dy * dy) / (2.0 * s2))
    return np.maximum(0.0, 1.0 - np.abs(dx)) * np.maximum(0.0, 1.0 - np.abs(dy))


def weight_grad_arrays(spec: KernelSpec, dx: np.ndarray, dy: np.ndarray):
    """(K, ∂K/∂d_x, ∂K/∂d_y) for displacement arrays."""
    if spec.family == GAUSSIAN:
        s2 = spec.sigma * spec.sigma
        k = spec.norm_factor * np.exp(-(dx * dx + dy * dy) / (2.0 * s2))
        return k, -dx / s2 * k, -dy / s2 * k
    ax = np.abs(dx)
    ay = np.abs(dy)
    wx = np.maximum(0.0, 1.0 - ax)
    wy = np.maximum(0.0, 1.0 - ay)
    k = wx * wy
    gx = np.where((ax > 0.0) & (ax < 1.0), -np.sign(dx) * wy, 0.0)
    gy = np.where((ay > 0.0) & (ay < 1.0), -np.sign(dy) * wx, 0.0)
    return k, gx, gy
