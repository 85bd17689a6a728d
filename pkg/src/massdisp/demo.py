"""Hand-constructed displacement demos: smooth mass, smooth offsets, sharp
votes. Each shape pairs a broad blob with an offset field that collapses it
onto a point, a line, a circle, or a translated copy."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .field import DisplacementField, ScalarField, displacement_from_arrays, field_from_array
from .kernels import KernelSpec
from .voting import NOISY_OR, VoteGraph, vote_forward, within_graph

SHAPES = ("point", "line", "curve", "transfer")
_SIZE = 64


def demo_fields(shape: str) -> tuple[ScalarField, DisplacementField]:
    """Input mass and offsets for one demo shape on a 64x64 grid."""
    if shape not in SHAPES:
        raise ConfigError(f"shape must be one of {SHAPES}, got {shape!r}")
    ys, xs = np.meshgrid(np.arange(_SIZE), np.arange(_SIZE), indexing="ij")
    cx = cy = _SIZE / 2.0
    if shape == "transfer":
        cx, cy = 20.0, 40.0
    mass = 0.9 * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * 9.0**2))

    if shape == "point":
        ox = cx - xs
        oy = cy - ys
    elif shape == "line":
        ox = cx - xs
        oy = np.zeros_like(ys, dtype=float)
    elif shape == "curve":
        radius = 16.0
        dx = xs - cx
        dy = ys - cy
        dist = np.maximum(np.hypot(dx, dy), 1e-9)
        ox = dx * (radius / dist - 1.0)
        oy = dy * (radius / dist - 1.0)
    else:  # transfer: rigidly displace the mass elsewhere
        ox = np.full_like(ys, 24.0, dtype=float)
        oy = np.full_like(ys, -14.0, dtype=float)

    return field_from_array(mass), displacement_from_arrays(ox[None], oy[None])


def run_demo(shape: str, spec: KernelSpec | None = None, mode: str = NOISY_OR,
             threads: int = 1):
    """Returns (mass, offsets, voted, graph) for the requested shape."""
    spec = spec or KernelSpec("gaussian", 5)
    graph: VoteGraph = within_graph(1)
    mass, offsets = demo_fields(shape)
    voted, _ = vote_forward(mass, offsets, spec, mode, graph, threads=threads)
    return mass, offsets, voted, graph
