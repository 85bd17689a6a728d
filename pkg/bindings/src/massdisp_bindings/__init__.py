"""Plain-array boundary for the mass-displacement voting operator.

External training frameworks call the operator through flat, C-contiguous
float64 arrays with explicit shape tuples; nothing about the host library's
field types crosses the boundary. The forward call returns an opaque
integer context handle that the caller owns: backward may be invoked any
number of times while the handle is live (including from other threads),
and the handle must be released exactly once. Misuse (wrong dtype, stale or
double-released handles) raises :class:`BoundaryError` rather than
corrupting state. Inputs are copied on entry; outputs never alias caller
memory.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from massdisp import KernelSpec, MassDispError, VoteGraph
from massdisp.field import DisplacementField, ScalarField
from massdisp.voting import vote_backward, vote_forward

__all__ = [
    "BoundaryError",
    "bound_vote_forward",
    "bound_vote_backward",
    "release_context",
    "live_context_count",
]


class BoundaryError(ValueError):
    """Invalid data or handle usage at the array-interchange boundary."""


_lock = threading.Lock()
_handles = itertools.count(1)
_contexts: dict[int, tuple] = {}


def _take_array(name: str, value, shape: tuple) -> np.ndarray:
    if not isinstance(value, np.ndarray):
        raise BoundaryError(f"argument {name!r} must be a numpy array, got {type(value).__name__}")
    if value.dtype != np.float64:
        raise BoundaryError(f"argument {name!r} must be float64, got {value.dtype}")
    if not value.flags.c_contiguous:
        raise BoundaryError(f"argument {name!r} must be C-contiguous")
    shape = tuple(int(s) for s in shape)
    if value.shape != shape:
        raise BoundaryError(f"argument {name!r} has shape {value.shape}, declared {shape}")
    return value.copy()


def _make_spec(kernel_family: str, kernel_size: int, sigma, normalized: bool) -> KernelSpec:
    try:
        return KernelSpec(kernel_family, kernel_size, sigma=sigma, normalized=normalized)
    except MassDispError as exc:
        raise BoundaryError(f"invalid kernel specification: {exc}") from exc


def bound_vote_forward(
    c: np.ndarray,
    ox: np.ndarray,
    oy: np.ndarray,
    *,
    c_shape: tuple,
    o_shape: tuple,
    edges,
    num_joints: int,
    mode: str,
    kernel_family: str = "gaussian",
    kernel_size: int = 5,
    sigma: float | None = None,
    normalized: bool = False,
    threads: int = 1,
) -> tuple[np.ndarray, int]:
    """Run the voting forward pass over plain arrays.

    ``c`` is (num_joints, H, W) and ``ox``/``oy`` are (num_edges, H, W),
    all declared through ``c_shape``/``o_shape``. Returns the vote mass as
    a fresh (num_joints, H, W) array and a context handle for backward.
    """
    c_arr = _take_array("c", c, c_shape)
    ox_arr = _take_array("ox", ox, o_shape)
    oy_arr = _take_array("oy", oy, o_shape)
    spec = _make_spec(kernel_family, kernel_size, sigma, normalized)
    try:
        graph = VoteGraph(tuple((int(j), int(k)) for j, k in edges), int(num_joints))
        c_field = ScalarField(c_arr)
        o_field = DisplacementField(ScalarField(ox_arr), ScalarField(oy_arr))
        mass, ctx = vote_forward(c_field, o_field, spec, mode, graph, threads=threads)
    except MassDispError as exc:
        raise BoundaryError(str(exc)) from exc
    with _lock:
        handle = next(_handles)
        _contexts[handle] = (ctx, c_field, o_field, spec, mode, graph)
    return mass.data.copy(), handle


def bound_vote_backward(
    handle: int, grad_m: np.ndarray, *, grad_shape: tuple, threads: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients for a live forward context.

    Returns fresh (grad_c, grad_ox, grad_oy) arrays. The handle stays live;
    release it with :func:`release_context` when done.
    """
    grad = _take_array("grad_m", grad_m, grad_shape)
    with _lock:
        entry = _contexts.get(handle)
    if entry is None:
        raise BoundaryError(f"context handle {handle!r} is stale, released, or foreign")
    ctx, c_field, o_field, spec, mode, graph = entry
    try:
        gc, gx, gy = vote_backward(
            ScalarField(grad), c_field, o_field, spec, mode, graph, ctx, threads=threads
        )
    except MassDispError as exc:
        raise BoundaryError(str(exc)) from exc
    return gc.data.copy(), gx.data.copy(), gy.data.copy()


def release_context(handle: int) -> None:
    """Free a context handle. Releasing twice is an error, not a crash."""
    with _lock:
        if _contexts.pop(handle, None) is None:
            raise BoundaryError(f"context handle {handle!r} already released or never issued")


def live_context_count() -> int:
    with _lock:
        return len(_contexts)
