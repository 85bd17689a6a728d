"""The mass-displacement voting operator: forward and analytic backward.

Every input pixel x of a source channel j casts a vote of strength c_j(x)
at the continuous target x' = x + o(x), dilated over a kernel support
window. Votes landing on the same output pixel are combined by one of
three rules:

* ``additive``  -- plain summation; outputs can exceed 1.
* ``noisy_or``  -- probabilistic OR, 1 - prod(1 - w*c); outputs stay in
  [0, 1] and any extra piece of evidence can only increase them.
* ``max``      -- keep the single strongest contribution.

The implementation scatters (iterates input pixels, writes into output
windows) because arbitrary offsets make gather windows unbounded. Noisy-OR
accumulates log-survival sums (log1p of the complements), which makes the
result insensitive to accumulation order up to round-off and safe against
underflow. The backward pass re-enumerates the same contributions and
applies the exact per-contribution partial derivatives.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, ShapeError
from .field import DisplacementField, GradSignal, ScalarField
from .kernels import BILINEAR, GAUSSIAN, KernelSpec, weight_array, weight_grad_arrays

ADDITIVE = "additive"
NOISY_OR = "noisy_or"
MAX = "max"
MODES = (ADDITIVE, NOISY_OR, MAX)

# Contributions w*c are kept strictly below 1 so the log-survival sum stays
# finite even for perfectly confident votes.
CLAMP_LIMIT = 1.0 - 1e-12

# A noisy-OR output may round to 1.0 in float64 once enough near-certain
# votes accumulate, yet the true value is strictly below 1 (finite evidence
# never yields certainty). Cap at one ulp below 1 to preserve that strict
# inequality; the bias is 2^-53, far under every agreement tolerance.
_ONE_MINUS_ULP = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class VoteGraph:
    """Directed channel edges (source joint j -> target joint k)."""

    edges: tuple[tuple[int, int], ...]
    num_joints: int

    def __post_init__(self):
        if self.num_joints < 1:
            raise ShapeError(f"num_joints must be >= 1, got {self.num_joints}")
        if not self.edges:
            raise ShapeError("vote graph needs at least one edge")
        norm = tuple((int(j), int(k)) for j, k in self.edges)
        for j, k in norm:
            if not (0 <= j < self.num_joints and 0 <= k < self.num_joints):
                raise ShapeError(f"edge ({j}, {k}) out of range for {self.num_joints} joints")
        object.__setattr__(self, "edges", norm)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def within_graph(num_joints: int) -> VoteGraph:
    """Self-edges only: every joint votes for its own refined location."""
    return VoteGraph(tuple((j, j) for j in range(num_joints)), num_joints)


def tree_graph(parents) -> VoteGraph:
    """Self-edges plus both directions of a kinematic tree.

    ``parents[i]`` is the parent joint of i, or -1 for the root. The tree
    must be connected (exactly one root, every node reaching it).
    """
    n = len(parents)
    roots = [i for i, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise ShapeError(f"tree needs exactly one root, got {len(roots)}")
    for i, p in enumerate(parents):
        if p != -1 and not 0 <= p < n:
            raise ShapeError(f"parent {p} of joint {i} out of range")
        seen = set()
        while p != -1:
            if p in seen:
                raise ShapeError("parent pointers contain a cycle")
            seen.add(p)
            p = parents[p]
    edges = [(j, j) for j in range(n)]
    for i, p in enumerate(parents):
        if p != -1:
            edges.append((p, i))
            edges.append((i, p))
    return VoteGraph(tuple(edges), n)


def chain_graph(num_joints: int) -> VoteGraph:
    """Tree graph for a simple chain 0 - 1 - ... - n-1."""
    return tree_graph([-1] + list(range(num_joints - 1)))


@dataclass
class VoteContext:
    """Backward cache produced by :func:`vote_forward`.

    ``survival`` holds the per-output-pixel log-survival sum for noisy-OR;
    ``win_edge``/``win_pix`` record the argmax contributor for max mode.
    """

    mode: str
    spec: KernelSpec
    graph: VoteGraph
    in_shape: tuple[int, int, int]
    survival: np.ndarray | None = None
    win_edge: np.ndarray | None = None
    win_pix: np.ndarray | None = None
    _token: object = dc_field(default_factory=object)


def _check_inputs(c: ScalarField, o: DisplacementField, mode: str, graph: VoteGraph):
    if mode not in MODES:
        raise ShapeError(f"unknown vote mode {mode!r}, expected one of {MODES}")
    if c.channels != graph.num_joints:
        raise ShapeError(
            f"confidence field has {c.channels} channels, graph has {graph.num_joints} joints"
        )
    if o.channels != graph.num_edges:
        raise ShapeError(
            f"displacement field has {o.channels} channel pairs, graph has {graph.num_edges} edges"
        )
    if (c.height, c.width) != (o.height, o.width):
        raise ShapeError(
            f"confidence grid {c.height}x{c.width} does not match offsets {o.height}x{o.width}"
        )
    if mode in (NOISY_OR, MAX):
        if c.data.min() < 0.0 or c.data.max() > 1.0:
            raise DomainError(f"{mode} voting requires confidences in [0, 1]")


def _row_slices(height: int, threads: int) -> list[slice]:
    threads = max(1, min(int(threads), height))
    bounds = np.linspace(0, height, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _tap_offsets(spec: KernelSpec) -> list[tuple[int, int]]:
    if spec.family == GAUSSIAN:
        h = spec.half
        return [(dy, dx) for dy in range(-h, h + 1) for dx in range(-h, h + 1)]
    return [(0, 0), (0, 1), (1, 0), (1, 1)]


def _tap_batches(spec: KernelSpec, ox: np.ndarray, oy: np.ndarray, rows: slice, grid):
    """Yield per-tap contribution geometry for input pixels in ``rows``.

    Each item is (py, px, qy, qx, dx, dy): integer input coordinates, integer
    output coordinates, and the continuous displacement output - target, all
    1-D arrays restricted to in-grid votes.
    """
    height, width = grid
    ys = np.arange(rows.start, rows.stop)
    py, px = np.meshgrid(ys, np.arange(width), indexing="ij")
    py = py.ravel()
    px = px.ravel()
    tx = px + ox[rows].ravel()
    ty = py + oy[rows].ravel()
    if spec.family == GAUSSIAN:
        bx = np.floor(tx + 0.5).astype(np.int64)
        by = np.floor(ty + 0.5).astype(np.int64)
    else:
        bx = np.floor(tx).astype(np.int64)
        by = np.floor(ty).astype(np.int64)
    for dy, dx in _tap_offsets(spec):
        qx = bx + dx
        qy = by + dy
        ok = (qx >= 0) & (qx < width) & (qy >= 0) & (qy < height)
        if not ok.any():
            continue
        yield (py[ok], px[ok], qy[ok], qx[ok], qx[ok] - tx[ok], qy[ok] - ty[ok])


def _forward_worker(c, o, spec, mode, graph, rows, grid):
    height, width = grid
    num_joints = graph.num_joints
    if mode == ADDITIVE:
        acc = np.zeros((num_joints, height, width))
    elif mode == NOISY_OR:
        acc = np.zeros((num_joints, height, width))
    else:
        acc = (
            np.zeros((num_joints, height, width)),
            np.full((num_joints, height, width), np.iinfo(np.int64).max, dtype=np.int64),
            np.full((num_joints, height, width), -1, dtype=np.int32),
            np.full((num_joints, height, width), -1, dtype=np.int64),
        )
        cand_out, cand_val, cand_key, cand_edge, cand_pix = [], [], [], [], []
    for e, (j, k) in enumerate(graph.edges):
        cj = c.data[j]
        for py, px, qy, qx, dx, dy in _tap_batches(spec, o.ox.data[e], o.oy.data[e], rows, grid):
            w = weight_array(spec, dx, dy)
            contrib = w * cj[py, px]
            if mode == ADDITIVE:
                np.add.at(acc[k], (qy, qx), contrib)
            elif mode == NOISY_OR:
                np.add.at(acc[k], (qy, qx), np.log1p(-np.minimum(contrib, CLAMP_LIMIT)))
            else:
                pos = contrib > 0.0
                if pos.any():
                    pix = py[pos] * width + px[pos]
                    cand_out.append(k * height * width + qy[pos] * width + qx[pos])
                    cand_val.append(contrib[pos])
                    cand_key.append(e * height * width + pix)
                    cand_edge.append(np.full(pix.shape, e, dtype=np.int32))
                    cand_pix.append(pix)
    if mode == MAX and cand_out:
        out = np.concatenate(cand_out)
        val = np.concatenate(cand_val)
        key = np.concatenate(cand_key)
        edge = np.concatenate(cand_edge)
        pix = np.concatenate(cand_pix)
        # Strongest vote wins; equal strengths go to the lowest (edge, pixel)
        # index so gradients are reproducible.
        order = np.lexsort((key, -val, out))
        out, val, key, edge, pix = out[order], val[order], key[order], edge[order], pix[order]
        first = np.empty(out.shape, dtype=bool)
        first[0] = True
        first[1:] = out[1:] != out[:-1]
        vals, keys, edges, pixs = acc
        vals.reshape(-1)[out[first]] = val[first]
        keys.reshape(-1)[out[first]] = key[first]
        edges.reshape(-1)[out[first]] = edge[first]
        pixs.reshape(-1)[out[first]] = pix[first]
    return acc


def vote_forward(
    c: ScalarField,
    o: DisplacementField,
    spec: KernelSpec,
    mode: str,
    graph: VoteGraph,
    threads: int = 1,
) -> tuple[ScalarField, VoteContext]:
    """Accumulate displaced, kernel-dilated votes into an output mass field.

    Returns the mass field (one channel per target joint) and the context
    needed by :func:`vote_backward`. Votes whose support window falls
    entirely outside the grid are dropped.
    """
    _check_inputs(c, o, mode, graph)
    grid = (c.height, c.width)
    slices = _row_slices(c.height, threads)
    if len(slices) == 1:
        parts = [_forward_worker(c, o, spec, mode, graph, slices[0], grid)]
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            futures = [
                pool.submit(_forward_worker, c, o, spec, mode, graph, rows, grid)
                for rows in slices
            ]
            parts = [f.result() for f in futures]

    ctx = VoteContext(mode=mode, spec=spec, graph=graph, in_shape=c.shape)
    if mode == ADDITIVE:
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return ScalarField(total), ctx
    if mode == NOISY_OR:
        survival = parts[0]
        for p in parts[1:]:
            survival = survival + p
        m = -np.expm1(survival) + 0.0  # +0.0 folds -0.0 from empty pixels
        m = np.where(survival < 0.0, np.minimum(m, _ONE_MINUS_ULP), m)
        ctx.survival = survival
        return ScalarField(m), ctx
    vals, keys, edges, pixs = parts[0]
    for pv, pk, pe, pp in parts[1:]:
        better = (pv > vals) | ((pv == vals) & (pk < keys))
        vals = np.where(better, pv, vals)
        keys = np.where(better, pk, keys)
        edges = np.where(better, pe, edges)
        pixs = np.where(better, pp, pixs)
    ctx.win_edge = edges
    ctx.win_pix = pixs
    return ScalarField(vals), ctx


def _backward_worker(grad_m, c, o, spec, mode, graph, ctx, rows, grid):
    height, width = grid
    gc = np.zeros((graph.num_joints, height, width))
    gox = np.zeros((graph.num_edges, height, width))
    goy = np.zeros((graph.num_edges, height, width))
    delta = grad_m.data
    for e, (j, k) in enumerate(graph.edges):
        cj = c.data[j]
        for py, px, qy, qx, dx, dy in _tap_batches(spec, o.ox.data[e], o.oy.data[e], rows, grid):
            w, kx, ky = weight_grad_arrays(spec, dx, dy)
            d = delta[k, qy, qx]
            cv = cj[py, px]
            # d(target displacement)/d(offset) = -1, so dw/do = -dK/dd.
            dwx = -kx
            dwy = -ky
            if mode == ADDITIVE:
                dm_dc = w
                dm_dw = cv
            else:
                wc = w * cv
                unclamped = wc < CLAMP_LIMIT
                # (1 - m) / (1 - w c), both in the log domain to avoid 0/0.
                s = ctx.survival[k, qy, qx]
                factor = np.where(
                    unclamped, np.exp(s - np.log1p(-np.minimum(wc, CLAMP_LIMIT))), 0.0
                )
                dm_dc = w * factor
                dm_dw = cv * factor
            # Input pixels are unique within one tap batch, so plain fancy
            # indexing accumulates safely here.
            gc[j, py, px] += d * dm_dc
            gox[e, py, px] += d * dm_dw * dwx
            goy[e, py, px] += d * dm_dw * dwy
    return gc, gox, goy


def _backward_max(grad_m, c, o, spec, graph, ctx, grid):
    height, width = grid
    gc = np.zeros((graph.num_joints, height, width))
    gox = np.zeros((graph.num_edges, height, width))
    goy = np.zeros((graph.num_edges, height, width))
    delta = grad_m.data
    for e, (j, k) in enumerate(graph.edges):
        sel = ctx.win_edge == e
        if not sel.any():
            continue
        _, qy, qx = np.nonzero(sel)
        pix = ctx.win_pix[sel]
        py, px = np.divmod(pix, width)
        tx = px + o.ox.data[e, py, px]
        ty = py + o.oy.data[e, py, px]
        w, kx, ky = weight_grad_arrays(spec, qx - tx, qy - ty)
        d = delta[k, qy, qx]
        cv = c.data[j, py, px]
        # One input pixel may win several output pixels, so use unbuffered
        # scatter-adds keyed by the winners' source coordinates.
        np.add.at(gc[j], (py, px), d * w)
        np.add.at(gox[e], (py, px), d * cv * -kx)
        np.add.at(goy[e], (py, px), d * cv * -ky)
    return gc, gox, goy


def vote_backward(
    grad_m: GradSignal,
    c: ScalarField,
    o: DisplacementField,
    spec: KernelSpec,
    mode: str,
    graph: VoteGraph,
    ctx: VoteContext,
    threads: int = 1,
) -> tuple[GradSignal, GradSignal, GradSignal]:
    """Analytic gradients of the voting output w.r.t. c, o_x and o_y.

    ``ctx`` must come from the matching :func:`vote_forward` call. In max
    mode the gradient is routed only to each output pixel's recorded argmax
    contributor.
    """
    _check_inputs(c, o, mode, graph)
    if ctx.mode != mode or ctx.spec != spec or ctx.graph != graph or ctx.in_shape != c.shape:
        raise ShapeError("vote context does not match the backward call's arguments")
    if grad_m.shape != (graph.num_joints, c.height, c.width):
        raise ShapeError(
            f"gradient field shape {grad_m.shape} does not match output "
            f"({graph.num_joints}, {c.height}, {c.width})"
        )
    if mode == NOISY_OR and ctx.survival is None:
        raise ShapeError("context is missing the noisy-OR survival cache")
    if mode == MAX and (ctx.win_edge is None or ctx.win_pix is None):
        raise ShapeError("context is missing the max-mode argmax records")

    grid = (c.height, c.width)
    if mode == MAX:
        gc, gox, goy = _backward_max(grad_m, c, o, spec, graph, ctx, grid)
    else:
        slices = _row_slices(c.height, threads)
        if len(slices) == 1:
            parts = [_backward_worker(grad_m, c, o, spec, mode, graph, ctx, slices[0], grid)]
        else:
            with ThreadPoolExecutor(max_workers=len(slices)) as pool:
                futures = [
                    pool.submit(
                        _backward_worker, grad_m, c, o, spec, mode, graph, ctx, rows, grid
                    )
                    for rows in slices
                ]
                parts = [f.result() for f in futures]
        gc = sum(p[0] for p in parts)
        gox = sum(p[1] for p in parts)
        goy = sum(p[2] for p in parts)
    return ScalarField(gc), ScalarField(gox), ScalarField(goy)


def fd_safety_masks(c: ScalarField, o: DisplacementField, spec: KernelSpec, graph: VoteGraph,
                    tol: float = 1e-4):
    """Mark coordinates where central differences of the vote are unreliable.

    Returns boolean masks (skip_c, skip_ox, skip_oy) shaped like the inputs.
    Offsets are flagged when a vote target sits within ``tol`` of a bilinear
    kink (integer target) or of a truncation-window rounding boundary
    (half-integer target, gaussian); confidences are flagged when a
    contribution sits at the noisy-OR clamp.
    """
    skip_c = np.zeros(c.shape, dtype=bool)
    skip_ox = np.zeros((graph.num_edges, c.height, c.width), dtype=bool)
    skip_oy = np.zeros_like(skip_ox)
    ys, xs = np.meshgrid(np.arange(c.height), np.arange(c.width), indexing="ij")
    for e, (j, _k) in enumerate(graph.edges):
        tx = xs + o.ox.data[e]
        ty = ys + o.oy.data[e]
        if spec.family == BILINEAR:
            fx = tx - np.floor(tx)
            fy = ty - np.floor(ty)
            skip_ox[e] |= (fx < tol) | (fx > 1.0 - tol)
            skip_oy[e] |= (fy < tol) | (fy > 1.0 - tol)
        else:
            skip_ox[e] |= np.abs((tx + 0.5) - np.floor(tx + 0.5) - 0.5) < tol
            skip_oy[e] |= np.abs((ty + 0.5) - np.floor(ty + 0.5) - 0.5) < tol
        near_clamp = c.data[j] * spec.norm_factor > CLAMP_LIMIT - 1e-6
        skip_c[j] |= near_clamp
    return skip_c, skip_ox, skip_oy
