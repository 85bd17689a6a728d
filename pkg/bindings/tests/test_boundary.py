"""Boundary validation and handle-lifetime semantics."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from massdisp_bindings import (
    BoundaryError,
    bound_vote_backward,
    bound_vote_forward,
    live_context_count,
    release_context,
)

C_SHAPE = (1, 5, 5)


def forward(c=None, ox=None, oy=None, **overrides):
    rng = np.random.default_rng(0)
    kwargs = dict(
        c_shape=C_SHAPE, o_shape=C_SHAPE, edges=[(0, 0)], num_joints=1, mode="noisy_or",
    )
    kwargs.update(overrides)
    return bound_vote_forward(
        rng.uniform(0, 1, C_SHAPE) if c is None else c,
        np.zeros(C_SHAPE) if ox is None else ox,
        np.zeros(C_SHAPE) if oy is None else oy,
        **kwargs,
    )


class TestArrayValidation:
    def test_wrong_dtype_names_argument(self):
        with pytest.raises(BoundaryError, match="'c'.*float64"):
            forward(c=np.zeros(C_SHAPE, dtype=np.float32))

    def test_non_array_rejected(self):
        with pytest.raises(BoundaryError, match="'ox'"):
            forward(ox=[[0.0] * 5] * 5)

    def test_non_contiguous_rejected(self):
        base = np.zeros((1, 5, 10))
        with pytest.raises(BoundaryError, match="'oy'.*contiguous"):
            forward(oy=base[:, :, ::2])

    def test_shape_mismatch_names_argument(self):
        with pytest.raises(BoundaryError, match="'c'.*declared"):
            forward(c=np.zeros((1, 4, 5)))

    def test_bad_kernel_reported(self):
        with pytest.raises(BoundaryError, match="kernel"):
            forward(kernel_size=4)

    def test_domain_violation_reported(self):
        with pytest.raises(BoundaryError, match="\\[0, 1\\]"):
            forward(c=np.full(C_SHAPE, 1.5))

    def test_grad_shape_checked(self):
        _, handle = forward()
        try:
            with pytest.raises(BoundaryError, match="'grad_m'"):
                bound_vote_backward(handle, np.zeros((1, 4, 4)), grad_shape=C_SHAPE)
        finally:
            release_context(handle)


class TestHandleLifetime:
    def test_release_then_use_is_error(self):
        _, handle = forward()
        release_context(handle)
        with pytest.raises(BoundaryError, match="stale|released"):
            bound_vote_backward(handle, np.zeros(C_SHAPE), grad_shape=C_SHAPE)

    def test_double_release_is_error(self):
        _, handle = forward()
        release_context(handle)
        with pytest.raises(BoundaryError, match="already released"):
            release_context(handle)

    def test_foreign_handle_is_error(self):
        with pytest.raises(BoundaryError):
            release_context(999_999_999)

    def test_backward_reentrant_on_live_handle(self):
        _, handle = forward()
        g1 = bound_vote_backward(handle, np.ones(C_SHAPE), grad_shape=C_SHAPE)
        g2 = bound_vote_backward(handle, np.ones(C_SHAPE), grad_shape=C_SHAPE)
        release_context(handle)
        for a, b in zip(g1, g2):
            assert np.array_equal(a, b)

    def test_handles_are_unique_and_tracked(self):
        before = live_context_count()
        handles = [forward()[1] for _ in range(8)]
        assert len(set(handles)) == 8
        assert live_context_count() == before + 8
        for h in handles:
            release_context(h)
        assert live_context_count() == before

    def test_distinct_handles_usable_concurrently(self):
        cases = [forward() for _ in range(6)]

        def work(pair):
            _, handle = pair
            out = bound_vote_backward(handle, np.ones(C_SHAPE), grad_shape=C_SHAPE)
            release_context(handle)
            return out[0].sum()

        with ThreadPoolExecutor(max_workers=6) as pool:
            results = list(pool.map(work, cases))
        assert len(results) == 6
