import math

import numpy as np
import pytest

from massdisp import (
    KeypointSet,
    LossParams,
    ShapeError,
    bce_loss,
    chain_graph,
    field_from_array,
    huber_loss_masked,
    localization_errors,
    make_disk_target,
    make_gaussian_target,
    make_offset_target,
    mse_loss,
    new_field,
    pck_metric,
    within_graph,
)


def kps_at(*positions, visible=None):
    pos = np.array(positions, dtype=float)
    vis = np.ones(len(pos), dtype=bool) if visible is None else np.array(visible)
    return KeypointSet(pos, vis)


def fd_loss_grad(loss_fn, pred, h=1e-6):
    """Central differences of a (loss, grad) pair over the prediction."""
    base = pred.data.copy()
    grads = np.zeros_like(base)
    for i in range(base.size):
        up = base.copy()
        dn = base.copy()
        up.ravel()[i] += h
        dn.ravel()[i] -= h
        grads.ravel()[i] = (
            loss_fn(field_from_array(up))[0] - loss_fn(field_from_array(dn))[0]
        ) / (2 * h)
    return grads


class TestLossParams:
    def test_defaults(self):
        p = LossParams()
        assert (p.eps_c, p.eps_m, p.huber_delta, p.gaussian_target_sigma) == (4.0, 1.0, 1.0, 1.0)

    def test_eps_order_enforced(self):
        with pytest.raises(ShapeError):
            LossParams(eps_c=1.0, eps_m=2.0)


class TestDiskTarget:
    def test_degenerate_disk(self):
        t = make_disk_target(kps_at((10, 10)), 0, (64, 64))
        assert t.data.sum() == 1.0
        assert t.data[0, 10, 10] == 1.0

    def test_box_count(self):
        t = make_disk_target(kps_at((10, 10)), 4, (64, 64))
        # brute-force recount over all pixels
        count = sum(
            1
            for y in range(64)
            for x in range(64)
            if abs(x - 10) <= 4 and abs(y - 10) <= 4
        )
        assert count == 81
        assert t.data.sum() == count

    def test_invisible_channel_empty(self):
        t = make_disk_target(kps_at((10, 10), (20, 20), visible=[True, False]), 4, (64, 64))
        assert t.data[0].sum() == 81
        assert t.data[1].sum() == 0

    def test_translation_equivariance(self):
        a = make_disk_target(kps_at((10, 12)), 3, (32, 32))
        b = make_disk_target(kps_at((15, 19)), 3, (32, 32))
        assert np.array_equal(np.roll(np.roll(a.data, 7, axis=1), 5, axis=2), b.data)


class TestGaussianTarget:
    def test_peak_and_falloff(self):
        t = make_gaussian_target(kps_at((8, 8)), 1.0, (16, 16))
        assert t.data[0, 8, 8] == 1.0
        assert t.data[0, 8, 9] == pytest.approx(math.exp(-0.5))

    def test_invisible_zero(self):
        t = make_gaussian_target(kps_at((8, 8), visible=[False]), 1.0, (16, 16))
        assert np.all(t.data == 0)


class TestOffsetTarget:
    def test_zero_displacement_at_truth(self):
        g = within_graph(1)
        ox, oy, mask = make_offset_target(kps_at((10, 10)), g, 4, 3.0, (64, 64))
        assert mask.data[0, 10, 10] == 1.0
        assert ox.data[0, 10, 10] == 0.0
        assert oy.data[0, 10, 10] == 0.0

    def test_within_part_orientation(self):
        # A pixel 3 to the right of the keypoint must vote 3 to the left.
        g = within_graph(1)
        ox, _, mask = make_offset_target(kps_at((10, 10)), g, 4, 3.0, (64, 64))
        assert mask.data[0, 10, 13] == 1.0
        assert ox.data[0, 10, 13] == pytest.approx(-1.0)

    def test_cross_part_magnitude(self):
        g = chain_graph(2)
        kps = kps_at((10, 10), (20, 10))
        ox, oy, mask = make_offset_target(kps, g, 4, 64.0, (64, 64))
        e01 = g.edges.index((0, 1))
        assert mask.data[e01, 10, 10] == 1.0
        assert ox.data[e01, 10, 10] == pytest.approx(10.0 / 64.0)
        assert oy.data[e01, 10, 10] == 0.0

    def test_consistency_identity(self):
        # Every masked pixel plus d times its target lands exactly on the
        # edge's target joint.
        rng = np.random.default_rng(3)
        g = chain_graph(3)
        kps = kps_at(*(rng.uniform(8, 56, (3, 2))))
        d = 64.0
        ox, oy, mask = make_offset_target(kps, g, 4, d, (64, 64))
        ys, xs = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
        for e, (_, k) in enumerate(g.edges):
            sel = mask.data[e] > 0
            assert sel.any()
            np.testing.assert_allclose(xs[sel] + d * ox.data[e, sel], kps.positions[k, 0])
            np.testing.assert_allclose(ys[sel] + d * oy.data[e, sel], kps.positions[k, 1])

    def test_invisible_pair_unmasked(self):
        g = chain_graph(2)
        kps = kps_at((10, 10), (20, 10), visible=[True, False])
        _, _, mask = make_offset_target(kps, g, 4, 64.0, (64, 64))
        e01 = g.edges.index((0, 1))
        e00 = g.edges.index((0, 0))
        assert mask.data[e01].sum() == 0
        assert mask.data[e00].sum() == 81


class TestBceLoss:
    def test_perfect_prediction_vanishes(self):
        target = make_disk_target(kps_at((5, 5)), 2, (16, 16))
        loss, _ = bce_loss(field_from_array(np.clip(target.data, 1e-9, 1 - 1e-9)), target)
        assert loss < 1e-5

    def test_uniform_half_all_zero_target(self):
        pred = new_field(8, 8, 1, 0.5)
        loss, _ = bce_loss(pred, new_field(8, 8, 1, 0.0))
        assert loss == pytest.approx(math.log(2.0))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        target = field_from_array((rng.random((1, 5, 5)) > 0.7).astype(float))
        pred = field_from_array(rng.uniform(0.05, 0.95, (1, 5, 5)))
        _, grad = bce_loss(pred, target)
        numeric = fd_loss_grad(lambda p: bce_loss(p, target), pred)
        np.testing.assert_allclose(grad.data, numeric, rtol=1e-6, atol=1e-9)


class TestHuberLoss:
    def test_perfect_prediction(self):
        pred = new_field(4, 4, 1, 0.3)
        mask = new_field(4, 4, 1, 1.0)
        loss, grad = huber_loss_masked(pred, pred, mask, 1.0)
        assert loss == 0.0
        assert np.all(grad.data == 0)

    def test_linear_tail_value(self):
        # One masked pixel with residual 2*delta contributes 1.5*delta^2.
        delta = 0.7
        pred = new_field(3, 3, 1, 2 * delta)
        target = new_field(3, 3, 1, 0.0)
        mask_data = np.zeros((1, 3, 3))
        mask_data[0, 1, 1] = 1.0
        loss, _ = huber_loss_masked(pred, target, field_from_array(mask_data), delta)
        assert loss == pytest.approx(1.5 * delta * delta)

    def test_empty_mask(self):
        pred = new_field(3, 3, 1, 1.0)
        loss, grad = huber_loss_masked(pred, new_field(3, 3, 1, 0.0), new_field(3, 3, 1, 0.0))
        assert loss == 0.0
        assert np.all(grad.data == 0)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pred = field_from_array(rng.normal(0, 2, (2, 4, 4)))
        target = field_from_array(rng.normal(0, 2, (2, 4, 4)))
        mask = field_from_array((rng.random((2, 4, 4)) > 0.4).astype(float))
        # keep residuals away from the huber kink at |r| = delta
        delta = 1.0
        r = np.abs(pred.data - target.data)
        assume_ok = np.all(np.abs(r - delta) > 1e-3)
        assert assume_ok
        _, grad = huber_loss_masked(pred, target, mask, delta)
        numeric = fd_loss_grad(lambda p: huber_loss_masked(p, target, mask, delta), pred)
        np.testing.assert_allclose(grad.data, numeric, rtol=1e-6, atol=1e-9)


class TestMseLoss:
    def test_perfect(self):
        pred = new_field(2, 2, 1, 0.4)
        assert mse_loss(pred, pred)[0] == 0.0

    def test_scalar_case(self):
        loss, grad = mse_loss(new_field(1, 1, 1, 1.0), new_field(1, 1, 1, 0.0))
        assert loss == 1.0
        assert grad.data[0, 0, 0] == 2.0

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        pred = field_from_array(rng.normal(0, 1, (1, 4, 4)))
        target = field_from_array(rng.normal(0, 1, (1, 4, 4)))
        _, grad = mse_loss(pred, target)
        numeric = fd_loss_grad(lambda p: mse_loss(p, target), pred)
        np.testing.assert_allclose(grad.data, numeric, rtol=1e-6, atol=1e-9)


class TestPckMetric:
    def test_perfect_deltas(self):
        kps = kps_at((3, 4), (10, 12))
        data = np.zeros((2, 16, 16))
        data[0, 4, 3] = 1.0
        data[1, 12, 10] = 1.0
        assert pck_metric(field_from_array(data), kps, 0.5) == 1.0

    def test_constant_field_ties_to_origin(self):
        kps = kps_at((1, 1), (10, 10))
        pred = new_field(16, 16, 2, 0.3)
        assert pck_metric(pred, kps, 2.0) == 0.5  # only the joint near (0,0)

    def test_no_visible_joints_nan(self):
        kps = kps_at((3, 3), visible=[False])
        assert math.isnan(pck_metric(new_field(8, 8, 1, 0.0), kps, 2.0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        pred = field_from_array(rng.random((3, 12, 12)))
        kps = kps_at(*(rng.uniform(0, 11, (3, 2))))
        tol = 3.0
        correct = 0
        for j in range(3):
            best, bx, by = -1.0, 0, 0
            for y in range(12):
                for x in range(12):
                    if pred.data[j, y, x] > best:
                        best, bx, by = pred.data[j, y, x], x, y
            dx = bx - kps.positions[j, 0]
            dy = by - kps.positions[j, 1]
            if math.hypot(dx, dy) <= tol:
                correct += 1
        assert pck_metric(pred, kps, tol) == pytest.approx(correct / 3)

    def test_localization_errors_invisible_nan(self):
        kps = kps_at((3, 3), (5, 5), visible=[True, False])
        err = localization_errors(new_field(8, 8, 2, 0.0), kps)
        assert not math.isnan(err[0])
        assert math.isnan(err[1])
