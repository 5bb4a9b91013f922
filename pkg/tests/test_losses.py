"""Loss-term tests: hand loop oracles, exact-solution zeros, gradient checks."""

import numpy as np
import pytest

from upflow.grid import ConductivityField, GridSpec
from upflow.losses import (
    LossBreakdown,
    interior,
    loss_bc_flux,
    loss_bc_head,
    loss_data,
    loss_ge,
    total_loss,
)
from upflow.solver import PeriodicDrive, solve_patch


def harm(a, b):
    return 2.0 / (1.0 / a + 1.0 / b)


def lognormal_field(grid, seed, sigma=1.0, aniso=False):
    rng = np.random.default_rng(seed)
    kx = np.exp(sigma * rng.normal(size=grid.n_cells))
    if not aniso:
        return ConductivityField.isotropic(grid, kx)
    ky = np.exp(sigma * rng.normal(size=grid.n_cells))
    kz = None if grid.is_2d else np.exp(sigma * rng.normal(size=grid.n_cells))
    return ConductivityField(grid, kx, ky, kz)


def view_components(field):
    g = field.grid
    view = g.shape3 if g.ndim == 3 else g.shape3[1:]
    return [field.component(a).reshape(view)[None] for a in range(g.ndim)]


def padded_prediction(inner, drive):
    """Embed interior heads and fill the ghost ring wrap-consistently.

    Ghost corners are set to a garbage sentinel: no loss term may read them.
    """
    ndim = inner.ndim - 1
    shape = inner.shape[:1] + tuple(s + 2 for s in inner.shape[1:])
    p = np.full(shape, 777.0)
    p[(slice(None),) + (slice(1, -1),) * ndim] = inner
    if ndim == 2:
        dhx, dhy = drive.delta_h
        p[:, 1:-1, 0] = inner[:, :, -1] - dhx
        p[:, 1:-1, -1] = inner[:, :, 0] + dhx
        p[:, 0, 1:-1] = inner[:, -1, :] - dhy
        p[:, -1, 1:-1] = inner[:, 0, :] + dhy
    else:
        dhx, dhy, dhz = drive.delta_h
        p[:, 1:-1, 1:-1, 0] = inner[:, :, :, -1] - dhx
        p[:, 1:-1, 1:-1, -1] = inner[:, :, :, 0] + dhx
        p[:, 1:-1, 0, 1:-1] = inner[:, :, -1, :] - dhy
        p[:, 1:-1, -1, 1:-1] = inner[:, :, 0, :] + dhy
        p[:, 0, 1:-1, 1:-1] = inner[:, -1, :, :] - dhz
        p[:, -1, 1:-1, 1:-1] = inner[:, 0, :, :] + dhz
    return p


def solved_prediction(field, drive, axis):
    """Solver heads of one patch as a ghost-padded image plus components."""
    sol = solve_patch(field, drive)
    g = field.grid
    view = g.shape3 if g.ndim == 3 else g.shape3[1:]
    inner = sol.heads.values.reshape(view)[None]
    return padded_prediction(inner, drive), view_components(field)


def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f()
        arr[idx] = orig - eps
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


class TestDataTerm:
    def test_zero_at_match(self):
        rng = np.random.default_rng(0)
        labels = rng.normal(size=(3, 4, 4))
        pred = padded_prediction(labels, PeriodicDrive((1.0, 0.0)))
        value, grad = loss_data(pred, labels, n_total=3)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_constant_offset(self):
        labels = np.zeros((2, 5, 5))
        pred = padded_prediction(labels + 0.3, PeriodicDrive((1.0, 0.0)))
        value, _ = loss_data(pred, labels, n_total=2)
        assert value == pytest.approx(0.3**2)

    def test_hand_value(self):
        # one sample, 2x2 interior, diffs 1 and 2 -> (1+4)/(4*1)
        labels = np.zeros((1, 2, 2))
        inner = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        pred = padded_prediction(inner, PeriodicDrive((0.5, 0.0)))
        value, grad = loss_data(pred, labels, n_total=1)
        assert value == pytest.approx(5.0 / 4.0)
        assert grad[0, 1, 1] == pytest.approx(2.0 * 1.0 / 4.0)
        assert grad[0, 2, 2] == pytest.approx(2.0 * 2.0 / 4.0)
        assert grad[0, 0, 0] == 0.0  # ghost never receives data gradient

    def test_total_count_scaling(self):
        labels = np.random.default_rng(1).normal(size=(2, 3, 3))
        pred = padded_prediction(labels + 1.0, PeriodicDrive((1.0, 0.0)))
        v1, _ = loss_data(pred, labels, n_total=2)
        v2, _ = loss_data(pred, labels, n_total=4)
        assert v1 == pytest.approx(2.0 * v2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="label"):
            loss_data(np.zeros((1, 5, 5)), np.zeros((1, 4, 4)), 1)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        pred = rng.normal(size=(2, 5, 5))
        labels = rng.normal(size=(2, 3, 3))
        _, grad = loss_data(pred, labels, n_total=2)
        fd = numeric_grad(lambda: loss_data(pred, labels, 2)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-10)


def ge_oracle_2d(pred, kx, ky, grid, n_total):
    ax = grid.face_area(0) / grid.dx
    ay = grid.face_area(1) / grid.dy
    bsz, ny2, nx2 = pred.shape
    ny, nx = ny2 - 2, nx2 - 2
    total = 0.0
    for b in range(bsz):
        for j in range(ny):
            for i in range(nx):
                kxl = harm(kx[b, j, (i - 1) % nx], kx[b, j, i]) * ax
                kxh = harm(kx[b, j, i], kx[b, j, (i + 1) % nx]) * ax
                kyl = harm(ky[b, (j - 1) % ny, i], ky[b, j, i]) * ay
                kyh = harm(ky[b, j, i], ky[b, (j + 1) % ny, i]) * ay
                hm = pred[b, j + 1, i + 1]
                r = (
                    kxh * (pred[b, j + 1, i + 2] - hm)
                    - kxl * (hm - pred[b, j + 1, i])
                    + kyh * (pred[b, j + 2, i + 1] - hm)
                    - kyl * (hm - pred[b, j, i + 1])
                )
                total += r * r
    return total / (nx * ny * n_total)


class TestEquationTerm:
    def test_matches_loop_oracle(self):
        grid = GridSpec(3, 4, dx=0.5, dy=2.0)
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(2, 6, 5))
        kx = np.exp(rng.normal(size=(2, 4, 3)))
        ky = np.exp(rng.normal(size=(2, 4, 3)))
        value, _ = loss_ge(pred, [kx, ky], grid, n_total=2)
        assert value == pytest.approx(ge_oracle_2d(pred, kx, ky, grid, 2), rel=1e-12)

    @pytest.mark.parametrize("grid,axis", [
        (GridSpec(4, 4), 0),
        (GridSpec(5, 4, dx=0.5, dy=1.5), 1),
        (GridSpec(3, 3, 3), 2),
        (GridSpec(3, 4, 2, dx=2.0, dy=0.5, dz=1.25), 0),
    ])
    def test_zero_at_exact_solution(self, grid, axis):
        field = lognormal_field(grid, seed=4, aniso=True)
        drive = PeriodicDrive.canonical(axis, grid.ndim, 1.0)
        pred, comps = solved_prediction(field, drive, axis)
        value, grad = loss_ge(pred, comps, grid, n_total=1)
        assert value < 1e-20
        assert np.max(np.abs(grad)) < 1e-9

    def test_uniform_field_linear_heads(self):
        # a linear-in-x head drop satisfies the balance exactly
        grid = GridSpec(5, 4)
        field = ConductivityField.isotropic(grid, np.full(20, 3.0))
        drive = PeriodicDrive((-1.0, 0.0))
        x_heads = drive.delta_h[0] * np.arange(5) * grid.dx / grid.length(0)
        inner = np.tile(x_heads, (4, 1))[None]
        pred = padded_prediction(inner, drive)
        value, _ = loss_ge(pred, view_components(field), grid, n_total=1)
        assert value < 1e-28

    def test_gradient_matches_fd(self):
        grid = GridSpec(3, 3, dx=0.75, dy=1.5)
        rng = np.random.default_rng(5)
        pred = rng.normal(size=(2, 5, 5))
        comps = [np.exp(rng.normal(size=(2, 3, 3))) for _ in range(2)]
        _, grad = loss_ge(pred, comps, grid, n_total=2)
        fd = numeric_grad(lambda: loss_ge(pred, comps, grid, 2)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)

    def test_gradient_matches_fd_3d(self):
        grid = GridSpec(3, 2, 2, dz=0.5)
        rng = np.random.default_rng(6)
        pred = rng.normal(size=(1, 4, 4, 5))
        comps = [np.exp(rng.normal(size=(1, 2, 2, 3))) for _ in range(3)]
        _, grad = loss_ge(pred, comps, grid, n_total=1)
        fd = numeric_grad(lambda: loss_ge(pred, comps, grid, 1)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)

    def test_corners_never_read(self):
        grid = GridSpec(3, 3)
        rng = np.random.default_rng(7)
        inner = rng.normal(size=(1, 3, 3))
        pred = padded_prediction(inner, PeriodicDrive((1.0, 0.0)))
        comps = [np.exp(rng.normal(size=(1, 3, 3))) for _ in range(2)]
        v1, _ = loss_ge(pred, comps, grid, 1)
        pred[:, 0, 0] = -1e6
        pred[:, -1, -1] = 1e6
        v2, _ = loss_ge(pred, comps, grid, 1)
        assert v1 == v2


class TestHeadBoundaryTerm:
    def test_constant_prediction_unit_drive(self):
        # spec example: flat heads under a unit x offset give exactly 1
        grid = GridSpec(4, 4)
        pred = np.full((1, 6, 6), 2.5)
        value, _ = loss_bc_head(pred, PeriodicDrive((1.0, 0.0)), grid, n_total=1)
        assert value == pytest.approx(1.0)

    def test_constant_prediction_3d_both_axes(self):
        grid = GridSpec(3, 3, 3)
        pred = np.full((1, 5, 5, 5), -1.0)
        drive = PeriodicDrive((2.0, 0.0, 0.0))
        value, _ = loss_bc_head(pred, drive, grid, n_total=1)
        assert value == pytest.approx(4.0)  # only the x mismatch, (dh)^2

    def test_zero_at_exact_solution(self):
        grid = GridSpec(4, 5, dy=0.5)
        field = lognormal_field(grid, seed=8)
        drive = PeriodicDrive((0.0, 1.0))
        pred, _ = solved_prediction(field, drive, 1)
        value, grad = loss_bc_head(pred, drive, grid, n_total=1)
        assert value < 1e-24
        assert np.max(np.abs(grad)) < 1e-11

    def test_hand_value(self):
        # 2x2 interior: ghosts violate periodicity by known margins
        grid = GridSpec(2, 2)
        drive = PeriodicDrive((1.0, 0.0))
        inner = np.zeros((1, 2, 2))
        pred = padded_prediction(inner, drive)
        pred[0, 1, 0] += 0.5  # one low-x ghost off by 0.5
        value, _ = loss_bc_head(pred, drive, grid, n_total=1)
        # x axis: m_low = (0.5-0+1-1)... ghost already has -dh folded in
        assert value == pytest.approx(0.5**2 / 4.0)

    def test_gradient_matches_fd(self):
        grid = GridSpec(3, 4, 2)
        rng = np.random.default_rng(9)
        pred = rng.normal(size=(2, 4, 6, 5))
        drive = PeriodicDrive((1.0, -0.5, 2.0))
        _, grad = loss_bc_head(pred, drive, grid, n_total=2)
        fd = numeric_grad(lambda: loss_bc_head(pred, drive, grid, 2)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-10)


class TestFluxBoundaryTerm:
    def test_zero_for_wrap_consistent_ghosts(self):
        # consistent ghosts make both wrap-face velocities identical,
        # whatever the interior looks like
        grid = GridSpec(4, 3, dx=0.5)
        rng = np.random.default_rng(10)
        inner = rng.normal(size=(2, 3, 4))
        drive = PeriodicDrive((1.0, 2.0))
        pred = padded_prediction(inner, drive)
        comps = [np.exp(rng.normal(size=(2, 3, 4))) for _ in range(2)]
        value, grad = loss_bc_flux(pred, comps, drive, grid, n_total=2)
        assert value < 1e-28
        assert np.max(np.abs(grad)) < 1e-13

    def test_hand_value(self):
        grid = GridSpec(2, 2)
        drive = PeriodicDrive((1.0, 0.0))
        inner = np.zeros((1, 2, 2))
        pred = padded_prediction(inner, drive)
        pred[0, 1, 0] += 0.25  # mis-set the low-x ghost of row y=0
        kx = np.array([[[1.0, 3.0], [1.0, 1.0]]])
        ky = np.ones((1, 2, 2))
        value, _ = loss_bc_flux(pred, [kx, ky], drive, grid, n_total=1)
        # wrap conductivity of row 0 is harm(1, 3) = 1.5;
        # v_low = -1.5*(0 - 0.25), v_high = 0 -> dv = 0.375
        assert value == pytest.approx(0.375**2 / 4.0)

    def test_drive_offsets_cancel(self):
        grid = GridSpec(3, 3)
        rng = np.random.default_rng(11)
        inner = rng.normal(size=(1, 3, 3))
        comps = [np.exp(rng.normal(size=(1, 3, 3))) for _ in range(2)]
        d1 = PeriodicDrive((1.0, 0.0))
        d2 = PeriodicDrive((5.0, -2.0))
        v1, _ = loss_bc_flux(padded_prediction(inner, d1), comps, d1, grid, 1)
        v2, _ = loss_bc_flux(padded_prediction(inner, d2), comps, d2, grid, 1)
        assert v1 == pytest.approx(v2, abs=1e-24)

    def test_gradient_matches_fd(self):
        grid = GridSpec(3, 3, dx=2.0)
        rng = np.random.default_rng(12)
        pred = rng.normal(size=(2, 5, 5))
        comps = [np.exp(rng.normal(size=(2, 3, 3))) for _ in range(2)]
        drive = PeriodicDrive((1.0, 0.0))
        _, grad = loss_bc_flux(pred, comps, drive, grid, n_total=2)
        fd = numeric_grad(lambda: loss_bc_flux(pred, comps, drive, grid, 2)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-10)

    def test_gradient_matches_fd_3d(self):
        grid = GridSpec(2, 3, 2, dy=0.5)
        rng = np.random.default_rng(13)
        pred = rng.normal(size=(1, 4, 5, 4))
        comps = [np.exp(rng.normal(size=(1, 2, 3, 2))) for _ in range(3)]
        drive = PeriodicDrive((0.0, 0.0, 1.0))
        _, grad = loss_bc_flux(pred, comps, drive, grid, n_total=1)
        fd = numeric_grad(lambda: loss_bc_flux(pred, comps, drive, grid, 1)[0], pred)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-10)


class TestChunking:
    def test_partial_sums_reproduce_full_batch(self):
        grid = GridSpec(4, 4)
        rng = np.random.default_rng(14)
        pred = rng.normal(size=(6, 6, 6))
        labels = rng.normal(size=(6, 4, 4))
        comps = [np.exp(rng.normal(size=(6, 4, 4))) for _ in range(2)]
        drive = PeriodicDrive((1.0, 0.0))
        for fn, args in [
            (loss_data, (labels,)),
            (loss_ge, (comps, grid)),
            (loss_bc_head, (drive, grid)),
            (loss_bc_flux, (comps, drive, grid)),
        ]:
            full, _ = fn(pred, *args, 6)
            parts = 0.0
            for lo in (0, 2, 4):
                sub_args = tuple(
                    [c[lo:lo + 2] for c in a] if isinstance(a, list)
                    else (a[lo:lo + 2] if isinstance(a, np.ndarray) else a)
                    for a in args
                )
                parts += fn(pred[lo:lo + 2], *sub_args, 6)[0]
            assert parts == pytest.approx(full, rel=1e-14)


class TestTotals:
    def test_weighted_sum(self):
        bd = total_loss(0.1, 0.2, 0.3, 0.4, (1.0, 1.0, 1.0, 1.0), n_labeled=10)
        assert bd.total == pytest.approx(1.0)
        assert (bd.l_data, bd.l_ge, bd.l_bc_h, bd.l_bc_v) == (0.1, 0.2, 0.3, 0.4)

    def test_small_equation_weights(self):
        bd = total_loss(0.5, 2.0, 0.25, 4.0, (1.0, 0.001, 1.0, 0.001), n_labeled=5)
        assert bd.total == pytest.approx(0.5 + 0.002 + 0.25 + 0.004)

    def test_label_free_drops_data_term(self):
        bd = total_loss(123.0, 0.2, 0.3, 0.0, (1.0, 1.0, 1.0, 1.0), n_labeled=0)
        assert bd.l_data == 0.0
        assert bd.total == pytest.approx(0.5)

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            LossBreakdown(-0.1, 0.0, 0.0, 0.0, 0.0)

    def test_interior_helper(self):
        pred = np.arange(32.0).reshape(2, 4, 4)
        inner = interior(pred, 2)
        assert inner.shape == (2, 2, 2)
        assert inner[0, 0, 0] == pred[0, 1, 1]
