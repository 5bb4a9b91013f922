"""Periodic-cell two-point-flux solver and equivalent-tensor extraction.

A patch is solved as a periodic unit cell: every boundary face couples to
the opposite side with a harmonically averaged interface conductivity, and
a prescribed head offset per axis enters through those wrap faces.  One
solve per canonical axis drive yields the mean velocity columns from which
the equivalent conductivity tensor follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from upflow.grid import ConductivityField, GridSpec, Patch, ScalarField

#: patches up to this many cells use a direct sparse factorization
MAX_DIRECT_SIZE = 10_000

#: reject per-cell conductivity component ratios more extreme than this
MIN_ANISOTROPY_RATIO = 1e-6


class ConvergenceError(RuntimeError):
    """The linear solve did not reach the requested residual."""


@dataclass(frozen=True)
class PeriodicDrive:
    """Head offsets applied across the periodic wrap, one per axis."""

    delta_h: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "delta_h", tuple(float(v) for v in self.delta_h))
        if len(self.delta_h) not in (2, 3):
            raise ValueError(f"expected 2 or 3 offsets, got {len(self.delta_h)}")
        if not any(v != 0.0 for v in self.delta_h):
            raise ValueError("at least one head offset must be nonzero")

    @classmethod
    def canonical(cls, axis: int, ndim: int, magnitude: float = 1.0) -> "PeriodicDrive":
        """Unit offset along one axis, zero along the others."""
        dh = [0.0] * ndim
        dh[axis] = magnitude
        return cls(tuple(dh))


@dataclass(frozen=True)
class PatchSolution:
    """Periodic flow solution on one patch.

    ``face_velocities[a]`` holds the Darcy velocity through each cell's
    +a face (flat cell order); the wrap face of the last cell along the
    axis is counted there exactly once.
    """

    heads: ScalarField
    face_velocities: tuple[np.ndarray, ...]
    drive: PeriodicDrive


def face_transmissibility(k_left, k_right, face_area):
    """Transmissibility of the interface between two cells.

    Harmonic interface conductivity times face area; the later division by
    the cell spacing happens where fluxes are formed.
    """
    k_left = np.asarray(k_left, dtype=np.float64)
    k_right = np.asarray(k_right, dtype=np.float64)
    if np.any(k_left <= 0) or np.any(k_right <= 0):
        raise ValueError("conductivities must be strictly positive")
    if np.any(np.asarray(face_area) <= 0):
        raise ValueError("face area must be strictly positive")
    return 2.0 * face_area / (1.0 / k_left + 1.0 / k_right)


def _check_anisotropy(field: ConductivityField):
    comps = np.stack(field.components)
    ratio = comps.min(axis=0) / comps.max(axis=0)
    worst = ratio.min()
    if worst < MIN_ANISOTROPY_RATIO:
        raise ValueError(
            f"conductivity component ratio {worst:.3e} below {MIN_ANISOTROPY_RATIO:.0e}; "
            "system too ill-conditioned"
        )


def _face_coefficients(field: ConductivityField) -> list[np.ndarray]:
    """Per axis: flux coefficient T/Δ of each cell's +face (wrap included)."""
    grid = field.grid
    coeffs = []
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        k = field.component_3d(axis)
        k_nb = np.roll(k, -1, axis=vd)
        t = face_transmissibility(k, k_nb, grid.face_area(axis))
        coeffs.append(t / grid.spacings[axis])
    return coeffs


def _as_field(patch) -> ConductivityField:
    return patch.field if isinstance(patch, Patch) else patch


def _assemble_raw(field: ConductivityField, drive: PeriodicDrive):
    """COO triplets and rhs of the unpinned flux-balance system."""
    grid = field.grid
    if len(drive.delta_h) != grid.ndim:
        raise ValueError(f"drive has {len(drive.delta_h)} offsets for a {grid.ndim}D patch")
    _check_anisotropy(field)
    coeffs = _face_coefficients(field)
    n = grid.n_cells
    idx = np.arange(n).reshape(grid.shape3)
    rows, cols, data = [], [], []
    rhs = np.zeros(n)
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        cf = coeffs[axis].ravel()
        c = idx.ravel()
        nb = np.roll(idx, -1, axis=vd).ravel()
        rows += [c, nb, c, nb]
        cols += [c, nb, nb, c]
        data += [cf, cf, -cf, -cf]
        dh = drive.delta_h[axis]
        if dh != 0.0:
            last = [slice(None)] * 3
            last[vd] = grid.counts[axis] - 1
            first = [slice(None)] * 3
            first[vd] = 0
            wrap_cf = coeffs[axis][tuple(last)].ravel()
            np.add.at(rhs, idx[tuple(last)].ravel(), wrap_cf * dh)
            np.add.at(rhs, idx[tuple(first)].ravel(), -wrap_cf * dh)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(data), rhs


def assemble_periodic(patch, drive: PeriodicDrive):
    """Sparse flux-balance system of a periodic patch, anchor row pinned.

    Returns ``(matrix, rhs)`` with one conservation equation per cell; the
    equation of cell (0,0,0) is replaced by ``H = 0`` to fix the additive
    constant.
    """
    field = _as_field(patch)
    rows, cols, data, rhs = _assemble_raw(field, drive)
    keep = rows != 0
    rows = np.append(rows[keep], 0)
    cols = np.append(cols[keep], 0)
    data = np.append(data[keep], 1.0)
    rhs[0] = 0.0
    n = field.grid.n_cells
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n)), rhs


def _symmetric_system(field: ConductivityField, drive: PeriodicDrive):
    """Unpinned conservation system: singular but symmetric and consistent."""
    rows, cols, data, rhs = _assemble_raw(field, drive)
    n = field.grid.n_cells
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n)), rhs


def _wrap_jump(grid: GridSpec, axis: int, dh: float) -> np.ndarray:
    """Head offset seen across each cell's +face (nonzero only at the wrap)."""
    jump = np.zeros(grid.shape3)
    if dh != 0.0:
        sel = [slice(None)] * 3
        sel[grid.view_dim(axis)] = grid.counts[axis] - 1
        jump[tuple(sel)] = dh
    return jump


def face_velocities(field: ConductivityField, heads: np.ndarray, drive: PeriodicDrive):
    """Darcy velocity through each cell's +face per axis, wrap-corrected."""
    grid = field.grid
    h = np.asarray(heads, dtype=np.float64).reshape(grid.shape3)
    vels = []
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        k = field.component_3d(axis)
        k_harm = 2.0 / (1.0 / k + 1.0 / np.roll(k, -1, axis=vd))
        dh_face = np.roll(h, -1, axis=vd) - h + _wrap_jump(grid, axis, drive.delta_h[axis])
        vels.append((-k_harm * dh_face / grid.spacings[axis]).ravel())
    return tuple(vels)


def _cell_divergence(grid: GridSpec, vels) -> np.ndarray:
    div = np.zeros(grid.shape3)
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        q = vels[axis].reshape(grid.shape3) * grid.face_area(axis)
        div += q - np.roll(q, 1, axis=vd)
    return div.ravel()


def solve_patch(patch, drive: PeriodicDrive, tol_solve: float = 1e-10,
                max_direct_size: int = MAX_DIRECT_SIZE) -> PatchSolution:
    """Solve one periodic patch flow problem.

    Direct sparse factorization up to ``max_direct_size`` cells, conjugate
    gradients on the (consistent) singular symmetric system above that.
    The anchor cell head is 0 exactly and the cellwise flux imbalance is
    verified against ``tol_solve`` times the largest transmissibility.
    """
    field = _as_field(patch)
    grid = field.grid
    if grid.n_cells <= max_direct_size:
        matrix, rhs = assemble_periodic(field, drive)
        heads = spla.splu(matrix.tocsc()).solve(rhs)
    else:
        matrix, rhs = _symmetric_system(field, drive)
        inv_diag = 1.0 / matrix.diagonal()
        precond = spla.LinearOperator(matrix.shape, matvec=lambda x: inv_diag * x)
        heads, info = spla.cg(matrix, rhs, rtol=tol_solve, atol=0.0, M=precond,
                              maxiter=20 * grid.n_cells)
        if info != 0:
            resid = np.linalg.norm(matrix @ heads - rhs)
            raise ConvergenceError(f"cg stopped with info={info}, residual {resid:.3e}")
    heads = heads - heads[0]
    vels = face_velocities(field, heads, drive)
    scale = max(float(np.max(c)) * grid.spacings[a] for a, c in
                enumerate(_face_coefficients(field)))
    scale *= max(1.0, max(abs(v) for v in drive.delta_h))
    worst = float(np.max(np.abs(_cell_divergence(grid, vels))))
    if worst > tol_solve * scale:
        raise ConvergenceError(
            f"flux imbalance {worst:.3e} exceeds {tol_solve:.1e} x transmissibility scale"
        )
    return PatchSolution(ScalarField(grid, heads), vels, drive)


def average_gradient(sol: PatchSolution) -> np.ndarray:
    """Volume-averaged head gradient; ΔH_a / L_a exactly, by telescoping."""
    grid = sol.heads.grid
    closed = np.array([sol.drive.delta_h[a] / grid.length(a) for a in range(grid.ndim)])
    h = sol.heads.as_3d()
    discrete = np.empty(grid.ndim)
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        dh_face = np.roll(h, -1, axis=vd) - h + _wrap_jump(grid, axis, sol.drive.delta_h[axis])
        discrete[axis] = dh_face.mean() / grid.spacings[axis]
    assert np.allclose(discrete, closed, rtol=0, atol=1e-9 * max(1.0, np.abs(closed).max()))
    return closed


def average_velocity(sol: PatchSolution) -> np.ndarray:
    """Volume-averaged Darcy velocity (each wrap face counted once)."""
    return np.array([v.mean() for v in sol.face_velocities])


def tensor_from_heads(field: ConductivityField, heads_by_axis, delta_h: float = 1.0) -> np.ndarray:
    """Equivalent tensor from one head array per canonical axis drive.

    Method-agnostic: the head arrays may come from the sparse solver or
    from a surrogate model; velocities and averages are formed identically
    so the two routes share every downstream step.
    """
    grid = field.grid
    d = grid.ndim
    if len(heads_by_axis) != d:
        raise ValueError(f"need {d} head arrays, got {len(heads_by_axis)}")
    keq = np.empty((d, d))
    for axis in range(d):
        drive = PeriodicDrive.canonical(axis, d, delta_h)
        vels = face_velocities(field, heads_by_axis[axis], drive)
        vbar = np.array([v.mean() for v in vels])
        # mean gradient is diagonal: ΔH_a / L_a, hence one column per drive
        keq[:, axis] = -vbar * grid.length(axis) / delta_h
    return keq


def _validate_tensor(keq: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(keq)):
        raise ValueError("equivalent tensor has non-finite entries")
    if np.any(np.diag(keq) <= 0):
        raise ValueError("equivalent tensor diagonal must be positive")
    return keq


def equivalent_tensor(patch, delta_h: float = 1.0, tol_solve: float = 1e-10,
                      max_direct_size: int = MAX_DIRECT_SIZE) -> np.ndarray:
    """Equivalent conductivity tensor of one patch (d x d array).

    One periodic solve per canonical axis drive; the matrix is factorized
    once and reused since only the right-hand side depends on the drive.
    """
    field = _as_field(patch)
    grid = field.grid
    d = grid.ndim
    heads_by_axis = []
    if grid.n_cells <= max_direct_size:
        base = PeriodicDrive.canonical(0, d, delta_h)
        matrix, _ = assemble_periodic(field, base)
        factor = spla.splu(matrix.tocsc())
        for axis in range(d):
            _, rhs = assemble_periodic(field, PeriodicDrive.canonical(axis, d, delta_h))
            heads = factor.solve(rhs)
            heads_by_axis.append(heads - heads[0])
    else:
        for axis in range(d):
            sol = solve_patch(field, PeriodicDrive.canonical(axis, d, delta_h),
                              tol_solve, max_direct_size)
            heads_by_axis.append(sol.heads.values)
    return _validate_tensor(tensor_from_heads(field, heads_by_axis, delta_h))
