"""Loss terms for patch head prediction, with closed-form head gradients.

All terms are quadratic in the predicted head image, so dL/dHhat is exact
and cheap; the network backward pass does the rest.  Every function takes
a batch and a total-count denominator, returning a partial sum that can be
accumulated over chunks to reproduce full-batch values bit for bit.

Head images are [B, (z+2,) y+2, x+2] in view order; conductivity
components are [B, (z,) y, x] raw (not log) values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from upflow.grid import GridSpec


def _axis_dim(ndim: int, axis: int) -> int:
    """Batched-view dimension of physical axis ``axis`` ([B, (z,) y, x])."""
    return 1 + (ndim - 1 - axis)


def _take(arr, dim, index_or_slice):
    sel = [slice(None)] * arr.ndim
    sel[dim] = index_or_slice
    return arr[tuple(sel)]


def interior(pred: np.ndarray, ndim: int) -> np.ndarray:
    """Strip the ghost ring: the r^d cell-centered head block."""
    sel = (slice(None),) + (slice(1, -1),) * ndim
    return pred[sel]


def _interior_but_axis(pred: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    """Full extent along ``axis``, interior along the other spatial dims."""
    sel = [slice(1, -1)] * (ndim + 1)
    sel[0] = slice(None)
    sel[_axis_dim(ndim, axis)] = slice(None)
    return pred[tuple(sel)]


def _boundary_count(shape_r: tuple[int, ...], ndim: int, axis: int) -> int:
    """Entries on both boundary faces normal to ``axis`` (N_grid-b)."""
    n = 1
    for a in range(ndim):
        if a != axis:
            n *= shape_r[a]
    return 2 * n


def _wrap_faces(k_axis: np.ndarray, ndim: int, axis: int, grid: GridSpec) -> np.ndarray:
    """Flux coefficients of the r+1 faces along ``axis`` (wrap at both ends)."""
    dim = _axis_dim(ndim, axis)
    pad = [(0, 0)] * k_axis.ndim
    pad[dim] = (1, 1)
    kw = np.pad(k_axis, pad, mode="wrap")
    lo = _take(kw, dim, slice(None, -1))
    hi = _take(kw, dim, slice(1, None))
    harm = 2.0 / (1.0 / lo + 1.0 / hi)
    return harm * grid.face_area(axis) / grid.spacings[axis]


def loss_data(pred: np.ndarray, labels: np.ndarray, n_total: int):
    """Squared interior mismatch, per Eq. cell count and pair count."""
    ndim = pred.ndim - 1
    inner = interior(pred, ndim)
    if inner.shape != labels.shape:
        raise ValueError(f"label shape {labels.shape} vs interior {inner.shape}")
    n_grid = int(np.prod(inner.shape[1:]))
    diff = inner - labels
    value = float((diff * diff).sum()) / (n_grid * n_total)
    grad = np.zeros_like(pred)
    grad[(slice(None),) + (slice(1, -1),) * ndim] = 2.0 * diff / (n_grid * n_total)
    return value, grad


def loss_ge(pred: np.ndarray, k_components, grid: GridSpec, n_total: int):
    """Squared discrete flow-equation residual over all interior cells.

    Boundary-cell neighbors come from the ghost ring; the interface
    conductivity across a wrap face harmonically averages the two
    opposite-side interior cells.
    """
    ndim = grid.ndim
    residual = None
    faces = []
    slabs = []
    for axis in range(ndim):
        dim = _axis_dim(ndim, axis)
        slab = _interior_but_axis(pred, ndim, axis)
        af = _wrap_faces(k_components[axis], ndim, axis, grid)
        h_down = _take(slab, dim, slice(None, -2))
        h_mid = _take(slab, dim, slice(1, -1))
        h_up = _take(slab, dim, slice(2, None))
        af_low = _take(af, dim, slice(None, -1))
        af_high = _take(af, dim, slice(1, None))
        term = af_high * (h_up - h_mid) - af_low * (h_mid - h_down)
        residual = term if residual is None else residual + term
        faces.append((af_low, af_high))
        slabs.append(dim)
    n_grid = int(np.prod(residual.shape[1:]))
    value = float((residual * residual).sum()) / (n_grid * n_total)
    dres = 2.0 * residual / (n_grid * n_total)
    grad = np.zeros_like(pred)
    for axis in range(ndim):
        dim = slabs[axis]
        af_low, af_high = faces[axis]
        gslab = _interior_but_axis(grad, ndim, axis)
        _take(gslab, dim, slice(2, None))[...] += dres * af_high
        _take(gslab, dim, slice(1, -1))[...] -= dres * (af_high + af_low)
        _take(gslab, dim, slice(None, -2))[...] += dres * af_low
    return value, grad


def _axis_faces(pred, k_components, grid, axis):
    """Boundary slabs and the wrap-face conductivity for one axis."""
    ndim = grid.ndim
    dim = _axis_dim(ndim, axis)
    slab = _interior_but_axis(pred, ndim, axis)
    ghost_low = _take(slab, dim, 0)
    int_low = _take(slab, dim, 1)
    int_high = _take(slab, dim, -2)
    ghost_high = _take(slab, dim, -1)
    k = k_components[axis]
    k_low = _take(k, dim, 0)
    k_high = _take(k, dim, -1)
    k_wrap = 2.0 / (1.0 / k_low + 1.0 / k_high)
    return dim, slab, (ghost_low, int_low, int_high, ghost_high), k_wrap


def loss_bc_head(pred: np.ndarray, drive, grid: GridSpec, n_total: int):
    """Periodic-head mismatch of the ghost ring against the opposite edge.

    ghost_low must equal interior_high - dH and ghost_high must equal
    interior_low + dH; both sides are averaged over the boundary count, so
    a constant prediction under a unit offset contributes exactly 1 for
    the driven axis.
    """
    ndim = grid.ndim
    value = 0.0
    grad = np.zeros_like(pred)
    for axis in range(ndim):
        dim = _axis_dim(ndim, axis)
        slab = _interior_but_axis(pred, ndim, axis)
        dh = drive.delta_h[axis]
        m_low = _take(slab, dim, 0) - _take(slab, dim, -2) + dh
        m_high = _take(slab, dim, -1) - _take(slab, dim, 1) - dh
        n_b = _boundary_count(grid.counts, ndim, axis)
        value += float((m_low * m_low).sum() + (m_high * m_high).sum()) / (n_b * n_total)
        gslab = _interior_but_axis(grad, ndim, axis)
        scale = 2.0 / (n_b * n_total)
        _take(gslab, dim, 0)[...] += scale * m_low
        _take(gslab, dim, -2)[...] -= scale * m_low
        _take(gslab, dim, -1)[...] += scale * m_high
        _take(gslab, dim, 1)[...] -= scale * m_high
    return value, grad


def loss_bc_flux(pred: np.ndarray, k_components, drive, grid: GridSpec, n_total: int):
    """Darcy-velocity mismatch between the two wrap faces of each axis.

    Both boundary velocities use the same wrap-face harmonic conductivity,
    so an exactly periodic prediction zeroes the term.  The head offsets of
    ``drive`` live inside the ghost values and cancel in the difference.
    """
    ndim = grid.ndim
    value = 0.0
    grad = np.zeros_like(pred)
    for axis in range(ndim):
        dim, _, (ghost_low, int_low, int_high, ghost_high), k_wrap = _axis_faces(
            pred, k_components, grid, axis
        )
        coef = k_wrap / grid.spacings[axis]
        v_low = -coef * (int_low - ghost_low)
        v_high = -coef * (ghost_high - int_high)
        dv = v_low - v_high
        n_b = _boundary_count(grid.counts, ndim, axis)
        value += float((dv * dv).sum()) / (n_b * n_total)
        gslab = _interior_but_axis(grad, ndim, axis)
        gscale = 2.0 * dv / (n_b * n_total)
        _take(gslab, dim, 0)[...] += gscale * coef
        _take(gslab, dim, 1)[...] -= gscale * coef
        _take(gslab, dim, -2)[...] -= gscale * coef
        _take(gslab, dim, -1)[...] += gscale * coef
    return value, grad


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted loss components; ``total`` is their weighted sum."""

    l_data: float
    l_ge: float
    l_bc_h: float
    l_bc_v: float
    total: float

    def __post_init__(self):
        for name in ("l_data", "l_ge", "l_bc_h", "l_bc_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def total_loss(l_data: float, l_ge: float, l_bc_h: float, l_bc_v: float,
               weights, n_labeled: int) -> LossBreakdown:
    """Weighted sum per the configured term weights.

    With no labeled pairs the data term is omitted entirely and reported
    as zero.
    """
    lam_data, lam_ge, lam_bc_h, lam_bc_v = weights
    if n_labeled == 0:
        l_data = 0.0
        lam_data = 0.0
    total = lam_data * l_data + lam_ge * l_ge + lam_bc_h * l_bc_h + lam_bc_v * l_bc_v
    return LossBreakdown(l_data, l_ge, l_bc_h, l_bc_v, total)
