"""Correlated lognormal field generation via truncated Karhunen-Loeve expansion.

The log-conductivity covariance is a separable exponential kernel, so the
discrete covariance matrix is a Kronecker product of small per-axis
matrices.  Eigenpairs of the full problem are tensor products of per-axis
eigenpairs, which keeps multi-million-cell grids tractable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from upflow.grid import ConductivityField, GridSpec, ScalarField


class DecompositionError(ValueError):
    """The numerical covariance failed the positive-semidefiniteness check."""


@dataclass(frozen=True)
class CovarianceModel:
    """Separable exponential covariance of the log-conductivity field.

    cov(p, q) = variance * exp(-sum_a |p_a - q_a| / corr_lengths[a])
    """

    mean_log_k: float
    variance: float
    corr_lengths: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "corr_lengths", tuple(float(v) for v in self.corr_lengths))
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")
        if len(self.corr_lengths) not in (2, 3):
            raise ValueError("need one correlation length per axis (2 or 3)")
        if min(self.corr_lengths) <= 0:
            raise ValueError(f"correlation lengths must be > 0, got {self.corr_lengths}")


@dataclass(frozen=True)
class RandomVector:
    """Standard-normal mode coefficients, tagged with their seed if known."""

    xi: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=np.float64).ravel())


@dataclass(frozen=True)
class KLEBasis:
    """Truncated discrete basis: tensor products of per-axis eigenvectors.

    ``mode_indices[i] = (a, b, c)`` selects column a of the x eigenvector
    matrix, b of y, c of z; the mode's eigenfunction is their outer product
    and ``eigenvalues[i]`` the matching product eigenvalue (descending).
    """

    grid: GridSpec
    eigenvalues: np.ndarray
    mode_indices: np.ndarray
    axis_vectors: tuple[np.ndarray, ...] = field(repr=False)
    energy_fraction: float = 1.0
    total_energy: float = 0.0

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def eigenfunction(self, i: int) -> np.ndarray:
        """Flat (x-fastest) samples of mode i; unit discrete norm."""
        a, b, c = self.mode_indices[i]
        fx = self.axis_vectors[0][:, a]
        fy = self.axis_vectors[1][:, b]
        fz = self.axis_vectors[2][:, c]
        return np.einsum("z,y,x->zyx", fz, fy, fx).ravel()

    def eigenfunctions(self) -> np.ndarray:
        """All modes as a dense (n_modes, n_cells) matrix."""
        return np.stack([self.eigenfunction(i) for i in range(self.n_modes)])


def _axis_covariance(n: int, spacing: float, corr_length: float) -> np.ndarray:
    lags = np.arange(n) * spacing
    return np.exp(-np.abs(lags[:, None] - lags[None, :]) / corr_length)


def _validate_spectrum(vals: np.ndarray) -> np.ndarray:
    """Clamp roundoff negatives to zero; reject genuine indefiniteness."""
    top = float(vals.max())
    if top <= 0:
        raise DecompositionError("covariance spectrum has no positive eigenvalue")
    if float(vals.min()) < -1e-10 * top:
        raise DecompositionError(
            f"covariance eigenvalue {vals.min():.3e} below -1e-10 x {top:.3e}"
        )
    return np.maximum(vals, 0.0)


def decompose(model: CovarianceModel, grid: GridSpec, target_energy: float = 0.9) -> KLEBasis:
    """Truncated eigenbasis retaining at least ``target_energy`` of the trace.

    Eigenpairs of the separable kernel factor into per-axis 1D problems;
    product eigenvalues are sorted descending (stable) and kept up to the
    smallest count whose cumulative sum reaches the target.
    """
    if not 0.0 < target_energy <= 1.0:
        raise ValueError(f"target_energy must be in (0, 1], got {target_energy}")
    if len(model.corr_lengths) != grid.ndim:
        raise ValueError(
            f"model has {len(model.corr_lengths)} correlation lengths for a {grid.ndim}D grid"
        )
    eta = model.corr_lengths + (1.0,) * (3 - len(model.corr_lengths))
    axis_vals, axis_vecs = [], []
    for axis in range(3):
        cov = _axis_covariance(grid.counts[axis], grid.spacings[axis], eta[axis])
        vals, vecs = np.linalg.eigh(cov)
        axis_vals.append(_validate_spectrum(vals))
        axis_vecs.append(vecs)

    products = model.variance * np.einsum(
        "x,y,z->zyx", axis_vals[0], axis_vals[1], axis_vals[2]
    ).ravel()
    order = np.argsort(-products, kind="stable")
    sorted_vals = products[order]
    total = float(sorted_vals.sum())
    if total <= 0:
        raise DecompositionError("covariance trace is zero; nothing to expand")
    frac = np.cumsum(sorted_vals) / total
    n_modes = int(np.searchsorted(frac, target_energy - 1e-12)) + 1
    n_modes = min(n_modes, len(sorted_vals))
    kept = order[:n_modes]

    # unravel flat mode ids (x-fastest) back to per-axis eigenvector columns
    nx, ny = grid.nx, grid.ny
    idx_x = kept % nx
    idx_y = (kept // nx) % ny
    idx_z = kept // (nx * ny)
    mode_indices = np.stack([idx_x, idx_y, idx_z], axis=1)
    return KLEBasis(
        grid=grid,
        eigenvalues=sorted_vals[:n_modes],
        mode_indices=mode_indices,
        axis_vectors=tuple(axis_vecs),
        energy_fraction=float(frac[n_modes - 1]),
        total_energy=total,
    )


def draw_xi(basis: KLEBasis, seed: int) -> RandomVector:
    """Seeded standard-normal coefficients (PCG64 generator)."""
    rng = np.random.default_rng(seed)
    return RandomVector(rng.standard_normal(basis.n_modes), seed=seed)


def sample(basis: KLEBasis, model: CovarianceModel, xi: RandomVector) -> ScalarField:
    """Realization Y = mean + sum_i sqrt(lambda_i) f_i xi_i as a cell field."""
    coeff = np.asarray(xi.xi if isinstance(xi, RandomVector) else xi, dtype=np.float64)
    if coeff.shape != (basis.n_modes,):
        raise ValueError(f"expected {basis.n_modes} coefficients, got {coeff.shape}")
    grid = basis.grid
    weights = np.sqrt(basis.eigenvalues) * coeff
    # scatter mode weights into a (z, y, x) core, then contract axis by axis
    core = np.zeros(grid.shape3)
    a, b, c = basis.mode_indices.T
    core[c, b, a] = weights
    vx, vy, vz = basis.axis_vectors
    out = np.einsum("cba,Zc->Zba", core, vz, optimize=True)
    out = np.einsum("Zba,Yb->ZYa", out, vy, optimize=True)
    out = np.einsum("ZYa,Xa->ZYX", out, vx, optimize=True)
    return ScalarField(grid, model.mean_log_k + out.ravel())


def to_conductivity(y: ScalarField, anisotropy=(1.0, 1.0, 1.0)) -> ConductivityField:
    """Componentwise exp(Y) scaled by per-axis anisotropy multipliers."""
    mult = tuple(float(m) for m in anisotropy)
    if len(mult) == 2:
        mult = (*mult, 1.0)
    if min(mult) <= 0:
        raise ValueError(f"anisotropy multipliers must be > 0, got {anisotropy}")
    kx = mult[0] * np.exp(y.values)
    ky = mult[1] / mult[0] * kx
    kz = None if y.grid.is_2d else mult[2] / mult[0] * kx
    return ConductivityField(y.grid, kx, ky, kz)
