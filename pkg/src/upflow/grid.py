"""Structured-grid geometry, cell fields, and fine/coarse partitioning.

Every field in this package stores one value per cell in a flat array with
x fastest, then y, then z (``flat = i + nx*(j + ny*k)``).  The matching 3D
view has shape ``(nz, ny, nx)``.  2D problems are plain 3D grids with
``nz = 1``; there is no separate 2D code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

#: axis order used everywhere: 0 = x, 1 = y, 2 = z
AXES = (0, 1, 2)


class DimensionMismatchError(ValueError):
    """A grid dimension is not divisible by the requested coarsening ratio."""


@dataclass(frozen=True)
class GridSpec:
    """Cell counts and spacings of a structured grid (``nz = 1`` for 2D).

    ``dim`` defaults to 2 when ``nz == 1`` and 3 otherwise, but can be set
    to 3 explicitly for one-cell-thick slabs of a 3D model (they keep a z
    conductivity component and a z flow axis).
    """

    nx: int
    ny: int
    nz: int = 1
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0
    dim: int | None = None

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"cell counts must be >= 1, got {(self.nx, self.ny, self.nz)}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError(f"spacings must be > 0, got {(self.dx, self.dy, self.dz)}")
        if self.dim is None:
            object.__setattr__(self, "dim", 2 if self.nz == 1 else 3)
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.dim == 2 and self.nz != 1:
            raise ValueError(f"a 2D grid requires nz=1, got nz={self.nz}")

    @property
    def is_2d(self) -> bool:
        return self.dim == 2

    @property
    def ndim(self) -> int:
        return self.dim

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def spacings(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def shape3(self) -> tuple[int, int, int]:
        """Shape of the (z, y, x) view of a flat cell array."""
        return (self.nz, self.ny, self.nx)

    def length(self, axis: int) -> float:
        """Domain extent along ``axis``."""
        return self.counts[axis] * self.spacings[axis]

    def face_area(self, axis: int) -> float:
        """Area of a cell face normal to ``axis`` (dy in 2D x-faces, etc.)."""
        s = self.spacings
        return s[(axis + 1) % 3] * s[(axis + 2) % 3]

    def view_dim(self, axis: int) -> int:
        """Dimension of the (z, y, x) view that varies along ``axis``."""
        return 2 - axis


def _check_values(grid: GridSpec, values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != grid.n_cells:
        raise ValueError(f"{name} has {values.size} entries for a {grid.n_cells}-cell grid")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite entries")
    return values


@dataclass(frozen=True)
class ScalarField:
    """One finite value per cell (heads, log-conductivity, ...)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, "values"))
        self.values.setflags(write=False)

    def as_3d(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape3)

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.n_cells, float(value)))


@dataclass(frozen=True)
class ConductivityField:
    """Per-cell diagonal conductivity components on a structured grid.

    ``kz`` is ``None`` on 2D grids.  All components are strictly positive.
    """

    grid: GridSpec
    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kx", _check_values(self.grid, self.kx, "kx"))
        object.__setattr__(self, "ky", _check_values(self.grid, self.ky, "ky"))
        if self.grid.is_2d:
            if self.kz is not None:
                raise ValueError("kz must be None on a 2D grid")
        else:
            if self.kz is None:
                raise ValueError("kz is required on a 3D grid")
            object.__setattr__(self, "kz", _check_values(self.grid, self.kz, "kz"))
        for name in ("kx", "ky", "kz"):
            comp = getattr(self, name)
            if comp is None:
                continue
            if np.any(comp <= 0):
                raise ValueError(f"{name} must be strictly positive")
            comp.setflags(write=False)

    @classmethod
    def isotropic(cls, grid: GridSpec, values: np.ndarray) -> "ConductivityField":
        values = _check_values(grid, values, "values")
        kz = None if grid.is_2d else values.copy()
        return cls(grid, values.copy(), values.copy(), kz)

    def component(self, axis: int) -> np.ndarray:
        comp = (self.kx, self.ky, self.kz)[axis]
        if comp is None:
            raise ValueError("no z component on a 2D grid")
        return comp

    @property
    def components(self) -> tuple[np.ndarray, ...]:
        if self.grid.is_2d:
            return (self.kx, self.ky)
        return (self.kx, self.ky, self.kz)

    def component_3d(self, axis: int) -> np.ndarray:
        return self.component(axis).reshape(self.grid.shape3)

    def scaled(self, factor: float) -> "ConductivityField":
        kz = None if self.kz is None else factor * self.kz
        return ConductivityField(self.grid, factor * self.kx, factor * self.ky, kz)


@dataclass(frozen=True)
class Patch:
    """One coarse block of the fine field, tagged with its coarse index."""

    coarse_index: tuple[int, int, int]
    field: ConductivityField


@dataclass(frozen=True)
class CoarseModel:
    """Equivalent-conductivity tensors per coarse cell.

    ``tensors`` has shape ``(n_coarse_cells, d, d)`` with d the grid
    dimensionality, ordered like any flat cell array (x fastest).
    """

    coarse_grid: GridSpec
    tensors: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.coarse_grid.ndim
        tensors = np.asarray(self.tensors, dtype=np.float64)
        if tensors.shape != (self.coarse_grid.n_cells, d, d):
            raise ValueError(
                f"expected tensors of shape {(self.coarse_grid.n_cells, d, d)}, got {tensors.shape}"
            )
        object.__setattr__(self, "tensors", tensors)

    def diagonal_field(self) -> ConductivityField:
        """Diagonal components as a conductivity field for coarse TPFA solves."""
        kx = self.tensors[:, 0, 0].copy()
        ky = self.tensors[:, 1, 1].copy()
        kz = None if self.coarse_grid.is_2d else self.tensors[:, 2, 2].copy()
        return ConductivityField(self.coarse_grid, kx, ky, kz)


def _normalize_ratio(grid: GridSpec, ratio) -> tuple[int, int, int]:
    if np.isscalar(ratio):
        r = int(ratio)
        ratios = (r, r, 1 if grid.is_2d else r)
    else:
        ratios = tuple(int(r) for r in ratio)
        if len(ratios) == 2:
            ratios = (*ratios, 1)
    if len(ratios) != 3 or min(ratios) < 1:
        raise ValueError(f"invalid ratio {ratio!r}")
    for axis, name in zip(AXES, "xyz"):
        if grid.counts[axis] % ratios[axis] != 0:
            raise DimensionMismatchError(
                f"{name}-dimension {grid.counts[axis]} not divisible by ratio {ratios[axis]}"
            )
    return ratios


def coarse_grid_spec(grid: GridSpec, ratio) -> GridSpec:
    rx, ry, rz = _normalize_ratio(grid, ratio)
    return GridSpec(
        grid.nx // rx, grid.ny // ry, grid.nz // rz,
        grid.dx * rx, grid.dy * ry, grid.dz * rz,
        dim=grid.dim,
    )


def partition(fld: ConductivityField, ratio) -> list[Patch]:
    """Split a fine field into coarse blocks of ``ratio`` cells per axis.

    Patches tile the field exactly once and are ordered x fastest, then y,
    then z over coarse indices.  Raises :class:`DimensionMismatchError` if
    any dimension is not divisible by its ratio.
    """
    grid = fld.grid
    rx, ry, rz = _normalize_ratio(grid, ratio)
    patch_grid = GridSpec(rx, ry, rz, grid.dx, grid.dy, grid.dz, dim=grid.dim)
    ncx, ncy, ncz = grid.nx // rx, grid.ny // ry, grid.nz // rz

    comps = [c.reshape(grid.shape3) for c in (fld.kx, fld.ky, fld.kz) if c is not None]
    patches = []
    for kk in range(ncz):
        for jj in range(ncy):
            for ii in range(ncx):
                block = (
                    slice(kk * rz, (kk + 1) * rz),
                    slice(jj * ry, (jj + 1) * ry),
                    slice(ii * rx, (ii + 1) * rx),
                )
                parts = [c[block].ravel() for c in comps]
                kz = parts[2] if len(parts) == 3 else None
                patches.append(
                    Patch((ii, jj, kk), ConductivityField(patch_grid, parts[0], parts[1], kz))
                )
    # x-fastest coarse ordering, but emitted z-outer above; reorder is a no-op
    # because the loops already run x innermost.
    return patches


def reassemble(patches: list[Patch], grid: GridSpec) -> ConductivityField:
    """Inverse of :func:`partition`; bit-exact for untouched patches."""
    if not patches:
        raise ValueError("no patches to reassemble")
    pg = patches[0].field.grid
    rx, ry, rz = pg.nx, pg.ny, pg.nz
    ncomp = len(patches[0].field.components)
    comps = [np.empty(grid.shape3) for _ in range(ncomp)]
    for patch in patches:
        ii, jj, kk = patch.coarse_index
        block = (
            slice(kk * rz, (kk + 1) * rz),
            slice(jj * ry, (jj + 1) * ry),
            slice(ii * rx, (ii + 1) * rx),
        )
        for comp, part in zip(comps, patch.field.components):
            comp[block] = part.reshape(pg.shape3)
    flat = [c.ravel() for c in comps]
    kz = flat[2] if ncomp == 3 else None
    return ConductivityField(grid, flat[0], flat[1], kz)


def block_average(fld: ScalarField, ratio) -> ScalarField:
    """Arithmetic mean of each coarse block's fine values."""
    grid = fld.grid
    rx, ry, rz = _normalize_ratio(grid, ratio)
    ncx, ncy, ncz = grid.nx // rx, grid.ny // ry, grid.nz // rz
    blocks = fld.as_3d().reshape(ncz, rz, ncy, ry, ncx, rx)
    means = blocks.mean(axis=(1, 3, 5))
    return ScalarField(coarse_grid_spec(grid, (rx, ry, rz)), means.ravel())
