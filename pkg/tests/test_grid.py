import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upflow.grid import (
    ConductivityField,
    CoarseModel,
    DimensionMismatchError,
    GridSpec,
    ScalarField,
    block_average,
    coarse_grid_spec,
    partition,
    reassemble,
)


def random_field(grid, seed=0, aniso=False):
    rng = np.random.default_rng(seed)
    kx = np.exp(rng.normal(size=grid.n_cells))
    if not aniso:
        return ConductivityField.isotropic(grid, kx)
    ky = np.exp(rng.normal(size=grid.n_cells))
    kz = None if grid.is_2d else np.exp(rng.normal(size=grid.n_cells))
    return ConductivityField(grid, kx, ky, kz)


class TestGridSpec:
    def test_rejects_bad_counts_and_spacings(self):
        with pytest.raises(ValueError):
            GridSpec(0, 4)
        with pytest.raises(ValueError):
            GridSpec(4, 4, dx=0.0)
        with pytest.raises(ValueError):
            GridSpec(4, 4, 2, dz=-1.0)

    def test_2d_is_unit_thickness_3d(self):
        g = GridSpec(8, 4, dx=2.0, dy=3.0)
        assert g.is_2d and g.ndim == 2
        assert g.n_cells == 32
        assert g.shape3 == (1, 4, 8)
        assert g.length(0) == 16.0 and g.length(1) == 12.0
        # x-face area in 2D is dy times the unit thickness
        assert g.face_area(0) == 3.0
        assert g.face_area(1) == 2.0

    def test_one_cell_thick_slab_can_stay_3d(self):
        slab = GridSpec(4, 4, 1, dim=3)
        assert not slab.is_2d and slab.ndim == 3
        with pytest.raises(ValueError):
            GridSpec(4, 4, 2, dim=2)

    def test_flat_index_is_x_fastest(self):
        g = GridSpec(3, 2, 2)
        vals = np.arange(g.n_cells, dtype=float)
        cube = ScalarField(g, vals).as_3d()
        # flat = i + nx*(j + ny*k)
        assert cube[0, 0, 1] == 1
        assert cube[0, 1, 0] == 3
        assert cube[1, 0, 0] == 6
        assert cube[1, 1, 2] == 11


class TestFields:
    def test_scalar_field_validates_size_and_finiteness(self):
        g = GridSpec(2, 2)
        with pytest.raises(ValueError):
            ScalarField(g, np.ones(3))
        with pytest.raises(ValueError):
            ScalarField(g, np.array([1.0, np.nan, 1.0, 1.0]))

    def test_conductivity_must_be_positive(self):
        g = GridSpec(2, 2)
        with pytest.raises(ValueError):
            ConductivityField.isotropic(g, np.array([1.0, 1.0, 0.0, 1.0]))

    def test_kz_presence_matches_dimensionality(self):
        g2 = GridSpec(2, 2)
        g3 = GridSpec(2, 2, 2)
        ones2, ones3 = np.ones(4), np.ones(8)
        with pytest.raises(ValueError):
            ConductivityField(g2, ones2, ones2, ones2)
        with pytest.raises(ValueError):
            ConductivityField(g3, ones3, ones3, None)
        assert ConductivityField.isotropic(g3, ones3).kz is not None

    def test_fields_are_immutable(self):
        fld = random_field(GridSpec(4, 4))
        with pytest.raises(ValueError):
            fld.kx[0] = 2.0


class TestPartition:
    def test_patch_counts_match_hand_examples(self):
        f = random_field(GridSpec(100, 100), seed=1)
        assert len(partition(f, 10)) == 100
        f = random_field(GridSpec(4, 4), seed=2)
        assert len(partition(f, 4)) == 1
        f = random_field(GridSpec(60, 220, 35), seed=3)
        assert len(partition(f, 5)) == 3696

    def test_indivisible_dimension_raises(self):
        f = random_field(GridSpec(10, 10))
        with pytest.raises(DimensionMismatchError):
            partition(f, 3)

    def test_patch_values_match_brute_force_slices(self):
        g = GridSpec(6, 4, 2, dx=0.5, dy=2.0, dz=1.5)
        f = random_field(g, seed=4, aniso=True)
        patches = partition(f, (3, 2, 2))
        assert len(patches) == 2 * 2 * 1
        kx3 = f.kx.reshape(g.shape3)
        for p in patches:
            ii, jj, kk = p.coarse_index
            want = kx3[kk * 2:(kk + 1) * 2, jj * 2:(jj + 1) * 2, ii * 3:(ii + 1) * 3]
            np.testing.assert_array_equal(p.field.kx.reshape(2, 2, 3), want)
            assert p.field.grid.spacings == g.spacings

    def test_patch_ordering_is_x_fastest(self):
        f = random_field(GridSpec(4, 4), seed=5)
        idx = [p.coarse_index for p in partition(f, 2)]
        assert idx == [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)]

    @settings(max_examples=25, deadline=None)
    @given(
        ncx=st.integers(1, 4), ncy=st.integers(1, 4), ncz=st.integers(1, 2),
        rx=st.integers(1, 3), ry=st.integers(1, 3), rz=st.integers(1, 2),
        seed=st.integers(0, 10_000),
    )
    def test_partition_reassemble_roundtrip(self, ncx, ncy, ncz, rx, ry, rz, seed):
        grid = GridSpec(ncx * rx, ncy * ry, ncz * rz)
        fld = random_field(grid, seed=seed, aniso=not grid.is_2d)
        back = reassemble(partition(fld, (rx, ry, rz)), grid)
        np.testing.assert_array_equal(back.kx, fld.kx)
        np.testing.assert_array_equal(back.ky, fld.ky)
        if not grid.is_2d:
            np.testing.assert_array_equal(back.kz, fld.kz)


class TestBlockAverage:
    def test_matches_loop_means(self):
        g = GridSpec(6, 6, 4)
        rng = np.random.default_rng(6)
        fld = ScalarField(g, rng.normal(size=g.n_cells))
        coarse = block_average(fld, 2)
        cube = fld.as_3d()
        got = coarse.as_3d()
        for kk in range(2):
            for jj in range(3):
                for ii in range(3):
                    want = cube[kk * 2:kk * 2 + 2, jj * 2:jj * 2 + 2, ii * 2:ii * 2 + 2].mean()
                    assert got[kk, jj, ii] == pytest.approx(want, rel=1e-14)

    def test_constant_field_is_preserved(self):
        fld = ScalarField.constant(GridSpec(10, 10), 3.25)
        np.testing.assert_allclose(block_average(fld, 5).values, 3.25, rtol=0, atol=0)

    def test_coarse_grid_scales_spacings(self):
        cg = coarse_grid_spec(GridSpec(100, 100, 1, dx=0.5, dy=0.5), 10)
        assert cg.counts == (10, 10, 1)
        assert cg.spacings == (5.0, 5.0, 1.0)


class TestCoarseModel:
    def test_shape_validation(self):
        cg = GridSpec(2, 2)
        with pytest.raises(ValueError):
            CoarseModel(cg, np.zeros((4, 3, 3)))

    def test_diagonal_field_extracts_diagonal(self):
        cg = GridSpec(2, 1)
        tensors = np.array([np.diag([1.0, 2.0]), [[3.0, 0.5], [0.5, 4.0]]])
        fld = CoarseModel(cg, tensors).diagonal_field()
        np.testing.assert_array_equal(fld.kx, [1.0, 3.0])
        np.testing.assert_array_equal(fld.ky, [2.0, 4.0])
