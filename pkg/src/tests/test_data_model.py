# tests/test_data_model.py
import math

import numpy as np
import pytest

from src.stiv.data_model import (
    Dataset,
    compute_dx,
    compute_dz,
    compute_psi,
    cross_scale,
    psi_values,
    qhat,
)
from src.stiv.exceptions import ConstantMissing, DataError, DegenerateColumn, DimensionMismatch


class TestDataset:
    """Test suite for Dataset invariants."""

    def test_constant_detected(self, iv_dataset):
        """Test that the all-ones instrument is found."""
        assert iv_dataset.const_instr_idx == 0
        assert iv_dataset.endo_idx == (0,)
        assert iv_dataset.instrument_of(1) == 3

    def test_missing_constant(self):
        """Test that instruments without a ones column are rejected."""
        rng = np.random.default_rng(0)
        with pytest.raises(ConstantMissing):
            Dataset(y=rng.standard_normal(5), x=rng.standard_normal((5, 1)), z=rng.standard_normal((5, 2)))

    def test_zero_column(self):
        """Test that identically zero regressors are rejected."""
        n = 6
        with pytest.raises(DegenerateColumn) as info:
            Dataset(y=np.ones(n), x=np.zeros((n, 1)), z=np.ones((n, 1)))
        assert info.value.kind == "regressor"

    def test_row_mismatch(self):
        """Test that row counts must agree."""
        with pytest.raises(DimensionMismatch):
            Dataset(y=np.ones(4), x=np.ones((5, 1)), z=np.ones((4, 1)))

    def test_exogenous_must_be_instrument(self):
        """Test that declared exogenous regressors appear among the instruments."""
        rng = np.random.default_rng(1)
        n = 10
        with pytest.raises(DataError):
            Dataset(y=rng.standard_normal(n), x=rng.standard_normal((n, 2)), z=np.ones((n, 1)), exo_idx=(1,))

    def test_arrays_are_frozen(self, iv_dataset):
        """Test that stored arrays are read-only."""
        with pytest.raises(ValueError):
            iv_dataset.x[0, 0] = 1.0


class TestScales:
    """Test suite for normalizations and the Psi matrix."""

    def test_rms_scale(self, iv_dataset):
        """Test D_X entries against an explicit loop."""
        dx = compute_dx(iv_dataset, "rms")
        for k in range(iv_dataset.K):
            expected = 1.0 / np.sqrt(sum(v * v for v in iv_dataset.x[:, k]) / iv_dataset.n)
            assert dx.entries[k] == pytest.approx(expected, rel=1e-12)

    def test_maxabs_scale(self, iv_dataset):
        """Test the maximum-absolute-value normalization."""
        dx = compute_dx(iv_dataset, "maxabs")
        assert dx.entries == pytest.approx(1.0 / np.max(np.abs(iv_dataset.x), axis=0))

    def test_dz_requires_constant(self, iv_dataset):
        """Test that I must contain the constant instrument."""
        with pytest.raises(ConstantMissing):
            compute_dz(iv_dataset, (1,))

    def test_dz_mixed(self, iv_dataset):
        """Test that cone instruments use the cross scale and others the max-abs scale."""
        dz = compute_dz(iv_dataset, (0, 2))
        xz = cross_scale(iv_dataset.x, iv_dataset.z[:, [0, 2]])
        assert dz.entries[[0, 2]] == pytest.approx(1.0 / xz)
        assert dz.entries[1] == pytest.approx(1.0 / np.max(np.abs(iv_dataset.z[:, 1])))
        assert dz.index_set == (0, 2)

    def test_cross_scale_definition(self, iv_dataset):
        """Test (x.z)_l against compensated sums entry by entry."""
        x, z = iv_dataset.x, iv_dataset.z
        n = iv_dataset.n
        xz = cross_scale(x, z)
        for l in range(iv_dataset.L):
            per_k = []
            for k in range(iv_dataset.K):
                second = math.fsum(x[:, k] ** 2) / n
                per_k.append(math.fsum(x[:, k] ** 2 * z[:, l] ** 2) / n / second)
            assert xz[l] == pytest.approx(math.sqrt(max(per_k)), rel=1e-12)

    def test_cross_scale_long_sample(self):
        """Test that a million equal terms stay accurate to a few ulps."""
        n = 10 ** 6
        xz = cross_scale(np.ones((n, 1)), np.full((n, 1), 0.1))
        assert xz[0] == pytest.approx(0.1, abs=1e-14)

    def test_psi_entries(self, iv_dataset):
        """Test Psi against its definition entry by entry."""
        dx = compute_dx(iv_dataset)
        dz = compute_dz(iv_dataset, (0,))
        psi = compute_psi(iv_dataset, dx, dz)
        n = iv_dataset.n
        for l in range(iv_dataset.L):
            for k in range(iv_dataset.K):
                expected = dz.entries[l] * dx.entries[k] * math.fsum(iv_dataset.z[:, l] * iv_dataset.x[:, k]) / n
                assert psi.values[l, k] == pytest.approx(expected, rel=1e-12, abs=1e-13)

    def test_psi_long_sample(self):
        """Test that a million equal cross products stay accurate to a few ulps."""
        n = 10 ** 6
        values = psi_values(np.ones((n, 1)), np.full((n, 1), 0.1), np.ones(1), np.ones(1))
        assert values[0, 0] == pytest.approx(0.1, abs=1e-14)

    def test_qhat(self, iv_dataset):
        """Test the empirical second moment of z_l u."""
        beta = np.array([1.0, 0.5])
        u = iv_dataset.y - iv_dataset.x @ beta
        assert qhat(iv_dataset, beta, 1) == pytest.approx(np.mean((iv_dataset.z[:, 1] * u) ** 2))
