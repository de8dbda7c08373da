# tests/test_two_stage.py
from dataclasses import replace

import numpy as np
import pytest

from src.stiv.data_model import Dataset
from src.stiv.exceptions import DataError, DegenerateInstrument, InfiniteC1, NormalizationMismatch, SpecInvalid
from src.stiv.stiv_core import StivSpec
from src.stiv.two_stage import (
    build_2s_dataset,
    first_stage_c1,
    fit_first_stage,
    fit_stiv_2s,
    reduced_form_dataset,
    render_first_stage,
    two_stage_moments,
)

R = 0.15


@pytest.fixture
def first_stage(iv_dataset):
    """First stage for x0 with C1 forced finite so the second stage can run."""
    fsf = fit_first_stage(iv_dataset, k_end=0, r=R)
    if fsf.infinite:
        fsf = replace(fsf, C1=0.05)
    return fsf


class TestFirstStage:
    """Test suite for the reduced-form regression."""

    def test_reduced_form_dataset(self, iv_dataset):
        """Test that x_k is regressed on every instrument."""
        rf = reduced_form_dataset(iv_dataset, 0)
        assert np.array_equal(rf.y, iv_dataset.x[:, 0])
        assert np.array_equal(rf.x, iv_dataset.z)
        assert rf.K == iv_dataset.L

    @pytest.mark.parametrize("sigma,r,kappa,expected", [
        (1.0, 0.1, 0.5, 2 * 0.1 / 0.5 / (1 - 0.01 / 0.5)),
        (2.0, 0.3, 0.05, np.inf),
        (1.0, 0.1, 0.0, np.inf),
        (1.0, 0.1, np.inf, 0.0),
    ])
    def test_c1(self, sigma, r, kappa, expected):
        """Test C1 and its infinite corner."""
        assert first_stage_c1(sigma, r, kappa) == pytest.approx(expected)

    def test_fit(self, iv_dataset):
        """Test that the first stage picks the projection instruments."""
        fsf = fit_first_stage(iv_dataset, k_end=0, r=R)
        assert fsf.c_rf == 0.1
        assert fsf.fit.kind == "first_stage"
        assert fsf.zeta_hat.shape == (iv_dataset.L,)
        assert {1, 2} <= set(fsf.support)
        report = fsf.to_report()
        assert report.k_end == 1
        assert all(l >= 1 for l in report.support)

    def test_exogenous_target_rejected(self, iv_dataset):
        """Test that only endogenous regressors get a first stage."""
        with pytest.raises(SpecInvalid):
            fit_first_stage(iv_dataset, k_end=1, r=R)
        with pytest.raises(DataError):
            fit_first_stage(iv_dataset, k_end=5, r=R)

    def test_render(self, first_stage):
        """Test the first-stage table."""
        text = render_first_stage(first_stage.to_report(), names=["const", "z1", "z2", "w"])
        assert "sigma_RF" in text and "C1" in text


class TestSecondStage:
    """Test suite for the enlarged-constraint second stage."""

    def test_instrument_matrix(self, iv_dataset, first_stage):
        """Test Z_2S and its normalization."""
        Z2, d2 = build_2s_dataset(iv_dataset, first_stage)
        zhat = iv_dataset.z @ first_stage.zeta_hat
        assert np.allclose(Z2[:, 0], zhat)
        assert np.array_equal(Z2[:, 1], iv_dataset.x[:, 1])
        assert d2.entries[0] == pytest.approx(1.0 / (np.max(np.abs(zhat)) + 2 * first_stage.C1))
        assert d2.entries[1] == pytest.approx(1.0 / np.max(np.abs(iv_dataset.x[:, 1])))
        moments = two_stage_moments(iv_dataset, Z2, d2)
        assert moments.cone_w.shape == (iv_dataset.n, 1)

    def test_infinite_c1(self, iv_dataset, first_stage):
        """Test that an infinite C1 stops the second stage."""
        with pytest.raises(InfiniteC1):
            build_2s_dataset(iv_dataset, replace(first_stage, C1=np.inf))

    def test_second_endogenous_regressor_refused(self, iv_dataset, first_stage):
        """Test that a regressor left endogenous besides k_end cannot serve as its own instrument."""
        undeclared = Dataset(y=iv_dataset.y, x=iv_dataset.x, z=iv_dataset.z, const_instr_idx=0)
        assert undeclared.endo_idx == (0, 1)
        with pytest.raises(SpecInvalid):
            build_2s_dataset(undeclared, first_stage)

    def test_zero_projection(self, iv_dataset, first_stage):
        """Test that a vanishing projection instrument is refused."""
        fsf = replace(first_stage, zeta_hat=np.zeros_like(first_stage.zeta_hat))
        with pytest.raises(DegenerateInstrument):
            build_2s_dataset(iv_dataset, fsf)

    def test_needs_maxabs(self, iv_dataset, first_stage):
        """Test the normalization check."""
        with pytest.raises(NormalizationMismatch):
            fit_stiv_2s(iv_dataset, first_stage, StivSpec(c=0.1, r=R, I=(0,)), s=1)

    def test_second_stage_report(self, iv_dataset, first_stage):
        """Test the second stage fit and its two-term denominator."""
        spec = StivSpec(c=0.1, r=R, I=(0,), dx_mode="maxabs")
        fit, report = fit_stiv_2s(iv_dataset, first_stage, spec, s=1, J0_list=[(0, 1)])
        assert fit.kind == "stiv_2s"
        assert fit.band_excess <= 1e-6
        assert report.kind == "two_stage"
        assert len(report.denominator_terms) == 2
        assert report.denominator_terms[1] == pytest.approx(R * R / min(report.kappa_coord) * (1 + 11 / 9))
        assert len(report.groups) == 1
