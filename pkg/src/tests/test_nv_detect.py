# tests/test_nv_detect.py
from dataclasses import replace

import numpy as np
import pytest

from src.stiv.cone_solver import solve_cone
from src.stiv.exceptions import DataError, InfinitePilotBound, InvalidParams
from src.stiv.nv_detect import (
    assemble_nv_program,
    fit_stiv_nv,
    nv_confidence,
    nv_F,
    nv_pipeline,
    nv_threshold,
    pilot_l1_bound,
    zbar_star,
)
from src.stiv.sensitivities import sensitivity_report
from src.stiv.stiv_core import StivSpec, fit_stiv
from src.tests.conftest import make_iv_dataset

R = 0.2


@pytest.fixture
def suspect_dataset():
    return make_iv_dataset(n=300, seed=4, zbar_theta=(0.0, 0.6))


@pytest.fixture
def pilot(suspect_dataset):
    return fit_stiv(suspect_dataset, StivSpec(c=0.1, r=R, I=(0,)))


def _grid_optimum(abar, sd, r1, c):
    """Brute-force min over theta of |theta| + c max(|abar - theta| / r1, sqrt(sd^2 + (abar - theta)^2))."""
    theta = np.linspace(abar - 6 * sd - 1, abar + 6 * sd + 1, 400001)
    gap = abar - theta
    sigma = np.maximum(np.abs(gap) / r1, np.sqrt(sd ** 2 + gap ** 2))
    return float(np.min(np.abs(theta) + c * sigma))


class TestNvProgram:
    """Test suite for the STIV-NV program."""

    def test_zbar_star(self):
        """Test max_l of the empirical rms."""
        zbar = np.array([[1.0, 3.0], [-1.0, -3.0]])
        assert zbar_star(zbar) == pytest.approx(3.0)

    def test_F(self):
        """Test F at theta equal to the column means."""
        zbar = np.array([[1.0], [3.0]])
        u = np.ones(2)
        assert nv_F(zbar, u, np.array([2.0])) == pytest.approx(1.0)

    def test_program_shape(self):
        """Test that every cone has three coordinates."""
        p = assemble_nv_program(np.array([0.1, -0.2]), np.array([1.0, 1.5]), 0.0, 0.2, 0.1)
        soc = [cs for cs in p.cones if cs.kind == "soc"]
        assert len(soc) == 2
        assert all(cs.stop - cs.start == 3 for cs in soc)

    @pytest.mark.parametrize("abar,sd", [(0.05, 1.0), (0.8, 0.5), (-1.2, 0.9)])
    def test_single_suspect_against_grid(self, abar, sd):
        """Test the optimum of a one-instrument program against a grid search."""
        r1, c = 0.2, 0.1
        p = assemble_nv_program(np.array([abar]), np.array([sd]), 0.0, r1, c)
        sol = solve_cone(p)
        assert sol.optimal
        assert sol.objective == pytest.approx(_grid_optimum(abar, sd, r1, c), abs=1e-4)

    def test_fit_feasible(self, suspect_dataset, pilot):
        """Test that the fitted point satisfies both constraint families."""
        fit = fit_stiv_nv(suspect_dataset, pilot, b_hat=0.05, r1=R, c=0.1)
        assert fit.band_excess <= 1e-6
        assert fit.cone_excess <= 1e-6
        assert fit.L1 == 2
        assert fit.zbar_star == pytest.approx(zbar_star(suspect_dataset.zbar))

    def test_rejections(self, iv_dataset, suspect_dataset, pilot):
        """Test the input guards."""
        with pytest.raises(DataError):
            fit_stiv_nv(iv_dataset, pilot, 0.1, R, 0.1)
        with pytest.raises(InfinitePilotBound):
            fit_stiv_nv(suspect_dataset, pilot, np.inf, R, 0.1)
        with pytest.raises(InvalidParams):
            fit_stiv_nv(suspect_dataset, pilot, 0.1, R, 1.5)


class TestNvBounds:
    """Test suite for the bounds and detection."""

    def test_pilot_bound(self, pilot):
        """Test the certificate rule and its infinite corner."""
        sr = sensitivity_report(pilot.psi, 1, 0.1)
        b = pilot_l1_bound(pilot, sr, R, "certificate")
        assert b >= 0
        assert pilot_l1_bound(pilot, sr, 1e6, "certificate") == np.inf
        scaled = pilot_l1_bound(pilot, sr, R, "sparsity_scaled")
        if np.isfinite(scaled):
            assert scaled == pytest.approx(
                2 * pilot.sigma_hat * R * sr.s / sr.kappa1 / (1 - R / sr.kappa1))

    def test_confidence_formulas(self, suspect_dataset, pilot):
        """Test the sup-norm and l1 bounds."""
        fit = fit_stiv_nv(suspect_dataset, pilot, b_hat=0.05, r1=0.02, c=0.1)
        bounds = nv_confidence(fit, s1=1)
        bz = fit.b_hat * fit.zbar_star
        linf = 2 * (fit.sigma1_hat * 0.02 + (1 + 0.02 / 0.9) * bz) / (1 - 2 * 0.02 / 0.9)
        l1 = 2 * (2 * (fit.sigma1_hat * 0.02 + 1.02 * bz) + 0.1 * bz) / (1 - 0.1 - 2 * 0.02)
        assert bounds.linf == pytest.approx(linf)
        assert bounds.l1 == pytest.approx(l1)
        assert not bounds.linf_infinite

    def test_confidence_infinite(self, suspect_dataset, pilot):
        """Test that large s1 r1 makes the bounds infinite."""
        fit = fit_stiv_nv(suspect_dataset, pilot, b_hat=0.0, r1=0.5, c=0.1)
        bounds = nv_confidence(fit, s1=2)
        assert bounds.linf_infinite and bounds.l1_infinite

    def test_threshold(self, suspect_dataset, pilot):
        """Test strict thresholding of theta_hat."""
        fit = fit_stiv_nv(suspect_dataset, pilot, b_hat=0.0, r1=R, c=0.1)
        fit = replace(fit, theta_hat=np.array([0.01, -0.4]))
        selection = nv_threshold(fit, 0.1)
        assert selection.invalid == [1]
        assert selection.signs == [0, -1]
        assert nv_threshold(fit, np.inf).infinite_threshold
        with pytest.raises(InvalidParams):
            nv_threshold(fit, -1.0)

    def test_pipeline_report(self, suspect_dataset):
        """Test the end-to-end report uses one-based indices."""
        result = nv_pipeline(suspect_dataset, StivSpec(c=0.1, r=0.02, I=(0,)), s=1, c=0.1, s1=1)
        report = result.to_report()
        assert report.invalid == [l + 1 for l in result.selection.invalid]
        assert report.b_rule == "certificate"
        assert len(report.theta_hat) == 2
