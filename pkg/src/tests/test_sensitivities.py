# tests/test_sensitivities.py
import itertools

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.optimize import linprog

from src.stiv import sensitivities as sens
from src.stiv.data_model import compute_dx, compute_dz, compute_psi
from src.stiv.exceptions import BlockTooLarge, InvalidParams
from src.stiv.sensitivities import (
    ConeFactor,
    block_bound_from_report,
    coherence_bound,
    combine_block_bound,
    kappa1_cert,
    kappa1_free,
    kappa_block_cert,
    kappa_coord_cert,
    kappa_coord_cert_all,
    kappa_coord_exact,
    kappa_coord_free,
    kappa_exact_all,
    kappa_general,
    plugin_kappa1,
    sensitivity_report,
)


def _oracle_lp(psi, k, extra_ub, extra_rhs, sign_bounds):
    """min v over (Delta, t, v) with |Psi Delta| <= v, Delta_k = 1, |Delta| <= t and extra rows."""
    L, K = psi.shape
    nv = 2 * K + 1
    rows, rhs = [], []
    for sgn in (1.0, -1.0):
        block = np.zeros((L, nv))
        block[:, :K] = sgn * psi
        block[:, -1] = -1.0
        rows.append(block)
        rhs.append(np.zeros(L))
    for sgn in (1.0, -1.0):
        block = np.zeros((K, nv))
        block[:, :K] = sgn * np.eye(K)
        block[:, K:2 * K] = -np.eye(K)
        rows.append(block)
        rhs.append(np.zeros(K))
    rows.append(np.asarray(extra_ub, dtype=float).reshape(-1, nv))
    rhs.append(np.asarray(extra_rhs, dtype=float).reshape(-1))
    A_eq = np.zeros((1, nv))
    A_eq[0, k] = 1.0
    cost = np.zeros(nv)
    cost[-1] = 1.0
    bounds = list(sign_bounds) + [(0, None)] * (K + 1)
    res = linprog(cost, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs), A_eq=A_eq, b_eq=[1.0],
                  bounds=bounds, method="highs")
    return res.fun if res.status == 0 else np.inf


def oracle_certificate(psi, k, a):
    """min |Psi Delta|_inf over Delta_k = 1, |Delta|_1 <= a |Delta|_inf, by enumerating the argmax."""
    L, K = psi.shape
    nv = 2 * K + 1
    best = np.inf
    for j in range(K):
        for eps in (1.0, -1.0):
            row = np.zeros(nv)
            row[K:2 * K] = 1.0
            row[j] -= a * eps
            bounds = [(None, None)] * K
            bounds[j] = (0, None) if eps > 0 else (None, 0)
            best = min(best, _oracle_lp(psi, k, [row], [0.0], bounds))
    return best


def oracle_exact(psi, k, J, ratio):
    """min |Psi Delta|_inf over Delta_k = 1 and |Delta_{J^c}|_1 <= ratio |Delta_J|_1, signs on J enumerated."""
    L, K = psi.shape
    nv = 2 * K + 1
    best = np.inf
    for signs in itertools.product((1.0, -1.0), repeat=len(J)):
        row = np.zeros(nv)
        bounds = [(None, None)] * K
        for j, e in zip(J, signs):
            row[j] = -ratio * e
            bounds[j] = (0, None) if e > 0 else (None, 0)
        for i in range(K):
            if i not in J:
                row[K + i] = 1.0
        best = min(best, _oracle_lp(psi, k, [row], [0.0], bounds))
    return best


@pytest.fixture
def psi5():
    rng = np.random.default_rng(21)
    return rng.standard_normal((6, 4))


class TestConeFactor:
    """Test suite for the cone constants."""

    def test_standard_and_enlarged(self):
        """Test ratio and certificate coefficient for both cones."""
        std = ConeFactor.standard(0.2, 3)
        assert std.ratio == pytest.approx(1.2 / 0.8)
        assert std.a == pytest.approx((1.0 + 1.5) * 3)
        wide = ConeFactor.enlarged(0.2, 3)
        assert wide.ratio == pytest.approx(2.2 / 0.8)
        assert wide.a > std.a

    def test_c_must_be_below_one(self):
        """Test that c = 1 does not validate."""
        with pytest.raises(ValidationError):
            ConeFactor(c=1.0, s=1)


class TestCertificates:
    """Test suite for the LP batteries against a scipy sign-enumeration oracle."""

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("s", [1, 2])
    def test_coordinate_certificate_matches_oracle(self, seed, s):
        """Test kappa*_k(s) for every k against an independent formulation."""
        psi = np.random.default_rng(seed).standard_normal((5, 3))
        cf = ConeFactor.standard(0.1, s)
        values = kappa_coord_cert_all(psi, s, cf, max_workers=1)
        for k in range(3):
            assert values[k] == pytest.approx(oracle_certificate(psi, k, cf.a), abs=1e-7, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("J", [(0,), (1, 2), (0, 2)])
    def test_exact_matches_oracle(self, seed, J):
        """Test kappa*_{k,J} against the oracle for k inside and outside J."""
        psi = np.random.default_rng(50 + seed).standard_normal((5, 3))
        cf = ConeFactor.standard(0.3, len(J))
        values = kappa_exact_all(psi, J, cf, max_workers=1)
        for k in range(3):
            assert values[k] == pytest.approx(oracle_exact(psi, k, list(J), cf.ratio), abs=1e-7, rel=1e-6)

    def test_single_coordinate_agrees_with_battery(self, psi5):
        """Test that the per-k entry point matches the all-k battery."""
        cf = ConeFactor.standard(0.1, 2)
        every = kappa_coord_cert_all(psi5, 2, cf)
        assert kappa_coord_cert(psi5, 1, 2, cf) == pytest.approx(every[1], abs=1e-9)
        assert kappa_coord_exact(psi5, 1, (0, 1), cf) == pytest.approx(
            kappa_exact_all(psi5, (0, 1), cf)[1], abs=1e-9)

    @pytest.mark.parametrize("J", [(0,), (1, 3), (0, 2)])
    def test_certificate_below_exact(self, psi5, J):
        """Test kappa*_k(s) <= kappa*_{k,J} whenever |J| <= s."""
        s = 2
        cf = ConeFactor.standard(0.1, s)
        cert = kappa_coord_cert_all(psi5, s, cf)
        exact = kappa_exact_all(psi5, J, cf)
        assert np.all(cert <= exact + 1e-7)

    def test_row_addition_is_monotone(self, iv_dataset):
        """Test that adding an instrument row cannot lower any bound."""
        psi = compute_psi(iv_dataset, compute_dx(iv_dataset), compute_dz(iv_dataset, (0,)))
        bigger = psi.with_row(np.array([0.3, -0.7]))
        cf = ConeFactor.standard(0.1, 1)
        before = kappa_coord_cert_all(psi, 1, cf)
        after = kappa_coord_cert_all(bigger, 1, cf)
        assert np.all(after >= before - 1e-8)

    def test_free_bounds_below_cone_bounds(self, psi5):
        """Test that unrestricted sensitivities never exceed the cone ones and bound the l1 one."""
        cf = ConeFactor.standard(0.1, 2)
        cert = kappa_coord_cert_all(psi5, 2, cf)
        for k in range(4):
            assert kappa_coord_free(psi5, k) <= cert[k] + 1e-7
        assert kappa1_free(psi5) <= min(kappa_coord_free(psi5, k) for k in range(4)) + 1e-7

    def test_rank_deficient_psi_gives_zero(self):
        """Test that a kernel direction drives the free bound to zero."""
        psi = np.array([[1.0, 1.0], [2.0, 2.0]])
        assert kappa_coord_free(psi, 0) == pytest.approx(0.0, abs=1e-8)

    def test_s_range_checked(self, psi5):
        """Test that s outside 1..K is rejected."""
        with pytest.raises(InvalidParams):
            kappa_coord_cert_all(psi5, 5, ConeFactor.standard(0.1, 5))


class TestBlocks:
    """Test suite for block bounds and their combinations."""

    def test_empty_sets_are_infinite(self, psi5):
        """Test that bounds over the empty set are infinite."""
        cf = ConeFactor.standard(0.1, 1)
        assert kappa_coord_exact(psi5, 0, (), cf) == np.inf
        assert np.all(np.isinf(kappa_exact_all(psi5, (), cf)))
        assert kappa_block_cert(psi5, (), 1, 0.1) == np.inf
        assert plugin_kappa1(np.array([1.0]), (), 0.1) == np.inf
        assert combine_block_bound(np.ones(4), (), 1.0, 0.5) == np.inf

    def test_combine_block_bound(self):
        """Test max(|J0|^{-1/p} min kappa_k, kappa1)."""
        kappas = np.array([0.8, 0.4, 1.2, 2.0])
        assert combine_block_bound(kappas, (0, 2), 1.0, 0.1) == pytest.approx(0.4)
        assert combine_block_bound(kappas, (0, 2), np.inf, 0.1) == pytest.approx(0.8)
        assert combine_block_bound(kappas, (0, 2), 1.0, 0.5) == pytest.approx(0.5)

    def test_plugin_kappa1(self):
        """Test the plug-in kappa_{1,J} on C_J."""
        exact = np.array([0.6, 0.9, 0.3])
        c = 0.2
        expected = 0.3 * (1.0 - c) / (2.0 * 2)
        assert plugin_kappa1(exact, (0, 1), c) == pytest.approx(expected)

    def test_block_limit(self, psi5, monkeypatch):
        """Test that blocks above the configured limit raise."""
        monkeypatch.setattr(sens.settings, "block_limit", 2)
        with pytest.raises(BlockTooLarge):
            kappa_block_cert(psi5, (0, 1, 2), 3, 0.1)

    def test_singleton_block_is_coordinate_bound(self, psi5):
        """Test that a one-element block reduces to kappa*_k(s)."""
        cf = ConeFactor.standard(0.1, 2)
        every = kappa_coord_cert_all(psi5, 2, cf)
        direct = kappa_block_cert(psi5, (1,), 2, 0.1, cf)
        assert direct == pytest.approx(every[1], abs=1e-7, rel=1e-6)

    def test_report_and_block_lookup(self, psi5):
        """Test that the report stores blocks and that lookups prefer the stored value."""
        report = sensitivity_report(psi5, 2, 0.1, J0_list=[(0, 1)], exact_sets=[(2,)], trace=True)
        assert report.kappa1 == pytest.approx(min(report.kappa_coord) / report.a)
        assert report.block_value([1, 0]) is not None
        assert report.exact_value(0, [2]) is not None
        assert "lp_block" in report.methods and "lp_kappa" in report.methods
        assert len(report.trace) == sum(len(sens.certificate_lps(4, k, report.a)) for k in range(4))
        value = block_bound_from_report(psi5, (0, 1), report)
        assert value >= combine_block_bound(np.array(report.kappa_coord), (0, 1), 1.0, report.kappa1) - 1e-12

    def test_report_is_worker_independent(self, psi5):
        """Test that results do not depend on the pool size."""
        one = sensitivity_report(psi5, 2, 0.1, max_workers=1)
        many = sensitivity_report(psi5, 2, 0.1, max_workers=4)
        assert one.kappa_coord == many.kappa_coord
        assert one.psi_fingerprint == many.psi_fingerprint

    def test_kappa1_cert(self, psi5):
        """Test kappa_1(s) = min_k kappa*_k(s) / a."""
        cf = ConeFactor.standard(0.1, 2)
        every = kappa_coord_cert_all(psi5, 2, cf)
        assert kappa1_cert(psi5, 2, 0.1) == pytest.approx(float(np.min(every)) / cf.a)
        assert kappa1_cert(psi5, 2, 0.1, kappa_coord=np.array([0.5, 0.2, 0.9, 1.0])) == pytest.approx(0.2 / cf.a)

    def test_kappa_general(self, psi5):
        """Test the l_p block bound from coordinate certificates."""
        cf = ConeFactor.standard(0.1, 2)
        kappas = np.array([0.8, 0.4, 1.2, 2.0])
        expected = combine_block_bound(kappas, (0, 2), 2.0, 0.4 / cf.a)
        assert kappa_general(psi5, (2, 0), 2.0, 2, 0.1, kappa_coord=kappas) == pytest.approx(expected)
        assert kappa_general(psi5, (), 1.0, 2, 0.1) == np.inf
        with pytest.raises(InvalidParams):
            kappa_general(psi5, (0,), 0.5, 2, 0.1)


class TestCoherence:
    """Test suite for the row-dominance bound."""

    def test_dominant_row(self):
        """Test eta1, eta2 and the bound for a single dominant row."""
        psi = np.array([[1.0, 0.1], [0.2, 1.0]])
        cb = coherence_bound(psi, [0], 0.1)
        limit = 0.9 / 2.0
        assert cb.rows == {0: 0}
        assert cb.eta1 == pytest.approx(0.9)
        assert cb.eta2 == pytest.approx(1.0 - 0.1 / limit)
        assert cb.bound == pytest.approx(0.5 * 0.9 * (1.0 - 0.1 / limit))

    def test_sup_norm_drops_size_factor(self):
        """Test that p = inf gives (1-c)^{-1} eta1 eta2."""
        psi = np.array([[1.0, 0.1], [0.2, 1.0]])
        cb = coherence_bound(psi, [0], 0.1, p=np.inf)
        assert cb.bound == pytest.approx(cb.eta1 * cb.eta2 / 0.9)

    def test_no_dominant_row(self):
        """Test that flat rows and empty sets give no bound."""
        assert coherence_bound(np.ones((3, 3)), [0, 1], 0.1) is None
        assert coherence_bound(np.eye(3), [], 0.1) is None
