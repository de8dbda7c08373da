# tests/test_sim.py
import numpy as np
import pytest

from src.sim.dgp import DgpConfig, gen_dgp, planted_invalid, structural_errors
from src.sim.monte_carlo import McSpec, Replication, replication_seeds, run_mc, summarize
from src.sim.tables import PROFILES, get_profile, repro_tables
from src.stiv.exceptions import InvalidParams
from src.utils.reports import load_report


class TestDgp:
    """Test suite for the simulation design."""

    def test_defaults(self):
        """Test the default design dimensions and coefficients."""
        cfg = DgpConfig()
        assert (cfg.n, cfg.K, cfg.L) == (49, 25, 50)
        assert cfg.beta.tolist() == [1.0] * 5 + [0.0] * 20
        assert cfg.zeta_vec.shape == (26,)
        assert np.all(cfg.zeta_vec == 0.15)

    def test_exogenous_copies(self):
        """Test x_k = z_{L-K+k} for the exogenous regressors and the appended constant."""
        cfg = DgpConfig(n=30, K=4, L=7, seed=2)
        ds = gen_dgp(cfg)
        for k in range(1, cfg.K):
            assert np.array_equal(ds.x[:, k], ds.z[:, cfg.L - cfg.K + k])
        assert ds.const_instr_idx == cfg.L
        assert np.all(ds.z[:, cfg.L] == 1.0)
        assert ds.exo_idx == (1, 2, 3)

    def test_first_regressor(self):
        """Test that x_1 minus its projection part is the first-stage error."""
        cfg = DgpConfig(n=5000, K=2, L=4, rho=0.0, seed=5)
        ds = gen_dgp(cfg)
        v = ds.x[:, 0] - ds.z[:, :3] @ cfg.zeta_vec
        u = structural_errors(cfg, ds)
        assert np.std(v) == pytest.approx(0.3, rel=0.05)
        assert abs(np.corrcoef(u, v)[0, 1]) < 0.05

    def test_correlation(self):
        """Test the endogeneity correlation rho."""
        cfg = DgpConfig(n=20000, K=2, L=3, rho=0.6, seed=1)
        ds = gen_dgp(cfg)
        v = ds.x[:, 0] - ds.z[:, :2] @ cfg.zeta_vec
        assert np.corrcoef(structural_errors(cfg, ds), v)[0, 1] == pytest.approx(0.6, abs=0.03)

    def test_zero_coefficients(self):
        """Test that beta* = 0 makes y the structural error."""
        cfg = DgpConfig(n=20000, K=2, L=3, beta_star=(0.0, 0.0), seed=3)
        ds = gen_dgp(cfg)
        assert np.array_equal(ds.y, structural_errors(cfg, ds))
        assert np.std(ds.y) == pytest.approx(0.3, rel=0.03)

    def test_reproducible(self):
        """Test that a seed fixes the dataset."""
        a = gen_dgp(DgpConfig(n=20, K=2, L=3, seed=9))
        b = gen_dgp(DgpConfig(n=20, K=2, L=3, seed=9))
        c = gen_dgp(DgpConfig(n=20, K=2, L=3, seed=10))
        assert np.array_equal(a.y, b.y) and np.array_equal(a.z, b.z)
        assert not np.array_equal(a.y, c.y)

    def test_suspect_instruments(self):
        """Test that E[zbar_l u] matches theta_l."""
        cfg = DgpConfig(n=40000, K=2, L=3, theta_star=(0.0, 0.05), seed=4)
        ds = gen_dgp(cfg)
        u = structural_errors(cfg, ds)
        means = (ds.zbar * u[:, None]).mean(axis=0)
        assert means == pytest.approx([0.0, 0.05], abs=0.01)
        assert planted_invalid(cfg) == [1]

    @pytest.mark.parametrize("fields", [
        dict(K=5, L=3),
        dict(K=2, L=3, beta_star=(1.0,)),
        dict(K=2, L=3, zeta=(0.1,)),
        dict(rho=1.5),
    ])
    def test_invalid_config(self, fields):
        """Test that malformed designs raise InvalidParams."""
        with pytest.raises(InvalidParams):
            DgpConfig.checked(**fields)


class TestMonteCarlo:
    """Test suite for the replication runner."""

    def test_seeds(self):
        """Test that spawned seeds are deterministic and distinct."""
        seeds = replication_seeds(7, 20)
        assert seeds == replication_seeds(7, 20)
        assert len(set(seeds)) == 20
        assert replication_seeds(7, 5) == seeds[:5]

    def test_single_replication_percentiles(self):
        """Test that one replication gives equal percentiles."""
        rep = Replication(0, beta=np.array([1.0, 0.0]), sigma=0.3)
        summary = summarize([rep], 1, 0, 0.2)
        assert summary.beta_p05 == summary.beta_p50 == summary.beta_p95 == [1.0, 0.0]
        assert summary.sigma_p05 == summary.sigma_p95 == 0.3

    def test_failures_counted(self):
        """Test that failed replications are reported by kind."""
        reps = [Replication(0, beta=np.zeros(1), sigma=0.1), Replication(1, error="SolverFailure")]
        summary = summarize(reps, 2, 0, 0.2)
        assert summary.failures == 1
        assert summary.failure_kinds == {"SolverFailure": 1}
        with pytest.raises(InvalidParams):
            summarize([Replication(0, error="SolverFailure")], 1, 0, 0.2)

    def test_worker_independent(self):
        """Test that the summary does not depend on the pool size."""
        dgp = DgpConfig(n=60, K=3, L=6, seed=11)
        one = run_mc(dgp, McSpec(c=0.1), reps=4, max_workers=1)
        many = run_mc(dgp, McSpec(c=0.1), reps=4, max_workers=3)
        assert one.model_dump() == many.model_dump()
        assert one.successes + one.failures == 4

    def test_with_intervals(self):
        """Test that s adds recovery and coverage statistics."""
        dgp = DgpConfig(n=80, K=2, L=4, seed=12)
        summary = run_mc(dgp, McSpec(c=0.1, s=1, dx_mode="maxabs", heavy_tail=True), reps=2, max_workers=1)
        assert 0.0 <= summary.coverage <= 1.0
        assert 0.0 <= summary.infinite_share <= 1.0
        assert len(summary.halfwidth_p50) == 2

    def test_reps_positive(self):
        """Test the replication count guard."""
        with pytest.raises(InvalidParams):
            run_mc(DgpConfig(), reps=0)


class TestProfiles:
    """Test suite for table profiles."""

    def test_known_profiles(self):
        """Test the sample sizes of the profiles."""
        assert PROFILES["table3"].n == 49 and PROFILES["table3"].reps == 1000
        assert PROFILES["table5"].n == 8000

    def test_overrides(self):
        """Test that non-None overrides replace profile fields."""
        p = get_profile("table3", {"reps": 10, "n": None, "seed": 4})
        assert (p.reps, p.n, p.seed) == (10, 49, 4)

    @pytest.mark.parametrize("name", ["", "table9"])
    def test_unknown_profile(self, name):
        """Test that unknown or empty names raise."""
        with pytest.raises(InvalidParams):
            get_profile(name)

    def test_repro_writes_both_files(self, tmp_path):
        """Test a short table3 run and its report files."""
        json_path, txt_path = repro_tables("table3", out_dir=str(tmp_path), overrides={"reps": 2, "seed": 11},
                                           max_workers=1, to_stdout=False)
        doc = load_report(json_path)
        assert doc["echo"]["command"] == "simulate"
        assert doc["echo"]["seed"] == 11
        assert doc["result"]["profile"] == "table3"
        assert len(doc["result"]["rows"]) == 26
        assert doc["result"]["rows"][-1][0] == "sigma_hat"
        assert "Monte-Carlo study, 2 replications" in txt_path.read_text()
