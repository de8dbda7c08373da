# src/stiv/inference.py
"""Choice of the self-normalized quantile r, confidence sets and thresholded selection.

Every confidence statement has the shape

    |(D_X^{-1}(beta_hat - beta))_{J0}|_p <= 2 sigma_hat r / kappa_bar * (denominator)_+^{-1}

and the variants differ only in the sensitivities plugged in and in the denominator:

    certificate  1 - r / kappa_1(s)
    heavy tail   1 - r / kappa_{1,J_exo^c}(s) - r^2 / kappa_{1,J_exo}(s)
    two stage    1 - r / kappa*_{k_end}(s) - r^2 / kappa_1(s)

A non-positive denominator flags the whole report as infinite; that is a result, not an error.
"""
import io
from functools import partial
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from rich.console import Console
from rich.table import Table
from scipy.stats import norm

from src.stiv.cone_solver import SolverConfig
from src.stiv.data_model import Dataset, DiagScale, col_mean, compute_dz
from src.stiv.exceptions import (
    BlockTooLarge,
    InfeasibleQuantile,
    InvalidParams,
    MismatchedReport,
    NormalizationMismatch,
    SolverFailure,
)
from src.stiv.sensitivities import (
    ConeFactor,
    SensitivityReport,
    block_bound_from_report,
    combine_block_bound,
    fingerprint,
    kappa1_free,
    kappa_coord_free,
    kappa_exact_all,
    plugin_kappa1,
    sensitivity_report,
)
from src.stiv.stiv_core import StivFit, StivSpec, fit_stiv, fit_stiv_grid
from src.utils.logging import kv, setup_logger
from src.utils.parallel import run_bounded

logger = setup_logger(__name__)

E3 = float(np.exp(3.0))
TWO_E_PLUS_ONE = 2.0 * float(np.e) + 1.0
MC_CHUNK = 250
NEST_TOL = 1e-7

ErrorDist = Literal["normal", "student_t", "laplace", "rademacher"]
ReportKind = Literal["certificate", "heavy_tail", "plugin", "stiv_r", "two_stage"]


class ScenarioSpec(BaseModel):
    """Distributional scenario behind r and its extra parameters."""

    model_config = ConfigDict(frozen=True)

    scenario: Literal[1, 2, 3, 4, 5] = 4
    alpha: float = Field(0.05, gt=0, lt=1)
    delta: float = Field(1.0, gt=0)
    c4: Optional[float] = Field(None, gt=0)
    # fourth-moment bound assumed by the simplified scenario-5 rule; gamma_4 >= 1
    simplified_c4: float = Field(1.0, ge=1.0)
    two_stage: bool = False
    error_dist: ErrorDist = "normal"
    df: float = Field(5.0, gt=2)
    B: int = Field(1000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _monte_carlo_draws(self) -> "ScenarioSpec":
        if self.scenario == 1 and self.B < 1000:
            raise ValueError("scenario 1 needs at least 1000 Monte-Carlo draws")
        return self


class ValidityCheck(BaseModel):
    """Outcome of one admissibility condition of a scenario. Violations warn, never fail."""

    name: str
    passed: bool
    value: Optional[float] = None
    limit: Optional[float] = None
    detail: str = ""


class GroupBound(BaseModel):
    J0: List[int]
    p: float
    kappa_bar: float
    bound: float
    infinite: bool


class ConfidenceReport(BaseModel):
    """Coordinate intervals beta_hat_k +/- halfwidth_k and group l_p bounds of one fit."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    kind: ReportKind
    r: float
    s: Optional[int]
    c: Optional[float]
    sigma_hat: float
    beta_hat: List[float]
    halfwidth: List[float]
    lower: List[float]
    upper: List[float]
    infinite: List[bool]
    kappa_coord: List[float]
    denominator: float
    inv_denominator: float
    denominator_terms: List[float]
    groups: List[GroupBound] = Field(default_factory=list)
    validity: List[ValidityCheck] = Field(default_factory=list)
    approximate: bool = False
    notes: List[str] = Field(default_factory=list)

    @property
    def all_infinite(self) -> bool:
        return bool(self.infinite) and all(self.infinite)

    def covers(self, beta: Sequence[float]) -> bool:
        beta = np.asarray(beta, dtype=float)
        return bool(np.all((np.asarray(self.lower) <= beta) & (beta <= np.asarray(self.upper))))


class SelectionResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    support: List[int]
    signs: List[int]
    thresholds: List[float]
    beta_thresholded: List[float]
    infinite_threshold: bool


class ApproxSparseBound(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    J0: List[int]
    p: float
    bound: float
    best_J: List[int]
    variance_terms: List[float]
    bias_terms: List[float]
    estimate: bool = True


class CGridReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    c_grid: List[float]
    halfwidth: List[List[float]]
    best_c: List[float]
    reports: List[ConfidenceReport]


def _check_n_l(n: int, L: int) -> None:
    if n < 2:
        raise InvalidParams(f"need n >= 2, got {n}")
    if L < 1:
        raise InvalidParams(f"need L >= 1, got {L}")


def scenario2_r(n: int, L: int, alpha: float) -> float:
    arg = L / (2.0 * alpha)
    if arg <= 1.0:
        raise InfeasibleQuantile(f"log(L/(2 alpha)) <= 0 for L={L}, alpha={alpha}")
    return float(np.sqrt(2.0 * np.log(arg) / n))


def scenario3_r(n: int, L: int, alpha: float) -> float:
    level = 9.0 * alpha / (4.0 * L * E3)
    return float(-norm.ppf(level) / np.sqrt(n))


def scenario4_r(n: int, L: int, alpha: float) -> float:
    return float(-norm.ppf(alpha / (2.0 * L)) / np.sqrt(n))


def scenario5_log_term(L: int, alpha: float) -> float:
    return float(np.log(L * TWO_E_PLUS_ONE / alpha))


def scenario5_r(n: int, L: int, alpha: float, c4: Optional[float]) -> float:
    """r with the fourth-moment constant c4, or the simplified form when c4 is None."""
    lt = scenario5_log_term(L, alpha)
    if c4 is None:
        return float(2.0 * np.sqrt(lt / n))
    denom = n - c4 * lt
    if denom <= 0:
        raise InfeasibleQuantile(f"n - c4 log(L(2e+1)/alpha) = {denom:.4g} <= 0")
    return float(np.sqrt(2.0 * lt / denom))


def _validity(spec: ScenarioSpec, n: int, L: int) -> List[ValidityCheck]:
    checks = []
    if spec.scenario == 3:
        # L < 9 alpha / (4 e^3 Phi(-sqrt n)) compared in logs, Phi(-sqrt n) underflows for large n
        limit_log = np.log(9.0 * spec.alpha / (4.0 * E3)) - norm.logcdf(-np.sqrt(n))
        checks.append(ValidityCheck(name="instrument_count", passed=bool(np.log(L) < limit_log),
                                    value=float(np.log(L)), limit=float(limit_log),
                                    detail="log L against log of the admissible instrument count"))
    elif spec.scenario == 4:
        value = abs(norm.ppf(spec.alpha / (2.0 * L))) * n ** (-spec.delta / (4.0 + 2.0 * spec.delta))
        checks.append(ValidityCheck(name="asymptotic", passed=True,
                                    detail="coverage holds only asymptotically"))
        checks.append(ValidityCheck(name="moderate_deviation", passed=bool(value < 1.0), value=float(value),
                                    limit=1.0, detail="|Phi^{-1}(alpha/(2L))| n^{-delta/(4+2 delta)}"))
    elif spec.scenario == 5 and spec.c4 is not None:
        limit_log = np.log(spec.alpha / TWO_E_PLUS_ONE) + n / spec.c4
        checks.append(ValidityCheck(name="instrument_count", passed=bool(np.log(L) < limit_log),
                                    value=float(np.log(L)), limit=float(limit_log),
                                    detail="log L against log(alpha/(2e+1)) + n/c4"))
    elif spec.scenario == 5:
        value = spec.simplified_c4 * scenario5_log_term(L, spec.alpha)
        checks.append(ValidityCheck(name="half_sample", passed=bool(value <= n / 2.0), value=float(value),
                                    limit=n / 2.0, detail="simplified rule needs c4 log(L(2e+1)/alpha) <= n/2"))
    for check in checks:
        if not check.passed:
            logger.warning(kv(validity=check.name, scenario=spec.scenario, value=check.value, limit=check.limit))
    return checks


def select_r(
    spec: ScenarioSpec,
    n: int,
    L: int,
    ds: Optional[Dataset] = None,
    I: Optional[Sequence[int]] = None,
) -> Tuple[float, List[ValidityCheck]]:
    """r for scenarios 2 to 5 from closed forms; scenario 1 simulates and needs the data."""
    _check_n_l(n, L)
    if spec.scenario == 1:
        if ds is None:
            raise InvalidParams("scenario 1 needs the dataset for Monte-Carlo quantiles")
        I = I if I is not None else (ds.const_instr_idx,)
        r = mc_quantile_r(ds, spec.error_dist, spec.alpha, spec.B, I, spec.seed, df=spec.df)
        return r, []
    if spec.scenario == 2:
        r = scenario2_r(n, L, spec.alpha)
    elif spec.scenario == 3:
        r = scenario3_r(n, L, spec.alpha)
    elif spec.scenario == 4:
        r = scenario4_r(n, L, spec.alpha)
    else:
        r = scenario5_r(n, L, spec.alpha, spec.c4)
    checks = _validity(spec, n, L)
    logger.info(kv(select_r=spec.scenario, n=n, L=L, alpha=spec.alpha, r=r))
    return r, checks


def gamma4_hat(z: np.ndarray, u: np.ndarray) -> float:
    """max_l E_n[(z_l u)^4] / E_n[(z_l u)^2]^2 over instruments with a non-degenerate product."""
    zu = np.asarray(z) * np.asarray(u)[:, None]
    second = col_mean(zu ** 2)
    fourth = col_mean(zu ** 4)
    ok = second > 0
    if not np.any(ok):
        raise InvalidParams("pilot residuals vanish on every instrument")
    return float(np.max(fourth[ok] / second[ok] ** 2))


def select_r_two_stage(
    spec: ScenarioSpec,
    ds: Dataset,
    stiv_spec: StivSpec,
    cfg: Optional[SolverConfig] = None,
) -> Tuple[float, List[ValidityCheck], float]:
    """Scenario 5 in two stages: pilot with the simplified r, plug the estimated gamma_4 in once.

    Returns (r, validity checks, gamma_4 estimate).
    """
    if spec.scenario != 5:
        raise InvalidParams("the two-stage rule applies to scenario 5 only")
    r0 = scenario5_r(ds.n, ds.L, spec.alpha, None)
    pilot = fit_stiv(ds, stiv_spec.model_copy(update={"r": r0}), cfg)
    g4 = gamma4_hat(ds.z, ds.residuals(pilot.beta_hat))
    final = spec.model_copy(update={"c4": g4})
    r = scenario5_r(ds.n, ds.L, spec.alpha, g4)
    checks = _validity(final, ds.n, ds.L)
    logger.info(kv(select_r="two_stage", r_pilot=r0, gamma4=g4, r=r))
    return r, checks, g4


def _draw_errors(gen: np.random.Generator, dist: ErrorDist, size: Tuple[int, int], df: float) -> np.ndarray:
    if dist == "normal":
        return gen.standard_normal(size)
    if dist == "student_t":
        return gen.standard_t(df, size)
    if dist == "laplace":
        return gen.laplace(size=size)
    return gen.integers(0, 2, size=size) * 2.0 - 1.0


def _mc_chunk(
    z: np.ndarray,
    d_out: np.ndarray,
    in_I: np.ndarray,
    dist: ErrorDist,
    df: float,
    seed_seq: np.random.SeedSequence,
    draws: int,
) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(seed_seq))
    n = z.shape[0]
    U = _draw_errors(gen, dist, (draws, n), df)
    means = U @ z / n
    stats = np.zeros(draws)
    if np.any(~in_I):
        rms = np.sqrt(np.mean(U ** 2, axis=1))
        out = d_out[None, ~in_I] * np.abs(means[:, ~in_I]) / rms[:, None]
        stats = np.maximum(stats, out.max(axis=1))
    if np.any(in_I):
        zI = z[:, in_I]
        denom = np.sqrt((U ** 2) @ (zI ** 2) / n)
        stats = np.maximum(stats, (np.abs(means[:, in_I]) / denom).max(axis=1))
    return stats


def mc_quantile_r(
    ds: Dataset,
    error_dist: ErrorDist,
    alpha: float,
    B: int,
    I: Sequence[int],
    seed: int,
    df: float = 5.0,
    dz: Optional[DiagScale] = None,
    max_workers: Optional[int] = None,
) -> float:
    """(1 - alpha) quantile of the self-normalized statistic conditional on Z, over B draws.

    alpha = 1 returns the smallest draw. Chunks use Philox streams spawned from the seed, so
    the value does not depend on max_workers.
    """
    if not 0 < alpha <= 1:
        raise InvalidParams("alpha must lie in (0, 1]")
    if B < 1:
        raise InvalidParams("B must be positive")
    dz = dz or compute_dz(ds, I)
    in_I = np.zeros(ds.L, dtype=bool)
    in_I[list(I)] = True
    sizes = [MC_CHUNK] * (B // MC_CHUNK) + ([B % MC_CHUNK] if B % MC_CHUNK else [])
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    z = np.ascontiguousarray(ds.z)
    tasks = [partial(_mc_chunk, z, dz.entries, in_I, error_dist, df, ss, m) for ss, m in zip(streams, sizes)]
    stats = np.concatenate(run_bounded(tasks, max_workers))
    r = float(np.quantile(stats, 1.0 - alpha, method="linear"))
    logger.info(kv(select_r="monte_carlo", B=B, alpha=alpha, dist=error_dist, r=r))
    return r


def safe_ratio(num: float, kappa: float) -> float:
    if kappa <= 0:
        return np.inf
    return num / kappa


def inv_plus(denominator: float) -> float:
    return np.inf if not denominator > 0 else 1.0 / denominator


def _halfwidths(sigma: float, r: float, scale: np.ndarray, kappa: np.ndarray, inv: float) -> np.ndarray:
    """2 sigma r scale_k / kappa_k * inv with the infinite flag taking precedence over zeros."""
    kappa = np.asarray(kappa, dtype=float)
    out = np.zeros_like(kappa)
    infinite = np.isinf(inv) | (kappa <= 0)
    finite_k = ~infinite & np.isfinite(kappa)
    out[finite_k] = 2.0 * sigma * r * scale[finite_k] / kappa[finite_k] * inv
    out[infinite] = np.inf
    return out


def _group(J0: Sequence[int], p: float, kappa_bar: float, sigma: float, r: float, inv: float) -> GroupBound:
    J0 = sorted(set(int(j) for j in J0))
    infinite = bool(np.isinf(inv) or kappa_bar <= 0)
    if infinite:
        bound = np.inf
    elif np.isinf(kappa_bar):
        bound = 0.0
    else:
        bound = 2.0 * sigma * r / kappa_bar * inv
    return GroupBound(J0=J0, p=p, kappa_bar=kappa_bar, bound=bound, infinite=infinite)


def assemble_report(
    kind: ReportKind,
    fit: StivFit,
    r: float,
    s: Optional[int],
    kappa_coord: np.ndarray,
    terms: Sequence[float],
    groups: Sequence[Tuple[Sequence[int], float, float]] = (),
    validity: Sequence[ValidityCheck] = (),
    approximate: bool = False,
    notes: Sequence[str] = (),
) -> ConfidenceReport:
    denominator = 1.0 - float(sum(terms))
    inv = inv_plus(denominator)
    hw = _halfwidths(fit.sigma_hat, r, fit.dx.entries, kappa_coord, inv)
    beta = fit.beta_hat
    report = ConfidenceReport(
        kind=kind,
        r=r,
        s=s,
        c=fit.spec.c,
        sigma_hat=fit.sigma_hat,
        beta_hat=beta.tolist(),
        halfwidth=hw.tolist(),
        lower=(beta - hw).tolist(),
        upper=(beta + hw).tolist(),
        infinite=np.isinf(hw).tolist(),
        kappa_coord=[float(v) for v in kappa_coord],
        denominator=denominator,
        inv_denominator=inv,
        denominator_terms=[float(t) for t in terms],
        groups=[_group(J0, p, kb, fit.sigma_hat, r, inv) for J0, p, kb in groups],
        validity=list(validity),
        approximate=approximate,
        notes=list(notes),
    )
    if np.isinf(inv):
        logger.info(kv(confidence=kind, infinite=True, denominator=denominator))
    return report


def _check_report(fit: StivFit, sr: SensitivityReport) -> None:
    if fit.spec.c is None or abs(sr.c - fit.spec.c) > 1e-12 or sr.cone != "standard":
        raise MismatchedReport(f"sensitivity report (c={sr.c}, cone={sr.cone}) does not match fit c={fit.spec.c}")
    if sr.psi_fingerprint != fingerprint(fit.psi):
        raise MismatchedReport("sensitivity report was computed on a different Psi")


def confidence_intervals(
    fit: StivFit,
    sr: SensitivityReport,
    r: float,
    J0_list: Sequence[Sequence[int]] = (),
    p: float = 1.0,
    validity: Sequence[ValidityCheck] = (),
) -> ConfidenceReport:
    """Sparsity-certificate intervals with kappa*_k(s) and kappa_1(s)."""
    _check_report(fit, sr)
    kappas = np.asarray(sr.kappa_coord)
    groups = []
    for J0 in J0_list:
        kb = combine_block_bound(kappas, J0, p, sr.kappa1)
        if p == 1.0 and sr.block_value(J0) is not None:
            kb = max(kb, sr.block_value(J0))
        groups.append((J0, p, kb))
    return assemble_report("certificate", fit, r, sr.s, kappas, [safe_ratio(r, sr.kappa1)], groups, validity)


def heavy_tail_terms(
    fit: StivFit,
    sr: SensitivityReport,
    r: float,
    J_exo: Sequence[int],
    cfg: Optional[SolverConfig] = None,
) -> List[float]:
    """r / kappa_{1,J_exo^c}(s) and r^2 / kappa_{1,J_exo}(s); empty sets contribute 0."""
    K = fit.K
    exo = sorted(set(int(k) for k in J_exo))
    endo = [k for k in range(K) if k not in exo]
    k_endo = block_bound_from_report(fit.psi, endo, sr, cfg)
    k_exo = block_bound_from_report(fit.psi, exo, sr, cfg)
    return [safe_ratio(r, k_endo), safe_ratio(r * r, k_exo)]


def confidence_intervals_ht(
    fit: StivFit,
    sr: SensitivityReport,
    r: float,
    J_exo: Sequence[int],
    J0_list: Sequence[Sequence[int]] = (),
    p: float = 1.0,
    cfg: Optional[SolverConfig] = None,
    validity: Sequence[ValidityCheck] = (),
) -> ConfidenceReport:
    """Intervals for the maximum-absolute-value normalization with the r^2 term for exogenous regressors."""
    if fit.spec.dx_mode != "maxabs":
        raise NormalizationMismatch("heavy-tail intervals need the maxabs D_X normalization")
    _check_report(fit, sr)
    kappas = np.asarray(sr.kappa_coord)
    terms = heavy_tail_terms(fit, sr, r, J_exo, cfg)
    groups = [(J0, p, combine_block_bound(kappas, J0, p, sr.kappa1)) for J0 in J0_list]
    return assemble_report("heavy_tail", fit, r, sr.s, kappas, terms, groups, validity)


def confidence_intervals_r(
    fit: StivFit,
    r: float,
    J0_list: Sequence[Sequence[int]] = (),
    p: float = 1.0,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> ConfidenceReport:
    """STIV-R intervals from the sensitivities without cone restriction."""
    if fit.kind != "stiv_r":
        raise InvalidParams("unrestricted sensitivities belong to STIV-R fits")
    K = fit.K
    kappas = np.array(run_bounded([partial(kappa_coord_free, fit.psi, k, cfg) for k in range(K)], max_workers))
    kappa1 = kappa1_free(fit.psi, cfg, max_workers)
    groups = [(J0, p, combine_block_bound(kappas, J0, p, kappa1)) for J0 in J0_list]
    return assemble_report("stiv_r", fit, r, None, kappas, [safe_ratio(r, kappa1)], groups)


def plugin_confidence(
    fit: StivFit,
    r: float,
    J_exo: Optional[Sequence[int]] = None,
    J0_list: Sequence[Sequence[int]] = (),
    p: float = 1.0,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> ConfidenceReport:
    """Intervals with the estimated support J(beta_hat) in place of J(beta); approximate level.

    Supports above the sign-pattern limit fall back to the certificate with s = |J(beta_hat)|.
    """
    c = fit.spec.c
    J_hat = list(fit.support)
    notes = ["approximate level: the estimated support replaces the true one"]
    try:
        kappas = kappa_exact_all(fit.psi, J_hat, ConeFactor.standard(c, max(1, len(J_hat))), cfg, max_workers)
    except BlockTooLarge as exc:
        logger.warning(kv(plugin="fallback", support=len(J_hat), limit=exc.limit))
        sr = sensitivity_report(fit.psi, len(J_hat), c, cfg=cfg, max_workers=max_workers)
        notes.append(f"support of size {len(J_hat)} exceeds the sign-pattern limit; certificate with s={len(J_hat)}")
        if J_exo is not None:
            report = confidence_intervals_ht(fit, sr, r, J_exo, J0_list, p, cfg)
        else:
            report = confidence_intervals(fit, sr, r, J0_list, p)
        return report.model_copy(update={"kind": "plugin", "approximate": True, "notes": notes})

    kappa1 = plugin_kappa1(kappas, J_hat, c)
    if J_exo is None:
        terms = [safe_ratio(r, kappa1)]
    else:
        exo = sorted(set(int(k) for k in J_exo))
        endo = [k for k in range(fit.K) if k not in exo]
        terms = [safe_ratio(r, combine_block_bound(kappas, endo, 1.0, kappa1)),
                 safe_ratio(r * r, combine_block_bound(kappas, exo, 1.0, kappa1))]
    groups = [(J0, p, combine_block_bound(kappas, J0, p, kappa1)) for J0 in J0_list]
    return assemble_report("plugin", fit, r, len(J_hat), kappas, terms, groups, approximate=True, notes=notes)


def nested_confsets(
    fit: StivFit,
    r: float,
    s_values: Sequence[int],
    J0_list: Sequence[Sequence[int]] = (),
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> List[ConfidenceReport]:
    """Certificate reports for increasing s; kappa bounds are clamped to be nonincreasing in s."""
    s_values = [int(s) for s in s_values]
    if s_values != sorted(set(s_values)):
        raise InvalidParams("s values must be strictly increasing")
    out = []
    prev_k, prev_1 = None, None
    for s in s_values:
        sr = sensitivity_report(fit.psi, s, fit.spec.c, cfg=cfg, max_workers=max_workers)
        kappas = np.asarray(sr.kappa_coord)
        kappa1 = sr.kappa1
        if prev_k is not None:
            excess = np.max(kappas - prev_k)
            if excess > NEST_TOL * max(1.0, float(np.max(prev_k[np.isfinite(prev_k)], initial=1.0))):
                raise SolverFailure(f"sensitivity bound grew with s by {excess:.3g}", None, None, {"s": s})
            kappas = np.minimum(kappas, prev_k)
            kappa1 = min(kappa1, prev_1)
            sr = sr.model_copy(update={"kappa_coord": kappas.tolist(), "kappa1": kappa1})
        out.append(confidence_intervals(fit, sr, r, J0_list))
        prev_k, prev_1 = kappas, kappa1
    return out


def threshold_select(
    fit: StivFit,
    sr: SensitivityReport,
    r: float,
    J_exo: Optional[Sequence[int]] = None,
    cfg: Optional[SolverConfig] = None,
    report: Optional[ConfidenceReport] = None,
) -> SelectionResult:
    """beta_tilde_k = beta_hat_k 1{|beta_hat_k| > omega_k(s)} with omega_k the coordinate halfwidth."""
    if report is None:
        if J_exo is not None:
            report = confidence_intervals_ht(fit, sr, r, J_exo, cfg=cfg)
        else:
            report = confidence_intervals(fit, sr, r)
    return select_by_threshold(fit.beta_hat, np.asarray(report.halfwidth))


def select_by_threshold(beta: np.ndarray, omega: np.ndarray) -> SelectionResult:
    beta = np.asarray(beta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if beta.shape != omega.shape:
        raise InvalidParams(f"coefficients of shape {beta.shape} against thresholds of shape {omega.shape}")
    if np.any(np.isnan(beta)) or np.any(np.isnan(omega)) or np.any(omega < 0):
        raise InvalidParams("NaN entries or negative thresholds")
    if np.any(np.isinf(omega)):
        return SelectionResult(support=[], signs=[0] * beta.shape[0], thresholds=omega.tolist(),
                               beta_thresholded=[0.0] * beta.shape[0], infinite_threshold=True)
    keep = np.abs(beta) > omega
    tilde = np.where(keep, beta, 0.0)
    signs = np.sign(tilde).astype(int)
    return SelectionResult(support=[int(k) for k in np.where(keep)[0]], signs=signs.tolist(),
                           thresholds=omega.tolist(), beta_thresholded=tilde.tolist(), infinite_threshold=False)


def approx_sparse_bound(
    fit: StivFit,
    r: float,
    J_candidates: Sequence[Sequence[int]],
    J0_list: Sequence[Sequence[int]],
    p: float = 1.0,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> List[ApproxSparseBound]:
    """Bias/variance bound over candidate supports on the enlarged cone.

    The bias term uses beta_hat in place of the unknown beta, so the values are estimates.
    """
    c = fit.spec.c
    if c is None:
        raise InvalidParams("approximate-sparsity bounds need a STIV fit with c")
    scaled = np.abs(fit.beta_hat / fit.dx.entries)
    per_J = []
    for J in J_candidates:
        J = sorted(set(int(j) for j in J))
        kex = kappa_exact_all(fit.psi, J, ConeFactor.enlarged(c, max(1, len(J))), cfg, max_workers)
        k1 = plugin_kappa1(kex, J, c, cone="enlarged")
        mask = np.ones(fit.K, dtype=bool)
        mask[J] = False
        bias = 6.0 * float(np.sum(scaled[mask])) / (1.0 - c)
        per_J.append((J, kex, k1, bias))

    inv_cache = [inv_plus(1.0 - safe_ratio(r, k1)) for _, _, k1, _ in per_J]
    out = []
    for J0 in J0_list:
        J0 = sorted(set(int(j) for j in J0))
        variances, biases = [], []
        for (J, kex, k1, bias), inv in zip(per_J, inv_cache):
            kb = combine_block_bound(kex, J0, p, k1)
            variances.append(_group(J0, p, kb, fit.sigma_hat, r, inv).bound)
            biases.append(bias)
        values = [max(v, b) for v, b in zip(variances, biases)]
        best = int(np.argmin(values))
        out.append(ApproxSparseBound(J0=J0, p=p, bound=values[best], best_J=per_J[best][0],
                                     variance_terms=variances, bias_terms=biases))
    return out


def c_grid_confidence(
    ds: Dataset,
    spec: StivSpec,
    c_grid: Sequence[float],
    s: int,
    r: float,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> CGridReport:
    """Certificate intervals for each c of a grid and the width-minimizing c per coordinate."""
    fits = fit_stiv_grid(ds, spec.model_copy(update={"r": r}), c_grid, cfg, max_workers)
    reports = []
    for fit in fits:
        sr = sensitivity_report(fit.psi, s, fit.spec.c, cfg=cfg, max_workers=max_workers)
        reports.append(confidence_intervals(fit, sr, r))
    widths = np.array([rep.halfwidth for rep in reports])
    best = [float(c_grid[int(np.argmin(widths[:, k]))]) for k in range(widths.shape[1])]
    return CGridReport(c_grid=[float(c) for c in c_grid], halfwidth=widths.T.tolist(), best_c=best, reports=reports)


def _fmt(v: float) -> str:
    if np.isinf(v):
        return "-inf" if v < 0 else "inf"
    return f"{v:.3f}"


def render_confidence_table(
    certificate: ConfidenceReport,
    plugin: ConfidenceReport,
    names: Optional[Sequence[str]] = None,
    title: Optional[str] = None,
) -> str:
    """Plain-text table: certificate and plug-in bounds, estimate, sensitivities and thresholds."""
    K = len(certificate.beta_hat)
    names = list(names) if names is not None else [f"x{k + 1}" for k in range(K)]
    s_label = certificate.s if certificate.s is not None else "s"
    table = Table(title=title, box=None, show_edge=False, pad_edge=False)
    for header in ("", "lower_SC", "lower_J", "beta_hat", "upper_J", "upper_SC",
                   "kappa*_kJ", f"kappa*_k({s_label})", "omega_kJ", "omega_kSC"):
        table.add_column(header, justify="right")
    for k in range(K):
        table.add_row(
            names[k],
            _fmt(certificate.lower[k]),
            _fmt(plugin.lower[k]),
            _fmt(certificate.beta_hat[k]),
            _fmt(plugin.upper[k]),
            _fmt(certificate.upper[k]),
            _fmt(plugin.kappa_coord[k]),
            _fmt(certificate.kappa_coord[k]),
            _fmt(plugin.halfwidth[k]),
            _fmt(certificate.halfwidth[k]),
        )
    buf = io.StringIO()
    Console(file=buf, width=160, color_system=None, force_terminal=False).print(table)
    return buf.getvalue()
