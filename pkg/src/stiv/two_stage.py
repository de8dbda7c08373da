# src/stiv/two_stage.py
"""Two-stage STIV with an estimated linear projection instrument for one endogenous regressor.

Usage:
    fsf = fit_first_stage(ds, k_end=0, r=r)
    fit, report = fit_stiv_2s(ds, fsf, StivSpec(c=0.1, r=r, I=(ds.const_instr_idx,), dx_mode="maxabs"), s=5)
"""
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from rich.console import Console
from rich.table import Table

from src.stiv.cone_solver import SolverConfig
from src.stiv.data_model import Dataset, DiagScale, PsiMatrix, compute_dx, psi_values
from src.stiv.exceptions import (
    DataError,
    DegenerateInstrument,
    InfiniteC1,
    NormalizationMismatch,
    SpecInvalid,
)
from src.stiv.inference import (
    ConfidenceReport,
    ScenarioSpec,
    assemble_report,
    inv_plus,
    safe_ratio,
    select_r,
)
from src.stiv.sensitivities import combine_block_bound, sensitivity_report
from src.stiv.stiv_core import MomentSystem, StivFit, StivSpec, fit_stiv, solve_moment_program
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)

DEFAULT_C_RF = 0.1
DEGENERATE_INSTRUMENT = 1e-12


@dataclass(frozen=True)
class FirstStageFit:
    """Square-root Lasso of the endogenous regressor on all instruments, with the l1 error bound C1."""

    k_end: int
    zeta_hat: np.ndarray
    sigma_rf: float
    c_rf: float
    s_rf: int
    r: float
    kappa1: float
    C1: float
    fit: StivFit

    @property
    def infinite(self) -> bool:
        return bool(np.isinf(self.C1))

    @property
    def support(self) -> Tuple[int, ...]:
        return self.fit.support

    def to_report(self) -> "FirstStageReport":
        return FirstStageReport(
            k_end=self.k_end + 1,
            zeta_hat=self.zeta_hat.tolist(),
            support=[l + 1 for l in self.support],
            sigma_rf=self.sigma_rf,
            c_rf=self.c_rf,
            s_rf=self.s_rf,
            r=self.r,
            kappa1=self.kappa1,
            C1=self.C1,
            infinite=self.infinite,
        )


class FirstStageReport(BaseModel):
    """JSON view of a FirstStageFit (one-based indices)."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    k_end: int
    zeta_hat: List[float]
    support: List[int]
    sigma_rf: float
    c_rf: float
    s_rf: int
    r: float
    kappa1: float
    C1: float
    infinite: bool


def reduced_form_dataset(ds: Dataset, k_end: int) -> Dataset:
    """Exogenous regression of x_{k_end} on every instrument."""
    return Dataset(y=ds.x[:, k_end], x=ds.z, z=ds.z, const_instr_idx=ds.const_instr_idx)


def first_stage_c1(sigma_rf: float, r: float, kappa1: float) -> float:
    """C1 = 2 sigma_rf r / kappa_1(s_RF) (1 - r^2 / kappa_1(s_RF))_+^{-1}; infinite when the bracket is not positive."""
    inv = inv_plus(1.0 - safe_ratio(r * r, kappa1))
    if np.isinf(inv):
        return np.inf
    if np.isinf(kappa1):
        return 0.0
    return 2.0 * sigma_rf * r / kappa1 * inv


def fit_first_stage(
    ds: Dataset,
    k_end: int,
    c_rf: float = DEFAULT_C_RF,
    r: Optional[float] = None,
    s_rf: Optional[int] = None,
    scenario: Optional[ScenarioSpec] = None,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> FirstStageFit:
    """First stage under the maxabs normalization; s_RF defaults to the size of the fitted support."""
    if not 0 <= k_end < ds.K:
        raise DataError(f"endogenous index {k_end} out of range")
    if k_end in ds.exo_idx:
        raise SpecInvalid(f"regressor {k_end} is declared exogenous")
    if r is None:
        r, _ = select_r(scenario or ScenarioSpec(), ds.n, ds.L)
    rf = reduced_form_dataset(ds, k_end)
    spec = StivSpec(c=c_rf, r=r, I=(rf.const_instr_idx,), dx_mode="maxabs")
    dx = compute_dx(rf, "maxabs")
    fit = fit_stiv(rf, spec, cfg, dz=DiagScale(dx.entries, dx.mode), kind="first_stage")
    s = int(s_rf) if s_rf is not None else max(1, len(fit.support))
    if not 1 <= s <= rf.K:
        raise SpecInvalid(f"s_RF={s} must lie in 1..{rf.K}")
    sr = sensitivity_report(fit.psi, s, c_rf, cfg=cfg, max_workers=max_workers)
    C1 = first_stage_c1(fit.sigma_hat, r, sr.kappa1)
    if np.isinf(C1):
        logger.warning(kv(first_stage="infinite_C1", kappa1=sr.kappa1, r=r, s_rf=s))
    logger.info(kv(first_stage=k_end, sigma_rf=fit.sigma_hat, support=len(fit.support), kappa1=sr.kappa1, C1=C1))
    return FirstStageFit(
        k_end=k_end,
        zeta_hat=fit.beta_hat,
        sigma_rf=fit.sigma_hat,
        c_rf=c_rf,
        s_rf=s,
        r=r,
        kappa1=sr.kappa1,
        C1=C1,
        fit=fit,
    )


def build_2s_dataset(ds: Dataset, fsf: FirstStageFit, k_end: Optional[int] = None) -> Tuple[np.ndarray, DiagScale]:
    """Instruments of the second stage: exogenous regressors plus z'zeta_hat in the endogenous slot."""
    k_end = fsf.k_end if k_end is None else k_end
    if fsf.infinite:
        raise InfiniteC1("first-stage bound C1 is infinite; the enlarged constraint is void")
    others = [k for k in ds.endo_idx if k != k_end]
    if others:
        raise SpecInvalid(f"two-stage STIV handles one endogenous regressor, found also {others}")
    zhat = ds.z @ fsf.zeta_hat
    peak = float(np.max(np.abs(zhat)))
    if peak < DEGENERATE_INSTRUMENT:
        raise DegenerateInstrument("estimated projection instrument is identically zero")
    Z2 = np.array(ds.x, dtype=float, copy=True)
    Z2[:, k_end] = zhat
    entries = 1.0 / np.max(np.abs(ds.x), axis=0)
    entries[k_end] = 1.0 / (peak + 2.0 * fsf.C1)
    return Z2, DiagScale(entries, "two_stage")


def two_stage_moments(ds: Dataset, Z2: np.ndarray, d2: DiagScale) -> MomentSystem:
    """Band on Z_2S, a single cone on E_n[u^2]."""
    return MomentSystem(band_z=Z2, band_d=d2.entries, cone_w=np.ones((ds.n, 1)), cone_d=np.ones(1))


def fit_stiv_2s(
    ds: Dataset,
    fsf: FirstStageFit,
    spec: StivSpec,
    s: int,
    J0_list: Sequence[Sequence[int]] = (),
    p: float = 1.0,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> Tuple[StivFit, ConfidenceReport]:
    """Second stage on the enlarged constraint and its confidence report."""
    if spec.dx_mode != "maxabs":
        raise NormalizationMismatch("the second stage uses the maxabs D_X normalization")
    if spec.c is None:
        raise SpecInvalid("the second stage needs a tuning constant c")
    Z2, d2 = build_2s_dataset(ds, fsf)
    dx = compute_dx(ds, "maxabs")
    psi = PsiMatrix(psi_values(Z2, ds.x, d2.entries, dx.entries), dx, d2)
    fit = solve_moment_program(ds.y, ds.x, dx, d2, two_stage_moments(ds, Z2, d2), psi, spec, cfg, "stiv_2s")
    sr = sensitivity_report(psi, s, spec.c, cfg=cfg, max_workers=max_workers)
    kappas = np.asarray(sr.kappa_coord)
    terms = [safe_ratio(spec.r, kappas[fsf.k_end]), safe_ratio(spec.r * spec.r, sr.kappa1)]
    groups = [(J0, p, combine_block_bound(kappas, J0, p, sr.kappa1)) for J0 in J0_list]
    report = assemble_report("two_stage", fit, spec.r, s, kappas, terms, groups)
    logger.info(kv(two_stage=fsf.k_end, sigma=fit.sigma_hat, halfwidth_end=report.halfwidth[fsf.k_end]))
    return fit, report


def render_first_stage(report: FirstStageReport, names: Optional[Sequence[str]] = None) -> str:
    """Nonzero reduced-form coefficients followed by sigma_RF, s_RF and C1."""
    L = len(report.zeta_hat)
    names = list(names) if names is not None else [f"z{l + 1}" for l in range(L)]
    table = Table(title=f"first stage for x{report.k_end}", box=None, show_edge=False, pad_edge=False)
    table.add_column("instrument")
    table.add_column("zeta_hat", justify="right")
    for l in report.support:
        table.add_row(names[l - 1], f"{report.zeta_hat[l - 1]:.3f}")
    table.add_row("sigma_RF", f"{report.sigma_rf:.3f}")
    table.add_row("s_RF", str(report.s_rf))
    table.add_row("C1", "inf" if report.infinite else f"{report.C1:.3f}")
    buf = io.StringIO()
    Console(file=buf, width=120, color_system=None, force_terminal=False).print(table)
    return buf.getvalue()
