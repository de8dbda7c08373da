# src/sim/tables.py
"""Table profiles of the simulation study.

    table1       n=49, one dataset: estimates with exact and certificate sensitivities,
                 all instruments and the estimated projection instrument side by side
    first_stage  n=49, one dataset: reduced-form coefficients, sigma_RF and C1
    table3       n=49, Monte-Carlo percentiles of beta_hat and sigma_hat
    table5       n=8000, one dataset: certificate and plug-in intervals with thresholds
    table7       n=8000, one dataset: the same layout for two-stage STIV

Numbers depend on the seed; every file records it in its header.
"""
import io
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console
from rich.table import Table

from src.sim.dgp import DgpConfig, gen_dgp
from src.sim.monte_carlo import McSpec, run_mc
from src.stiv.cone_solver import SolverConfig
from src.stiv.data_model import Dataset
from src.stiv.exceptions import BlockTooLarge, InvalidParams
from src.stiv.inference import (
    ConfidenceReport,
    ScenarioSpec,
    confidence_intervals_ht,
    plugin_confidence,
    render_confidence_table,
    select_r,
)
from src.stiv.sensitivities import ConeFactor, kappa_exact_all, sensitivity_report
from src.stiv.stiv_core import StivFit, StivSpec, fit_stiv
from src.stiv.two_stage import fit_first_stage, fit_stiv_2s, render_first_stage
from src.utils.logging import kv, setup_logger
from src.utils.reports import configure_run, emit

logger = setup_logger(__name__)


class TableProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    n: int = Field(..., ge=2)
    reps: int = Field(1, ge=1)
    seed: int = 0
    c: float = Field(0.1, gt=0, lt=1)
    c_rf: float = Field(0.1, gt=0, lt=1)
    s: int = Field(5, ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    dx_mode: str = "maxabs"


PROFILES: Dict[str, TableProfile] = {
    "table1": TableProfile(name="table1", n=49),
    "first_stage": TableProfile(name="first_stage", n=49),
    "table3": TableProfile(name="table3", n=49, reps=1000),
    "table5": TableProfile(name="table5", n=8000),
    "table7": TableProfile(name="table7", n=8000),
}


class TableReport(BaseModel):
    """Rows of one profile; nested reports carry the full detail behind them."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    profile: str
    params: TableProfile
    r: float
    columns: List[str]
    rows: List[List[Any]]
    details: Dict[str, Any] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)


def get_profile(name: str, overrides: Optional[Dict[str, Any]] = None) -> TableProfile:
    if not name or name not in PROFILES:
        raise InvalidParams(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    return PROFILES[name].model_copy(update=overrides)


def _names(K: int) -> List[str]:
    return [f"beta{k + 1}" for k in range(K)]


def _render(columns: Sequence[str], rows: Sequence[Sequence[Any]], title: str) -> str:
    table = Table(title=title, box=None, show_edge=False, pad_edge=False)
    for i, col in enumerate(columns):
        table.add_column(col, justify="left" if i == 0 else "right")
    for row in rows:
        table.add_row(*[v if isinstance(v, str) else ("inf" if np.isinf(v) else f"{v:.3f}") for v in row])
    buf = io.StringIO()
    Console(file=buf, width=160, color_system=None, force_terminal=False).print(table)
    return buf.getvalue()


def _dataset(p: TableProfile) -> Tuple[DgpConfig, Dataset, float]:
    dgp = DgpConfig(n=p.n, seed=p.seed)
    ds = gen_dgp(dgp)
    r, _ = select_r(ScenarioSpec(alpha=p.alpha), ds.n, ds.L)
    return dgp, ds, r


def _spec(p: TableProfile, ds: Dataset, r: float) -> StivSpec:
    return StivSpec(c=p.c, r=r, I=(ds.const_instr_idx,), dx_mode=p.dx_mode)


def _sensitivity_columns(fit: StivFit, p: TableProfile, cfg, max_workers) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    notes = []
    sr = sensitivity_report(fit.psi, p.s, p.c, cfg=cfg, max_workers=max_workers)
    J_hat = list(fit.support)
    try:
        exact = kappa_exact_all(fit.psi, J_hat, ConeFactor.standard(p.c, max(1, len(J_hat))), cfg, max_workers)
    except BlockTooLarge as exc:
        exact = np.full(fit.K, np.nan)
        notes.append(f"estimated support of size {exc.size} exceeds the sign-pattern limit {exc.limit}")
    return exact, np.asarray(sr.kappa_coord), notes


def table1(p: TableProfile, cfg: Optional[SolverConfig] = None, max_workers: Optional[int] = None) -> Tuple[TableReport, str]:
    _, ds, r = _dataset(p)
    spec = _spec(p, ds, r)
    fit = fit_stiv(ds, spec, cfg)
    exact, cert, notes = _sensitivity_columns(fit, p, cfg, max_workers)

    fsf = fit_first_stage(ds, 0, c_rf=p.c_rf, r=r, cfg=cfg, max_workers=max_workers)
    details: Dict[str, Any] = {"all_instruments": fit.to_report().model_dump(), "first_stage": fsf.to_report().model_dump()}
    if fsf.infinite:
        notes.append("first-stage bound C1 is infinite; two-stage columns are empty")
        fit2, exact2, cert2 = None, np.full(ds.K, np.nan), np.full(ds.K, np.nan)
    else:
        fit2, rep2 = fit_stiv_2s(ds, fsf, spec, p.s, cfg=cfg, max_workers=max_workers)
        exact2, cert2, notes2 = _sensitivity_columns(fit2, p, cfg, max_workers)
        notes.extend(notes2)
        details["two_stage"] = rep2.model_dump()

    columns = ["", "beta_hat", "kappa*_kJ", f"kappa*_k({p.s})", "beta_hat_2S", "kappa*_kJ_2S", f"kappa*_k({p.s})_2S"]
    beta2 = fit2.beta_sparse if fit2 is not None else np.full(ds.K, np.nan)
    rows = [
        [name, float(fit.beta_sparse[k]), float(exact[k]), float(cert[k]), float(beta2[k]), float(exact2[k]), float(cert2[k])]
        for k, name in enumerate(_names(ds.K))
    ]
    rows.append(["sigma_hat", fit.sigma_hat, np.nan, np.nan, fit2.sigma_hat if fit2 else np.nan, np.nan, np.nan])
    report = TableReport(profile=p.name, params=p, r=r, columns=columns, rows=rows, details=details, notes=notes)
    return report, _render(columns, rows, f"STIV without and with estimated instruments, n={p.n}")


def first_stage(p: TableProfile, cfg: Optional[SolverConfig] = None, max_workers: Optional[int] = None) -> Tuple[TableReport, str]:
    _, ds, r = _dataset(p)
    fsf = fit_first_stage(ds, 0, c_rf=p.c_rf, r=r, cfg=cfg, max_workers=max_workers)
    fr = fsf.to_report()
    rows = [[f"z{l}", fr.zeta_hat[l - 1]] for l in fr.support]
    report = TableReport(profile=p.name, params=p, r=r, columns=["instrument", "zeta_hat"], rows=rows,
                         details={"first_stage": fr.model_dump()})
    return report, render_first_stage(fr)


def table3(
    p: TableProfile,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
    progress: bool = False,
) -> Tuple[TableReport, str]:
    dgp = DgpConfig(n=p.n, seed=p.seed)
    spec = McSpec(c=p.c, scenario=ScenarioSpec(alpha=p.alpha), dx_mode=p.dx_mode)
    summary = run_mc(dgp, spec, p.reps, max_workers, cfg, progress)
    columns = ["", "p05", "p50", "p95"]
    rows = [[name, summary.beta_p05[k], summary.beta_p50[k], summary.beta_p95[k]] for k, name in enumerate(_names(dgp.K))]
    rows.append(["sigma_hat", summary.sigma_p05, summary.sigma_p50, summary.sigma_p95])
    notes = [f"{summary.failures} of {summary.reps} replications failed"] if summary.failures else []
    report = TableReport(profile=p.name, params=p, r=summary.r, columns=columns, rows=rows,
                         details={"summary": summary.model_dump()}, notes=notes)
    return report, _render(columns, rows, f"Monte-Carlo study, {p.reps} replications, n={p.n}")


def _interval_rows(cert: ConfidenceReport, plug: ConfidenceReport) -> List[List[Any]]:
    return [
        [f"beta{k + 1}", cert.lower[k], plug.lower[k], cert.beta_hat[k], plug.upper[k], cert.upper[k],
         plug.kappa_coord[k], cert.kappa_coord[k], plug.halfwidth[k], cert.halfwidth[k]]
        for k in range(len(cert.beta_hat))
    ]


INTERVAL_COLUMNS = ["", "lower_SC", "lower_J", "beta_hat", "upper_J", "upper_SC",
                    "kappa*_kJ", "kappa*_k(s)", "omega_kJ", "omega_kSC"]


def table5(p: TableProfile, cfg: Optional[SolverConfig] = None, max_workers: Optional[int] = None) -> Tuple[TableReport, str]:
    _, ds, r = _dataset(p)
    fit = fit_stiv(ds, _spec(p, ds, r), cfg)
    sr = sensitivity_report(fit.psi, p.s, p.c, cfg=cfg, max_workers=max_workers)
    cert = confidence_intervals_ht(fit, sr, r, ds.exo_idx, cfg=cfg)
    plug = plugin_confidence(fit, r, ds.exo_idx, cfg=cfg, max_workers=max_workers)
    rows = _interval_rows(cert, plug)
    report = TableReport(profile=p.name, params=p, r=r, columns=INTERVAL_COLUMNS, rows=rows,
                         details={"certificate": cert.model_dump(), "plugin": plug.model_dump()})
    return report, render_confidence_table(cert, plug, title=f"confidence intervals, n={p.n}, s={p.s}")


def table7(p: TableProfile, cfg: Optional[SolverConfig] = None, max_workers: Optional[int] = None) -> Tuple[TableReport, str]:
    _, ds, r = _dataset(p)
    spec = _spec(p, ds, r)
    fsf = fit_first_stage(ds, 0, c_rf=p.c_rf, r=r, cfg=cfg, max_workers=max_workers)
    fit2, cert = fit_stiv_2s(ds, fsf, spec, p.s, cfg=cfg, max_workers=max_workers)
    plug = plugin_confidence(fit2, r, ds.exo_idx, cfg=cfg, max_workers=max_workers)
    rows = _interval_rows(cert, plug)
    report = TableReport(profile=p.name, params=p, r=r, columns=INTERVAL_COLUMNS, rows=rows,
                         details={"first_stage": fsf.to_report().model_dump(), "two_stage": cert.model_dump(),
                                  "plugin": plug.model_dump()})
    text = render_first_stage(fsf.to_report()) + "\n" + render_confidence_table(
        cert, plug, title=f"two-stage confidence intervals, n={p.n}, s={p.s}")
    return report, text


BUILDERS = {"table1": table1, "first_stage": first_stage, "table3": table3, "table5": table5, "table7": table7}


def repro_tables(
    profile: str,
    out_dir: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
    progress: bool = False,
    to_stdout: bool = True,
) -> Tuple[Path, Path]:
    """Build one profile and write <profile>.txt and <profile>.json."""
    p = get_profile(profile, overrides)
    logger.info(kv(tables=p.name, n=p.n, reps=p.reps, seed=p.seed))
    if p.name == "table3":
        report, text = table3(p, cfg, max_workers, progress)
    else:
        report, text = BUILDERS[p.name](p, cfg, max_workers)
    if report.notes:
        text += "".join(f"note: {note}\n" for note in report.notes)
    echo = configure_run("simulate", p.seed, p.model_dump())
    return emit(p.name, report, text, echo, out_dir, to_stdout)
