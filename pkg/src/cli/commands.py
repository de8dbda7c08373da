# src/cli/commands.py
"""Routing of a validated RunConfig to the module pipelines and report emission."""
import io
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console
from rich.table import Table

from src.cli.run_config import RunConfig, index_of, load_dataset
from src.sim.tables import repro_tables
from src.stiv.cone_solver import SolverConfig
from src.stiv.data_model import Dataset
from src.stiv.inference import (
    CGridReport,
    ConfidenceReport,
    SelectionResult,
    ValidityCheck,
    c_grid_confidence,
    confidence_intervals,
    confidence_intervals_ht,
    confidence_intervals_r,
    nested_confsets,
    plugin_confidence,
    render_confidence_table,
    select_r,
    select_r_two_stage,
    threshold_select,
)
from src.stiv.nv_detect import nv_pipeline
from src.stiv.sensitivities import SensitivityReport, sensitivity_report
from src.stiv.stiv_core import FitReport, StivFit, StivSpec, fit_sqrt_lasso, fit_stiv, fit_stiv_grid, fit_stiv_r
from src.stiv.two_stage import FirstStageReport, fit_first_stage, fit_stiv_2s, render_first_stage
from src.utils.logging import kv, setup_logger
from src.utils.reports import configure_run, emit

logger = setup_logger(__name__)


class FitBatch(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    r: float
    validity: List[ValidityCheck] = Field(default_factory=list)
    fits: List[FitReport]


class CiResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    certificate: Optional[ConfidenceReport] = None
    plugin: Optional[ConfidenceReport] = None
    nested: List[ConfidenceReport] = Field(default_factory=list)
    grid: Optional[CGridReport] = None


class SelectResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    selection: SelectionResult
    confidence: ConfidenceReport


class TwoStageResult(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    first_stage: FirstStageReport
    second_stage: FitReport
    confidence: ConfidenceReport


def _table(title: str, columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    table = Table(title=title, box=None, show_edge=False, pad_edge=False)
    for i, col in enumerate(columns):
        table.add_column(col, justify="left" if i == 0 else "right")
    for row in rows:
        table.add_row(*row)
    buf = io.StringIO()
    Console(file=buf, width=160, color_system=None, force_terminal=False).print(table)
    return buf.getvalue()


def _f(v: float) -> str:
    return ("-inf" if v < 0 else "inf") if np.isinf(v) else f"{v:.4f}"


def render_fit(fit: FitReport, names: Sequence[str]) -> str:
    rows = [[name, _f(b), _f(bs)] for name, b, bs in zip(names, fit.beta_hat, fit.beta_sparse)]
    rows.append(["sigma_hat", _f(fit.sigma_hat), ""])
    title = f"{fit.kind} c={fit.c} r={fit.r:.4g}"
    return _table(title, ["", "beta_hat", "beta_sparse"], rows)


def render_sensitivities(sr: SensitivityReport, names: Sequence[str]) -> str:
    rows = [[name, _f(v)] for name, v in zip(names, sr.kappa_coord)]
    rows.append(["kappa_1", _f(sr.kappa1)])
    rows.extend([[f"block {[j + 1 for j in b.J0]}", _f(b.value)] for b in sr.blocks])
    return _table(f"sensitivities s={sr.s} c={sr.c} cone={sr.cone}", ["", "kappa*_k(s)"], rows)


def render_intervals(rep: ConfidenceReport, names: Sequence[str]) -> str:
    rows = [[name, _f(lo), _f(b), _f(hi), _f(hw)]
            for name, lo, b, hi, hw in zip(names, rep.lower, rep.beta_hat, rep.upper, rep.halfwidth)]
    rows.extend([[f"|group {[j + 1 for j in g.J0]}|_{g.p:g}", "", "", "", _f(g.bound)] for g in rep.groups])
    text = _table(f"{rep.kind} intervals s={rep.s} r={rep.r:.4g}", ["", "lower", "beta_hat", "upper", "halfwidth"], rows)
    for v in rep.validity:
        if not v.passed:
            text += f"warning: {v.name} {v.detail}\n"
    if rep.all_infinite:
        text += "note: denominator is not positive, the intervals are unbounded\n"
    return text


class Context:
    """Dataset, names and derived tuning of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.solver = SolverConfig()
        self.ds, self.names = load_dataset(cfg)
        inst = self.names["instruments"]
        I = set(index_of(inst, cfg.I, "I")) | {self.ds.const_instr_idx}
        self.I = tuple(sorted(I))
        self.validity: List[ValidityCheck] = []
        self.r = self._resolve_r()

    def spec(self, c: Optional[float] = None, r: Optional[float] = None) -> StivSpec:
        return StivSpec(c=self.cfg.c if c is None else c, r=self.r if r is None else r, I=self.I,
                        dx_mode=self.cfg.dx_mode)

    def _resolve_r(self) -> float:
        cfg, ds = self.cfg, self.ds
        if cfg.r is not None:
            return cfg.r
        scen = cfg.scenario_spec()
        if cfg.two_stage_r:
            # the pilot r is replaced inside the two-stage rule
            r, self.validity, _ = select_r_two_stage(scen, ds, self.spec(r=1.0), self.solver)
            return r
        r, self.validity = select_r(scen, ds.n, ds.L, ds, self.I)
        return r

    def fit(self, c: Optional[float] = None) -> StivFit:
        spec = self.spec(c)
        if self.cfg.estimator == "stiv_r":
            return fit_stiv_r(self.ds, spec, self.solver)
        if self.cfg.estimator == "sqrt_lasso":
            return fit_sqrt_lasso(self.ds, spec, self.solver)
        return fit_stiv(self.ds, spec, self.solver)

    def J0(self) -> List[List[int]]:
        return [index_of(self.names["regressors"], J, "J0") for J in self.cfg.J0]

    def s(self, fit: StivFit) -> int:
        return self.cfg.s if self.cfg.s is not None else max(1, len(fit.support))

    def confidence(self, fit: StivFit, s: int) -> Tuple[ConfidenceReport, SensitivityReport]:
        cfg = self.cfg
        if fit.kind == "stiv_r":
            return confidence_intervals_r(fit, self.r, self.J0(), cfg.p, self.solver, cfg.max_workers), None
        sr = sensitivity_report(fit.psi, s, fit.spec.c, J0_list=self.J0(), cfg=self.solver, max_workers=cfg.max_workers)
        if cfg.heavy_tail:
            rep = confidence_intervals_ht(fit, sr, self.r, self.ds.exo_idx, self.J0(), cfg.p, self.solver, self.validity)
        else:
            rep = confidence_intervals(fit, sr, self.r, self.J0(), cfg.p, self.validity)
        return rep, sr


def cmd_fit(ctx: Context) -> Tuple[BaseModel, str]:
    names = ctx.names["regressors"]
    if ctx.cfg.c_grid:
        fits = fit_stiv_grid(ctx.ds, ctx.spec(), ctx.cfg.c_grid, ctx.solver, ctx.cfg.max_workers)
    else:
        fits = [ctx.fit()]
    reports = [f.to_report() for f in fits]
    return FitBatch(r=ctx.r, validity=ctx.validity, fits=reports), "".join(render_fit(rep, names) for rep in reports)


def cmd_sens(ctx: Context) -> Tuple[BaseModel, str]:
    fit = ctx.fit()
    sr = sensitivity_report(fit.psi, ctx.s(fit), fit.spec.c, ctx.cfg.cone, ctx.J0(), cfg=ctx.solver,
                            max_workers=ctx.cfg.max_workers)
    return sr, render_sensitivities(sr, ctx.names["regressors"])


def cmd_ci(ctx: Context) -> Tuple[BaseModel, str]:
    cfg, names = ctx.cfg, ctx.names["regressors"]
    if cfg.c_grid:
        grid = c_grid_confidence(ctx.ds, ctx.spec(), cfg.c_grid, cfg.s or 1, ctx.r, ctx.solver, cfg.max_workers)
        text = "".join(render_intervals(rep, names) for rep in grid.reports)
        text += "best c per coordinate: " + " ".join(f"{n}={c:g}" for n, c in zip(names, grid.best_c)) + "\n"
        return CiResult(grid=grid), text
    fit = ctx.fit()
    if cfg.s_list:
        nested = nested_confsets(fit, ctx.r, cfg.s_list, ctx.J0(), ctx.solver, cfg.max_workers)
        return CiResult(nested=nested), "".join(render_intervals(rep, names) for rep in nested)
    cert, _ = ctx.confidence(fit, ctx.s(fit))
    result = CiResult(certificate=cert)
    if cfg.plugin and fit.kind != "stiv_r":
        exo = ctx.ds.exo_idx if cfg.heavy_tail else None
        result.plugin = plugin_confidence(fit, ctx.r, exo, ctx.J0(), cfg.p, ctx.solver, cfg.max_workers)
        return result, render_confidence_table(cert, result.plugin, names)
    return result, render_intervals(cert, names)


def cmd_select(ctx: Context) -> Tuple[BaseModel, str]:
    fit = ctx.fit()
    rep, sr = ctx.confidence(fit, ctx.s(fit))
    sel = threshold_select(fit, sr, ctx.r, report=rep)
    names = ctx.names["regressors"]
    if sel.infinite_threshold:
        text = "infinite thresholds: nothing can be selected\n"
    else:
        rows = [[names[k], _f(sel.beta_thresholded[k]), f"{sel.signs[k]:+d}", _f(sel.thresholds[k])] for k in sel.support]
        text = _table("selected regressors", ["", "beta_tilde", "sign", "omega"], rows)
    return SelectResult(selection=sel, confidence=rep), text


def cmd_twostage(ctx: Context) -> Tuple[BaseModel, str]:
    cfg, names = ctx.cfg, ctx.names["regressors"]
    k_end = names.index(cfg.k_end)
    fsf = fit_first_stage(ctx.ds, k_end, cfg.c_rf, ctx.r, cfg.s_rf, cfg.scenario_spec(), ctx.solver, cfg.max_workers)
    spec = ctx.spec().model_copy(update={"dx_mode": "maxabs"})
    fit, rep = fit_stiv_2s(ctx.ds, fsf, spec, cfg.s or 1, ctx.J0(), cfg.p, ctx.solver, cfg.max_workers)
    fr = fsf.to_report()
    text = render_first_stage(fr, ctx.names["instruments"]) + render_intervals(rep, names)
    return TwoStageResult(first_stage=fr, second_stage=fit.to_report(), confidence=rep), text


def cmd_nv(ctx: Context) -> Tuple[BaseModel, str]:
    cfg = ctx.cfg
    pilot_fit = ctx.fit()
    res = nv_pipeline(ctx.ds, ctx.spec(), ctx.s(pilot_fit), cfg.c_nv, cfg.scenario_spec(), cfg.s1, cfg.b_rule,
                      ctx.solver, cfg.max_workers)
    report = res.to_report()
    zn = ctx.names["zbar"]
    rows = [[zn[l], _f(t), "invalid" if l in res.selection.invalid else ""] for l, t in enumerate(report.theta_hat)]
    text = _table(f"non-validity indicators omega={_f(report.bounds.linf)}", ["", "theta_hat", ""], rows)
    return report, text


HANDLERS: Dict[str, Callable[[Context], Tuple[BaseModel, str]]] = {
    "fit": cmd_fit,
    "sens": cmd_sens,
    "ci": cmd_ci,
    "select": cmd_select,
    "twostage": cmd_twostage,
    "nv": cmd_nv,
}


def run(cfg: RunConfig, to_stdout: bool = True) -> Tuple[Path, Path]:
    """Route cfg to its pipeline and write <command>.json and <command>.txt."""
    logger.info(kv(command=cfg.command, data=cfg.data, out=cfg.output_dir))
    if cfg.command == "simulate":
        overrides = {"n": cfg.n, "reps": cfg.reps, "seed": cfg.seed, "c": cfg.c, "s": cfg.s, "alpha": cfg.alpha}
        return repro_tables(cfg.profile or "", cfg.output_dir, overrides, max_workers=cfg.max_workers,
                            to_stdout=to_stdout)
    ctx = Context(cfg)
    result, text = HANDLERS[cfg.command](ctx)
    echo = configure_run(cfg.command, cfg.seed, {**cfg.echo(), "r_used": ctx.r})
    return emit(cfg.command, result, text, echo, cfg.output_dir, to_stdout)
