# src/sim/monte_carlo.py
"""Monte-Carlo replications of STIV on the simulation design.

Usage:
    summary = run_mc(DgpConfig(seed=7), McSpec(c=0.1), reps=200, max_workers=4)

Replication i draws its dataset from a seed spawned from the master seed, so the summary
does not depend on max_workers or completion order.
"""
from collections import Counter
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from src.sim.dgp import DgpConfig, gen_dgp
from src.stiv.cone_solver import SolverConfig
from src.stiv.exceptions import InvalidParams, StivError
from src.stiv.inference import (
    ScenarioSpec,
    confidence_intervals,
    confidence_intervals_ht,
    select_by_threshold,
    select_r,
)
from src.stiv.sensitivities import sensitivity_report
from src.stiv.stiv_core import StivSpec, fit_stiv
from src.utils.logging import kv, setup_logger
from src.utils.parallel import run_bounded

logger = setup_logger(__name__)

PERCENTILES = (5.0, 50.0, 95.0)


class McSpec(BaseModel):
    """Estimator side of a Monte-Carlo run. With s set, every replication also builds intervals."""

    model_config = ConfigDict(frozen=True)

    c: float = Field(0.1, gt=0, lt=1)
    scenario: ScenarioSpec = Field(default_factory=ScenarioSpec)
    dx_mode: str = Field("rms", pattern="^(rms|maxabs)$")
    s: Optional[int] = Field(None, ge=1)
    heavy_tail: bool = False


class McSummary(BaseModel):
    """Percentiles over successful replications (linear interpolation between order statistics)."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    reps: int
    successes: int
    failures: int
    failure_kinds: Dict[str, int] = Field(default_factory=dict)
    seed: int
    r: float
    beta_p05: List[float]
    beta_p50: List[float]
    beta_p95: List[float]
    sigma_p05: float
    sigma_p50: float
    sigma_p95: float
    support_recovery: Optional[float] = None
    coverage: Optional[float] = None
    infinite_share: Optional[float] = None
    halfwidth_p50: Optional[List[float]] = None


@dataclass(frozen=True)
class Replication:
    index: int
    beta: Optional[np.ndarray] = None
    sigma: float = float("nan")
    recovered: Optional[bool] = None
    covered: Optional[bool] = None
    halfwidth: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def replication_seeds(master: int, reps: int) -> List[int]:
    return [int(ss.generate_state(1, np.uint64)[0]) for ss in np.random.SeedSequence(master).spawn(reps)]


def _one_replication(
    dgp: DgpConfig,
    spec: McSpec,
    r: float,
    index: int,
    seed: int,
    cfg: Optional[SolverConfig],
    bar: Optional[tqdm],
) -> Replication:
    try:
        ds = gen_dgp(dgp.model_copy(update={"seed": seed}))
        stiv_spec = StivSpec(c=spec.c, r=r, I=(ds.const_instr_idx,), dx_mode=spec.dx_mode)
        fit = fit_stiv(ds, stiv_spec, cfg)
        if spec.s is None:
            return Replication(index, beta=fit.beta_sparse, sigma=fit.sigma_hat)
        sr = sensitivity_report(fit.psi, spec.s, spec.c, cfg=cfg, max_workers=1)
        if spec.heavy_tail:
            report = confidence_intervals_ht(fit, sr, r, ds.exo_idx, cfg=cfg)
        else:
            report = confidence_intervals(fit, sr, r)
        selection = select_by_threshold(fit.beta_hat, np.asarray(report.halfwidth))
        truth = set(np.flatnonzero(dgp.beta).tolist())
        return Replication(
            index,
            beta=fit.beta_sparse,
            sigma=fit.sigma_hat,
            recovered=set(selection.support) == truth,
            covered=report.covers(dgp.beta),
            halfwidth=np.asarray(report.halfwidth),
        )
    except StivError as exc:
        logger.warning(kv(replication=index, failed=type(exc).__name__, detail=str(exc)))
        return Replication(index, error=type(exc).__name__)
    finally:
        if bar is not None:
            bar.update(1)


def summarize(results: List[Replication], reps: int, seed: int, r: float) -> McSummary:
    results = sorted(results, key=lambda rep: rep.index)
    good = [rep for rep in results if rep.ok]
    failures = Counter(rep.error for rep in results if not rep.ok)
    if not good:
        raise InvalidParams(f"all {reps} replications failed: {dict(failures)}")
    betas = np.array([rep.beta for rep in good])
    sigmas = np.array([rep.sigma for rep in good])
    bp = np.percentile(betas, PERCENTILES, axis=0, method="linear")
    sp = np.percentile(sigmas, PERCENTILES, method="linear")
    extra = {}
    if good[0].recovered is not None:
        hw = np.array([rep.halfwidth for rep in good])
        extra = dict(
            support_recovery=float(np.mean([rep.recovered for rep in good])),
            coverage=float(np.mean([rep.covered for rep in good])),
            infinite_share=float(np.mean(np.any(np.isinf(hw), axis=1))),
            halfwidth_p50=np.percentile(hw, 50.0, axis=0, method="linear").tolist(),
        )
    return McSummary(
        reps=reps,
        successes=len(good),
        failures=reps - len(good),
        failure_kinds=dict(failures),
        seed=seed,
        r=r,
        beta_p05=bp[0].tolist(),
        beta_p50=bp[1].tolist(),
        beta_p95=bp[2].tolist(),
        sigma_p05=float(sp[0]),
        sigma_p50=float(sp[1]),
        sigma_p95=float(sp[2]),
        **extra,
    )


def run_mc(
    dgp: DgpConfig,
    spec: Optional[McSpec] = None,
    reps: int = 1000,
    max_workers: Optional[int] = None,
    cfg: Optional[SolverConfig] = None,
    progress: bool = False,
) -> McSummary:
    """reps seeded replications of the design; failed replications are counted, never dropped silently."""
    if reps < 1:
        raise InvalidParams("reps must be at least 1")
    spec = spec or McSpec()
    L = dgp.L + (1 if dgp.add_constant_instrument else 0)
    r, _ = select_r(spec.scenario, dgp.n, L)
    seeds = replication_seeds(dgp.seed, reps)
    with tqdm(total=reps, desc="replications", disable=not progress) as bar:
        tasks = [partial(_one_replication, dgp, spec, r, i, seed, cfg, bar) for i, seed in enumerate(seeds)]
        results = run_bounded(tasks, max_workers)
    summary = summarize(results, reps, dgp.seed, r)
    logger.info(kv(mc="done", reps=reps, failures=summary.failures, sigma_p50=summary.sigma_p50))
    return summary
