# src/stiv/nv_detect.py
"""Non-validity indicators of suspect instruments (STIV-NV) and detection by thresholding.

With a_l = zbar_l * (y - X beta_pilot), abar_l its mean and sd_l its standard deviation,

    sqrt(Q_l(theta_l)) = || (sd_l, abar_l - theta_l) ||_2

so every cone of the program has three coordinates whatever n is:

    theta   L1   free
    sigma   1    nonneg
    cone_l  3    soc       (sigma + b zbar_*, sd_l, abar_l - theta_l)
    pband   L1   nonneg    sigma r1 + b zbar_* - (abar - theta)
    mband   L1   nonneg    sigma r1 + b zbar_* + (abar - theta)
    w, wplus, wminus       w >= |theta|

minimize  sum w + c sigma.
"""
from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config.settings import settings
from src.stiv.cone_solver import (
    CertificateReport,
    ProgramBuilder,
    Solution,
    SolverConfig,
    certify,
    failure_dump,
    solve_cone,
)
from src.stiv.data_model import Dataset, col_mean
from src.stiv.exceptions import DataError, InfinitePilotBound, InvalidParams, SolverFailure
from src.stiv.inference import (
    ScenarioSpec,
    ValidityCheck,
    inv_plus,
    safe_ratio,
    select_r,
)
from src.stiv.sensitivities import SensitivityReport, combine_block_bound, sensitivity_report
from src.stiv.stiv_core import FitReport, StivFit, StivSpec, fit_stiv
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)

PilotRule = Literal["certificate", "sparsity_scaled"]


@dataclass(frozen=True)
class NvFit:
    theta_hat: np.ndarray
    sigma1_hat: float
    b_hat: float
    r1: float
    c: float
    zbar_star: float
    support: Tuple[int, ...]
    beta_pilot: np.ndarray
    solution: Solution
    certificate: CertificateReport
    band_excess: float
    cone_excess: float
    provenance: str = "supplied"

    @property
    def L1(self) -> int:
        return self.theta_hat.shape[0]


class NvBounds(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    s1: int
    linf: float
    l1: float
    linf_infinite: bool
    l1_infinite: bool


class NvSelection(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    invalid: List[int]
    signs: List[int]
    omega: float
    infinite_threshold: bool


class NvReport(BaseModel):
    """JSON view of a full detection run (one-based instrument indices)."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    pilot: FitReport
    b_hat: float
    b_rule: str
    r1: float
    r1_validity: List[ValidityCheck] = Field(default_factory=list)
    theta_hat: List[float]
    sigma1_hat: float
    zbar_star: float
    bounds: NvBounds
    invalid: List[int]
    signs: List[int]


@dataclass(frozen=True)
class NvResult:
    pilot: StivFit
    sensitivities: SensitivityReport
    fit: NvFit
    bounds: NvBounds
    selection: NvSelection
    r1_validity: List[ValidityCheck]

    def to_report(self) -> NvReport:
        return NvReport(
            pilot=self.pilot.to_report(),
            b_hat=self.fit.b_hat,
            b_rule=self.fit.provenance,
            r1=self.fit.r1,
            r1_validity=self.r1_validity,
            theta_hat=self.fit.theta_hat.tolist(),
            sigma1_hat=self.fit.sigma1_hat,
            zbar_star=self.fit.zbar_star,
            bounds=self.bounds,
            invalid=[l + 1 for l in self.selection.invalid],
            signs=self.selection.signs,
        )


def zbar_star(zbar: np.ndarray) -> float:
    return float(np.max(np.sqrt(col_mean(np.asarray(zbar) ** 2))))


def nv_F(zbar: np.ndarray, u: np.ndarray, theta: np.ndarray) -> float:
    """F(theta, beta) = max_l sqrt(E_n[(zbar_l u - theta_l)^2]) for residuals u = y - X beta."""
    a = np.asarray(zbar) * np.asarray(u)[:, None]
    return float(np.max(np.sqrt(col_mean((a - np.asarray(theta)[None, :]) ** 2))))


def pilot_l1_bound(
    fit: StivFit,
    sr: SensitivityReport,
    r: float,
    rule: PilotRule = "certificate",
) -> float:
    """Bound on |D_X^{-1}(beta_pilot - beta)|_1 from the pilot's certificate.

    "certificate" is the l1 confidence bound on the full index set; "sparsity_scaled"
    multiplies 2 sigma r / kappa_1(s) by s as in the selection consistency statement.
    """
    kappas = np.asarray(sr.kappa_coord)
    inv = inv_plus(1.0 - safe_ratio(r, sr.kappa1))
    if np.isinf(inv):
        return np.inf
    if rule == "certificate":
        kbar = combine_block_bound(kappas, range(fit.K), 1.0, sr.kappa1)
        return 0.0 if np.isinf(kbar) else 2.0 * fit.sigma_hat * r / kbar * inv
    return 2.0 * fit.sigma_hat * r * sr.s / sr.kappa1 * inv


def _nv_moments(zbar: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = zbar * u[:, None]
    abar = col_mean(a)
    sd = np.sqrt(col_mean((a - abar[None, :]) ** 2))
    return abar, sd


def nv_constraint_excess(fit: NvFit, zbar: np.ndarray, u: np.ndarray) -> Tuple[float, float]:
    """Excess of (theta_hat, sigma1_hat) over the band and cone constraints (<= 0 when feasible)."""
    slack = fit.b_hat * fit.zbar_star
    abar, _ = _nv_moments(zbar, u)
    band = float(np.max(np.abs(abar - fit.theta_hat))) - (fit.sigma1_hat * fit.r1 + slack)
    cone = nv_F(zbar, u, fit.theta_hat) - (fit.sigma1_hat + slack)
    return band, cone


def assemble_nv_program(abar: np.ndarray, sd: np.ndarray, slack: float, r1: float, c: float):
    L1 = abar.shape[0]
    pb = ProgramBuilder()
    pb.add_block("theta", L1, "free")
    pb.add_block("sigma", 1, "nonneg")
    for l in range(L1):
        pb.add_block(f"cone{l}", 3, "soc")
    pb.add_block("pband", L1, "nonneg")
    pb.add_block("mband", L1, "nonneg")
    pb.add_block("w", L1, "nonneg")
    pb.add_block("wplus", L1, "nonneg")
    pb.add_block("wminus", L1, "nonneg")

    one = np.array([[1.0]])
    for l in range(L1):
        e_l = np.zeros((1, L1))
        e_l[0, l] = 1.0
        pb.add_rows({f"cone{l}": np.array([[1.0, 0.0, 0.0]]), "sigma": -one}, slack)
        pb.add_rows({f"cone{l}": np.array([[0.0, 1.0, 0.0]])}, sd[l])
        pb.add_rows({f"cone{l}": np.array([[0.0, 0.0, 1.0]]), "theta": e_l}, abar[l])

    eye = np.eye(L1)
    r_col = np.full((L1, 1), -r1)
    pb.add_rows({"pband": eye, "sigma": r_col, "theta": -eye}, slack - abar)
    pb.add_rows({"mband": eye, "sigma": r_col, "theta": eye}, slack + abar)
    pb.add_rows({"w": eye, "theta": -eye, "wplus": -eye}, 0.0)
    pb.add_rows({"w": eye, "theta": eye, "wminus": -eye}, 0.0)
    pb.set_cost("w", 1.0)
    pb.set_cost("sigma", c)
    return pb.build()


def fit_stiv_nv(
    ds: Dataset,
    pilot: StivFit,
    b_hat: float,
    r1: float,
    c: float,
    cfg: Optional[SolverConfig] = None,
    zero_clip: Optional[float] = None,
    provenance: str = "supplied",
) -> NvFit:
    """min |theta|_1 + c sigma_1 over the constraint set built around the pilot residuals."""
    if ds.zbar is None:
        raise DataError("dataset has no suspect instruments (zbar)")
    if np.isinf(b_hat):
        raise InfinitePilotBound("pilot l1 bound is infinite")
    if b_hat < 0 or r1 <= 0 or not 0 < c < 1:
        raise InvalidParams("need b_hat >= 0, r1 > 0 and 0 < c < 1")
    cfg = cfg or SolverConfig()
    zero_clip = settings.zero_clip if zero_clip is None else zero_clip

    u = ds.residuals(pilot.beta_hat)
    abar, sd = _nv_moments(ds.zbar, u)
    zs = zbar_star(ds.zbar)
    slack = b_hat * zs
    program = assemble_nv_program(abar, sd, slack, r1, c)
    sol = solve_cone(program, cfg)
    if not sol.optimal:
        dump = failure_dump(program, cfg, f"stiv_nv_L{ds.L1}")
        logger.error(kv(fit="stiv_nv", status=sol.status, dump=dump))
        raise SolverFailure(f"STIV-NV program not solved: {sol.status}", sol, dump, {"estimator": "stiv_nv"})

    theta = sol.primal[program.block("theta")].copy()
    sigma1 = max(float(sol.primal[program.block("sigma")][0]), 0.0)
    support = tuple(int(l) for l in np.where(np.abs(theta) >= zero_clip)[0])
    cert = certify(sol, program, cfg)
    if not cert.passed:
        logger.warning(kv(fit="stiv_nv", certificate="flagged", flags=",".join(cert.flags)))
    fit = NvFit(theta_hat=theta, sigma1_hat=sigma1, b_hat=b_hat, r1=r1, c=c, zbar_star=zs, support=support,
                beta_pilot=pilot.beta_hat, solution=sol, certificate=cert, band_excess=0.0, cone_excess=0.0,
                provenance=provenance)
    band, cone = nv_constraint_excess(fit, ds.zbar, u)
    logger.info(kv(fit="stiv_nv", L1=ds.L1, sigma1=sigma1, support=len(support), b_hat=b_hat))
    return replace(fit, band_excess=band, cone_excess=cone)


def nv_confidence(fit: NvFit, c: Optional[float] = None, s1: Optional[int] = None) -> NvBounds:
    """sup-norm bound V(sigma1, c, b, s1) and the l1 bound on theta_hat - theta*; s1 defaults to |J(theta_hat)|."""
    c = fit.c if c is None else c
    s1 = len(fit.support) if s1 is None else int(s1)
    if s1 < 0:
        raise InvalidParams("s1 must be nonnegative")
    r1, bz = fit.r1, fit.b_hat * fit.zbar_star
    inv_inf = inv_plus(1.0 - 2.0 * r1 * s1 / (1.0 - c))
    inv_one = inv_plus(1.0 - c - 2.0 * r1 * s1)
    linf = 2.0 * (fit.sigma1_hat * r1 + (1.0 + r1 / (1.0 - c)) * bz) * inv_inf
    l1 = 2.0 * (2.0 * s1 * (fit.sigma1_hat * r1 + (1.0 + r1) * bz) + c * bz) * inv_one
    if np.isinf(inv_inf):
        linf = np.inf
    if np.isinf(inv_one):
        l1 = np.inf
    return NvBounds(s1=s1, linf=linf, l1=l1, linf_infinite=bool(np.isinf(linf)), l1_infinite=bool(np.isinf(l1)))


def nv_threshold(fit: NvFit, omega: float) -> NvSelection:
    """theta_tilde_l = theta_hat_l 1{|theta_hat_l| > omega}."""
    if omega < 0:
        raise InvalidParams("omega must be nonnegative")
    if np.isinf(omega):
        return NvSelection(invalid=[], signs=[0] * fit.L1, omega=omega, infinite_threshold=True)
    keep = np.abs(fit.theta_hat) > omega
    signs = np.where(keep, np.sign(fit.theta_hat), 0.0).astype(int)
    return NvSelection(invalid=[int(l) for l in np.where(keep)[0]], signs=signs.tolist(), omega=omega,
                       infinite_threshold=False)


def nv_pipeline(
    ds: Dataset,
    spec: StivSpec,
    s: int,
    c: float,
    scenario: Optional[ScenarioSpec] = None,
    s1: Optional[int] = None,
    b_rule: PilotRule = "certificate",
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> NvResult:
    """Pilot STIV on the valid instruments, its l1 bound, r1 for L1 suspects, STIV-NV and detection."""
    if ds.zbar is None:
        raise DataError("dataset has no suspect instruments (zbar)")
    pilot = fit_stiv(ds, spec, cfg)
    sr = sensitivity_report(pilot.psi, s, spec.c, cfg=cfg, max_workers=max_workers)
    b_hat = pilot_l1_bound(pilot, sr, spec.r, b_rule)
    r1, checks = select_r(scenario or ScenarioSpec(), ds.n, ds.L1)
    fit = fit_stiv_nv(ds, pilot, b_hat, r1, c, cfg, provenance=b_rule)
    bounds = nv_confidence(fit, c, s1)
    selection = nv_threshold(fit, bounds.linf)
    logger.info(kv(nv="pipeline", b_hat=b_hat, r1=r1, omega=bounds.linf, invalid=len(selection.invalid)))
    return NvResult(pilot=pilot, sensitivities=sr, fit=fit, bounds=bounds, selection=selection, r1_validity=checks)
