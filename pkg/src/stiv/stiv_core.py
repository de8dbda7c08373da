# src/stiv/stiv_core.py
"""STIV estimators as second-order cone programs.

Program layout (n observations, K regressors, L_b band instruments, |I| cone instruments):

    beta   K        free
    t      1        free          sigma = t / sqrt(n)
    cone_j 1 + m    soc           head tied to t, tail = residual block of instrument j
    pband  L_b      nonneg        r t - band(beta)
    mband  L_b      nonneg        r t + band(beta)
    w      K        nonneg        (STIV only) w >= |D_X^{-1} beta|
    wplus  K        nonneg        (STIV only) w - D_X^{-1} beta
    wminus K        nonneg        (STIV only) w + D_X^{-1} beta

with band(beta) = (1/sqrt(n)) D_Z Z'(Y - X beta). The residual block has length m = n
in the verbatim encoding and m = K + 1 in the compressed one, where the block is
R_j (1, -beta) for the triangular factor R_j of (D_Z)_jj diag(z_j)[Y, X].

Counts:
    variables  = K + 1 + |I| (m + 1) + 2 L_b + 3 K [STIV]
    equalities = |I| (m + 1) + 2 L_b + 2 K [STIV]
"""
from dataclasses import dataclass, field
from functools import partial
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config.settings import settings
from src.stiv.cone_solver import (
    CertificateReport,
    ConeProgram,
    ProgramBuilder,
    Solution,
    SolverConfig,
    certify,
    failure_dump,
    solve_cone,
)
from src.stiv.data_model import (
    Dataset,
    DiagScale,
    PsiMatrix,
    col_mean,
    compute_dx,
    compute_dz,
    psi_values,
)
from src.stiv.exceptions import DimensionMismatch, SolverFailure, SpecInvalid
from src.utils.logging import kv, setup_logger
from src.utils.parallel import run_bounded

logger = setup_logger(__name__)

EstimatorKind = Literal["stiv", "stiv_r", "sqrt_lasso", "stiv_2s", "first_stage"]


class StivSpec(BaseModel):
    """Tuning of one STIV fit. c is None for STIV-R."""

    model_config = ConfigDict(frozen=True)

    c: Optional[float] = Field(None, gt=0, lt=1)
    r: float = Field(..., gt=0)
    I: Tuple[int, ...]
    dx_mode: Literal["rms", "maxabs"] = "rms"
    compress_cones: Optional[bool] = None
    zero_clip: float = Field(default_factory=lambda: settings.zero_clip, gt=0)

    @field_validator("I")
    @classmethod
    def _sorted_unique(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("I must contain at least the constant instrument")
        return tuple(sorted({int(v) for v in value}))


@dataclass(frozen=True)
class MomentSystem:
    """Instruments of the Dantzig band and the weight vectors of the cone constraints."""

    band_z: np.ndarray
    band_d: np.ndarray
    cone_w: np.ndarray
    cone_d: np.ndarray

    @classmethod
    def standard(cls, ds: Dataset, dz: DiagScale, I: Sequence[int]) -> "MomentSystem":
        idx = np.asarray(sorted(I), dtype=int)
        return cls(ds.z, dz.entries, ds.z[:, idx], dz.entries[idx])

    @property
    def n_band(self) -> int:
        return self.band_z.shape[1]

    @property
    def n_cones(self) -> int:
        return self.cone_w.shape[1]


class FitReport(BaseModel):
    """JSON view of a StivFit."""

    kind: str
    beta_hat: List[float]
    beta_sparse: List[float]
    sigma_hat: float
    support: List[int]
    objective: float
    c: Optional[float]
    r: float
    I: List[int]
    dx_mode: str
    band_excess: float
    cone_excess: float
    certificate: CertificateReport


@dataclass(frozen=True)
class StivFit:
    """Estimate (beta_hat, sigma_hat) with the program and certificate behind it."""

    beta_hat: np.ndarray
    sigma_hat: float
    spec: StivSpec
    solution: Solution
    support: Tuple[int, ...]
    objective: float
    dx: DiagScale
    dz: DiagScale
    psi: PsiMatrix
    x_rms: np.ndarray
    program: ConeProgram
    certificate: CertificateReport
    kind: EstimatorKind = "stiv"
    band_excess: float = 0.0
    cone_excess: float = 0.0

    @property
    def beta_sparse(self) -> np.ndarray:
        out = np.zeros_like(self.beta_hat)
        idx = list(self.support)
        out[idx] = self.beta_hat[idx]
        return out

    @property
    def K(self) -> int:
        return self.beta_hat.shape[0]

    def to_report(self) -> FitReport:
        return FitReport(
            kind=self.kind,
            beta_hat=self.beta_hat.tolist(),
            beta_sparse=self.beta_sparse.tolist(),
            sigma_hat=self.sigma_hat,
            support=[k + 1 for k in self.support],
            objective=self.objective,
            c=self.spec.c,
            r=self.spec.r,
            I=[l + 1 for l in self.spec.I],
            dx_mode=self.spec.dx_mode,
            band_excess=self.band_excess,
            cone_excess=self.cone_excess,
            certificate=self.certificate,
        )


def _residual_block(y: np.ndarray, x: np.ndarray, w: np.ndarray, d: float, compress: bool):
    """Coefficients (on beta) and right-hand side of v = d diag(w)(y - X beta)."""
    if compress:
        stacked = d * w[:, None] * np.column_stack([y, x])
        R = np.linalg.qr(stacked, mode="r")
        return R[:, 1:], R[:, 0]
    return d * w[:, None] * x, d * w * y


def use_compression(n: int, K: int, compress: Optional[bool]) -> bool:
    if compress is None:
        return n > K + 1
    return bool(compress) and n > K + 1


def assemble_program(
    y: np.ndarray,
    x: np.ndarray,
    dx: np.ndarray,
    moments: MomentSystem,
    r: float,
    c: Optional[float],
    compress: Optional[bool] = None,
) -> ConeProgram:
    """Build the STIV (c given) or STIV-R (c None) conic program for arbitrary moments."""
    n, K = x.shape
    if y.shape[0] != n or moments.band_z.shape[0] != n or moments.cone_w.shape[0] != n:
        raise DimensionMismatch("row counts of y, X and instruments differ")
    if dx.shape[0] != K:
        raise DimensionMismatch(f"D_X has {dx.shape[0]} entries, K={K}")
    if r <= 0:
        raise SpecInvalid("r must be positive")
    sqrt_n = np.sqrt(n)
    compress = use_compression(n, K, compress)

    pb = ProgramBuilder()
    pb.add_block("beta", K, "free")
    pb.add_block("t", 1, "free")
    for j in range(moments.n_cones):
        m = K + 1 if compress else n
        pb.add_block(f"cone{j}", m + 1, "soc")
    Lb = moments.n_band
    pb.add_block("pband", Lb, "nonneg")
    pb.add_block("mband", Lb, "nonneg")

    for j in range(moments.n_cones):
        coef, rhs = _residual_block(y, x, moments.cone_w[:, j], float(moments.cone_d[j]), compress)
        m = coef.shape[0]
        size = pb.size_of(f"cone{j}")
        head = np.zeros((1, size))
        head[0, 0] = 1.0
        pb.add_rows({f"cone{j}": head, "t": np.array([[-1.0]])}, 0.0)
        tail = np.hstack([np.zeros((m, 1)), np.eye(m)])
        pb.add_rows({f"cone{j}": tail, "beta": coef}, rhs)

    G = (moments.band_d[:, None] * (moments.band_z.T @ x)) / sqrt_n
    g0 = (moments.band_d * (moments.band_z.T @ y)) / sqrt_n
    r_col = np.full((Lb, 1), r)
    eye_b = np.eye(Lb)
    pb.add_rows({"beta": G, "t": r_col, "pband": -eye_b}, g0)
    pb.add_rows({"beta": -G, "t": r_col, "mband": -eye_b}, -g0)

    if c is None:
        pb.set_cost("t", 1.0 / sqrt_n)
    else:
        pb.add_block("w", K, "nonneg")
        pb.add_block("wplus", K, "nonneg")
        pb.add_block("wminus", K, "nonneg")
        dinv = np.diag(1.0 / dx)
        eye_k = np.eye(K)
        pb.add_rows({"beta": -dinv, "w": eye_k, "wplus": -eye_k}, 0.0)
        pb.add_rows({"beta": dinv, "w": eye_k, "wminus": -eye_k}, 0.0)
        pb.set_cost("w", 1.0)
        pb.set_cost("t", c / sqrt_n)
    return pb.build()


def assemble_stiv_program(ds: Dataset, spec: StivSpec, dz: Optional[DiagScale] = None) -> ConeProgram:
    _check_spec(ds, spec)
    dx = compute_dx(ds, spec.dx_mode)
    dz = dz or compute_dz(ds, spec.I)
    moments = MomentSystem.standard(ds, dz, spec.I)
    return assemble_program(ds.y, ds.x, dx.entries, moments, spec.r, spec.c, spec.compress_cones)


def _check_spec(ds: Dataset, spec: StivSpec) -> None:
    if ds.const_instr_idx not in spec.I:
        raise SpecInvalid(f"I must contain the constant instrument {ds.const_instr_idx}")
    if any(l < 0 or l >= ds.L for l in spec.I):
        raise SpecInvalid(f"I has indices outside 0..{ds.L - 1}")


def iv_constraint_violation(
    y: np.ndarray,
    x: np.ndarray,
    moments: MomentSystem,
    beta: np.ndarray,
    sigma: float,
    r: float,
) -> Tuple[float, float]:
    """Excess of (beta, sigma) over the band and the cone constraints (<= 0 when feasible)."""
    u = y - x @ beta
    n = y.shape[0]
    band = np.max(np.abs(moments.band_d * (moments.band_z.T @ u))) / n
    cone = np.max(moments.cone_d * np.sqrt(col_mean((moments.cone_w * u[:, None]) ** 2)))
    return float(band - sigma * r), float(cone - sigma)


def solve_moment_program(
    y: np.ndarray,
    x: np.ndarray,
    dx: DiagScale,
    dz: DiagScale,
    moments: MomentSystem,
    psi: PsiMatrix,
    spec: StivSpec,
    cfg: Optional[SolverConfig],
    kind: EstimatorKind,
) -> StivFit:
    """Assemble, solve and package one STIV-family fit."""
    cfg = cfg or SolverConfig()
    n, K = x.shape
    program = assemble_program(y, x, dx.entries, moments, spec.r, spec.c, spec.compress_cones)
    sol = solve_cone(program, cfg)
    if not sol.optimal:
        dump = failure_dump(program, cfg, f"{kind}_n{n}_K{K}")
        logger.error(kv(fit=kind, status=sol.status, iters=sol.iterations, dump=dump))
        raise SolverFailure(f"{kind} program not solved: {sol.status}", sol, dump, {"estimator": kind})

    beta = sol.primal[program.block("beta")].copy()
    t = float(sol.primal[program.block("t")][0])
    sigma = max(t, 0.0) / np.sqrt(n)
    x_rms = np.sqrt(col_mean(x ** 2))
    support = tuple(int(k) for k in np.where(np.abs(beta) * x_rms >= spec.zero_clip)[0])
    penalty = float(np.sum(np.abs(beta / dx.entries)))
    objective = sigma if spec.c is None else penalty + spec.c * sigma
    band_excess, cone_excess = iv_constraint_violation(y, x, moments, beta, sigma, spec.r)
    cert = certify(sol, program, cfg)
    if not cert.passed:
        logger.warning(kv(fit=kind, certificate="flagged", flags=",".join(cert.flags)))

    logger.info(kv(fit=kind, n=n, K=K, sigma=sigma, objective=objective, support=len(support),
                   iters=sol.iterations))
    return StivFit(
        beta_hat=beta,
        sigma_hat=sigma,
        spec=spec,
        solution=sol,
        support=support,
        objective=objective,
        dx=dx,
        dz=dz,
        psi=psi,
        x_rms=x_rms,
        program=program,
        certificate=cert,
        kind=kind,
        band_excess=band_excess,
        cone_excess=cone_excess,
    )


def fit_stiv(
    ds: Dataset,
    spec: StivSpec,
    cfg: Optional[SolverConfig] = None,
    dz: Optional[DiagScale] = None,
    kind: EstimatorKind = "stiv",
) -> StivFit:
    """STIV: minimize |D_X^{-1} beta|_1 + c sigma over the IV-constraint set."""
    if spec.c is None and kind != "stiv_r":
        raise SpecInvalid("STIV needs a tuning constant c")
    _check_spec(ds, spec)
    dx = compute_dx(ds, spec.dx_mode)
    dz = dz or compute_dz(ds, spec.I)
    if len(dz) != ds.L:
        raise DimensionMismatch(f"D_Z has {len(dz)} entries, L={ds.L}")
    moments = MomentSystem.standard(ds, dz, spec.I)
    psi = PsiMatrix(psi_values(ds.z, ds.x, dz.entries, dx.entries), dx, dz)
    return solve_moment_program(ds.y, ds.x, dx, dz, moments, psi, spec, cfg, kind)


def fit_stiv_r(ds: Dataset, spec: StivSpec, cfg: Optional[SolverConfig] = None) -> StivFit:
    """STIV-R: minimize sigma over the IV-constraint set (low-dimensional, no penalty)."""
    if ds.K >= ds.n:
        logger.warning(kv(fit="stiv_r", note="K >= n, estimator intended for K < n", K=ds.K, n=ds.n))
    return fit_stiv(ds, spec.model_copy(update={"c": None}), cfg, kind="stiv_r")


def fit_sqrt_lasso(ds: Dataset, spec: StivSpec, cfg: Optional[SolverConfig] = None) -> StivFit:
    """Exogenous special case: Z = X and D_Z = D_X."""
    if ds.z.shape != ds.x.shape or not np.array_equal(ds.z, ds.x):
        raise SpecInvalid("square-root Lasso needs the instrument matrix to equal the regressors")
    dx = compute_dx(ds, spec.dx_mode)
    dz = DiagScale(dx.entries, dx.mode)
    return fit_stiv(ds, spec, cfg, dz=dz, kind="sqrt_lasso")


def fit_stiv_grid(
    ds: Dataset,
    spec: StivSpec,
    c_grid: Sequence[float],
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> List[StivFit]:
    """Fits for every c of a grid, returned in grid order."""
    specs = [spec.model_copy(update={"c": float(c)}) for c in c_grid]
    for s in specs:
        StivSpec.model_validate(s.model_dump())
    return run_bounded([partial(fit_stiv, ds, s, cfg) for s in specs], max_workers)
