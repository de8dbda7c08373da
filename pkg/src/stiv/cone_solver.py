# src/stiv/cone_solver.py
"""Standard-form conic programs and a dense interior-point solver for them.

A ConeProgram reads

    minimize  c'x   subject to  A x = b,  x[slice] in K_slice

where every slice is free, nonnegative or a second-order cone {(t, v): t >= |v|_2}.
The solver maps it to the conic form  min c'x  s.t.  Gx + s = h, Ax = b, s in K
(G selects the constrained slices, h = 0) and runs a homogeneous self-dual
embedding with Nesterov-Todd scaling and a Mehrotra predictor-corrector.

Usage:
    builder = ProgramBuilder()
    builder.add_block("t", 1, "free")
    builder.add_rows({"t": [[1.0]]}, 1.0)
    program = builder.build()
    sol = solve_cone(program, SolverConfig())
    report = certify(sol, program)
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linprog

from src.config.settings import settings
from src.stiv.cones import (
    ConeDims,
    NTScaling,
    divide,
    identity,
    max_step,
    product,
    shift_interior,
)
from src.stiv.exceptions import DimensionMismatch, SpecInvalid
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)

ConeKind = Literal["free", "nonneg", "soc"]
STATUSES = ("optimal", "primal_infeasible", "dual_infeasible", "numerical_failure")


@dataclass(frozen=True)
class ConeSlice:
    start: int
    stop: int
    kind: str

    @property
    def size(self) -> int:
        return self.stop - self.start

    def as_slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class ConeProgram:
    """Linear objective, linear equalities and one cone membership per variable slice."""

    objective: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    cones: Tuple[ConeSlice, ...]
    blocks: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.objective, dtype=float).ravel()
        n = c.shape[0]
        A = np.array(self.eq_matrix, dtype=float).reshape(-1, n) if n else np.zeros((0, 0))
        b = np.array(self.eq_rhs, dtype=float).ravel()
        if A.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"{A.shape[0]} equality rows but {b.shape[0]} right-hand sides")
        for arr in (c, A, b):
            arr.setflags(write=False)
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "eq_matrix", A)
        object.__setattr__(self, "eq_rhs", b)

        cones = tuple(sorted(self.cones, key=lambda cs: cs.start))
        pos = 0
        for cs in cones:
            if cs.kind not in ("free", "nonneg", "soc"):
                raise SpecInvalid(f"unknown cone kind {cs.kind!r}")
            if cs.start != pos or cs.stop <= cs.start:
                raise SpecInvalid(f"cone slices must be disjoint and cover all variables (at {pos})")
            pos = cs.stop
        if pos != n:
            raise SpecInvalid(f"cone slices cover {pos} of {n} variables")
        object.__setattr__(self, "cones", cones)

    @property
    def n_vars(self) -> int:
        return self.objective.shape[0]

    @property
    def n_eq(self) -> int:
        return self.eq_rhs.shape[0]

    @property
    def soc_slices(self) -> List[ConeSlice]:
        return [cs for cs in self.cones if cs.kind == "soc"]

    @property
    def is_lp(self) -> bool:
        return not self.soc_slices

    def block(self, name: str) -> slice:
        return self.blocks[name]

    def free_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vars, dtype=bool)
        for cs in self.cones:
            if cs.kind == "free":
                mask[cs.as_slice()] = True
        return mask


class ProgramBuilder:
    """Incremental assembly of a ConeProgram from named variable blocks.

    Rows are given as {block name: coefficient matrix (rows x block size)}.
    """

    def __init__(self):
        self._blocks: Dict[str, slice] = {}
        self._kinds: List[ConeSlice] = []
        self._size = 0
        self._rows: List[Tuple[Dict[str, np.ndarray], np.ndarray]] = []
        self._cost: Dict[str, np.ndarray] = {}

    def add_block(self, name: str, size: int, kind: ConeKind) -> slice:
        if name in self._blocks:
            raise SpecInvalid(f"duplicate block {name!r}")
        if size < 1:
            raise SpecInvalid(f"block {name!r} must have positive size")
        blk = slice(self._size, self._size + size)
        self._blocks[name] = blk
        self._kinds.append(ConeSlice(blk.start, blk.stop, kind))
        self._size += size
        return blk

    def size_of(self, name: str) -> int:
        blk = self._blocks[name]
        return blk.stop - blk.start

    def set_cost(self, name: str, coeffs: Union[float, np.ndarray]) -> None:
        self._cost[name] = np.broadcast_to(np.asarray(coeffs, dtype=float), (self.size_of(name),)).copy()

    def add_rows(self, terms: Dict[str, np.ndarray], rhs: Union[float, np.ndarray]) -> None:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        mats = {}
        for name, coeffs in terms.items():
            mat = np.atleast_2d(np.asarray(coeffs, dtype=float))
            if mat.shape[1] != self.size_of(name):
                raise DimensionMismatch(f"row block for {name!r} has {mat.shape[1]} columns")
            mats[name] = mat
        n_rows = {m.shape[0] for m in mats.values()}
        if len(n_rows) != 1:
            raise DimensionMismatch("row blocks disagree on row count")
        (rows,) = n_rows
        if rhs.shape[0] == 1 and rows > 1:
            rhs = np.full(rows, rhs[0])
        if rhs.shape[0] != rows:
            raise DimensionMismatch("right-hand side length differs from row count")
        self._rows.append((mats, rhs))

    def build(self) -> ConeProgram:
        n = self._size
        c = np.zeros(n)
        for name, coeffs in self._cost.items():
            c[self._blocks[name]] = coeffs
        total = sum(rhs.shape[0] for _, rhs in self._rows)
        A = np.zeros((total, n))
        b = np.zeros(total)
        r = 0
        for mats, rhs in self._rows:
            rows = rhs.shape[0]
            for name, mat in mats.items():
                A[r: r + rows, self._blocks[name]] += mat
            b[r: r + rows] = rhs
            r += rows
        return ConeProgram(c, A, b, tuple(self._kinds), dict(self._blocks))


class SolverConfig(BaseModel):
    """Tolerances and switches of the interior-point solver."""

    model_config = ConfigDict(frozen=True)

    gap_tol: float = Field(1e-8, gt=0)
    feas_tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(200, ge=1)
    infeas_tol: float = Field(1e-8, gt=0)
    step_fraction: float = Field(0.99, gt=0, lt=1)
    polish: bool = True
    lp_backend: Literal["native", "highs"] = Field(default_factory=lambda: settings.lp_backend)
    dump_dir: Optional[str] = Field(default_factory=lambda: settings.dump_dir)


@dataclass
class Solution:
    """Solver output. dual holds the equality multipliers y with c - A'y in the dual cone."""

    status: str
    primal: np.ndarray
    dual: np.ndarray
    objective: float
    gap: float
    residuals: Dict[str, float]
    iterations: int
    dual_slack: Optional[np.ndarray] = None
    ray: Optional[np.ndarray] = None
    backend: str = "native"

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class CertificateReport(BaseModel):
    """Residuals recomputed from scratch for a (Solution, ConeProgram) pair."""

    status: str
    primal_residual: float
    dual_residual: float
    primal_cone_violation: float
    dual_cone_violation: float
    gap: float
    feas_threshold: float
    gap_threshold: float
    passed: bool
    flags: List[str] = Field(default_factory=list)


def _cone_layout(p: ConeProgram) -> Tuple[np.ndarray, ConeDims]:
    """Indices of constrained variables (orthant first, then each cone) and their dims."""
    nonneg = [np.arange(cs.start, cs.stop) for cs in p.cones if cs.kind == "nonneg"]
    socs = [cs for cs in p.cones if cs.kind == "soc"]
    parts = nonneg + [np.arange(cs.start, cs.stop) for cs in socs]
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=int)
    dims = ConeDims(sum(len(a) for a in nonneg), tuple(cs.size for cs in socs))
    return idx.astype(int), dims


def cone_violation(v: np.ndarray, p: ConeProgram) -> float:
    """Largest distance-like violation of v against the cones of p (free slices ignored)."""
    worst = 0.0
    for cs in p.cones:
        part = v[cs.as_slice()]
        if cs.kind == "nonneg":
            worst = max(worst, float(np.max(np.maximum(-part, 0.0))))
        elif cs.kind == "soc":
            worst = max(worst, float(max(np.linalg.norm(part[1:]) - part[0], 0.0)))
    return worst


class _HsdeWorkspace:
    """Per-solve state of the homogeneous self-dual interior-point method."""

    def __init__(self, c: np.ndarray, A: np.ndarray, b: np.ndarray, idx: np.ndarray,
                 dims: ConeDims, cfg: SolverConfig):
        self.c, self.A, self.b = c, A, b
        self.idx, self.dims, self.cfg = idx, dims, cfg
        self.N, self.m = c.shape[0], A.shape[0]
        self.scaling: Optional[NTScaling] = None
        self._lu = None
        self._M = None

    # G = -E where E picks the constrained entries
    def _Et(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.N)
        np.add.at(out, self.idx, v)
        return out

    def _winv2(self, v: np.ndarray) -> np.ndarray:
        if self.scaling is None:
            return v.copy()
        return self.scaling.apply_inv(self.scaling.apply_inv(v))

    def factor(self, scaling: Optional[NTScaling]) -> None:
        self.scaling = scaling
        N, m = self.N, self.m
        H = np.zeros((N, N))
        k = self.dims.nonneg
        if scaling is None:
            H[self.idx, self.idx] = 1.0
        else:
            lidx = self.idx[:k]
            H[lidx, lidx] = scaling.inv_square_orthant()
            for blk, mat in scaling.inv_square_blocks():
                cols = self.idx[blk]
                H[np.ix_(cols, cols)] += mat
        M = np.zeros((N + m, N + m))
        M[:N, :N] = H
        M[:N, N:] = self.A.T
        M[N:, :N] = self.A
        delta = 1e-11 * max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
        M_reg = M.copy()
        M_reg[np.arange(N), np.arange(N)] += delta
        M_reg[np.arange(N, N + m), np.arange(N, N + m)] -= delta
        self._M = M
        self._lu = scipy.linalg.lu_factor(M_reg, check_finite=True)

    def solve(self, bx: np.ndarray, by: np.ndarray, bz: np.ndarray):
        """Solve [0 A' G'; A 0 0; G 0 -W'W][x; y; z] = [bx; by; bz]."""
        N = self.N
        rhs = np.concatenate([bx - self._Et(self._winv2(bz)), by])
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        for _ in range(3):
            res = rhs - self._M @ sol
            if np.linalg.norm(res, np.inf) <= 1e-14 * max(1.0, np.linalg.norm(rhs, np.inf)):
                break
            sol = sol + scipy.linalg.lu_solve(self._lu, res)
        x, y = sol[:N], sol[N:]
        z = self._winv2(-x[self.idx] - bz)
        return x, y, z

    def run(self) -> Solution:
        c, A, b, idx, dims, cfg = self.c, self.A, self.b, self.idx, self.dims, self.cfg
        N, m = self.N, self.m
        deg = dims.degree
        e = identity(dims)
        resx0 = max(1.0, float(np.linalg.norm(c)))
        resy0 = max(1.0, float(np.linalg.norm(b)))
        resz0 = 1.0

        self.factor(None)
        x, _, zt = self.solve(np.zeros(N), b, np.zeros(len(idx)))
        s = -zt
        _, y, z = self.solve(-c, np.zeros(m), np.zeros(len(idx)))
        s = shift_interior(s, dims) if len(idx) else s
        z = shift_interior(z, dims) if len(idx) else z
        tau, kappa = 1.0, 1.0

        residuals: Dict[str, float] = {}
        for it in range(cfg.max_iter + 1):
            Ex = x[idx]
            rx = A.T @ y - self._Et(z) + c * tau
            ry = -A @ x + b * tau
            rz = s - Ex
            cx, by = float(c @ x), float(b @ y)
            rt = kappa + cx + by
            sz = float(s @ z)
            mu = (sz + tau * kappa) / (deg + 1)

            pcost, dcost = cx / tau, -by / tau
            pres = max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0) / tau
            dres = np.linalg.norm(rx) / resx0 / tau
            gap = sz / tau ** 2 / max(1.0, abs(pcost))
            residuals = {"primal": float(pres), "dual": float(dres), "gap": float(gap),
                         "pcost": pcost, "dcost": dcost}
            logger.debug(kv(iter=it, pcost=pcost, dcost=dcost, pres=pres, dres=dres, gap=gap,
                            tau=tau, kappa=kappa))

            if pres <= cfg.feas_tol and dres <= cfg.feas_tol and gap <= cfg.gap_tol:
                primal, dual = x / tau, -y / tau
                return Solution("optimal", primal, dual, float(c @ primal), float(gap),
                                residuals, it, dual_slack=c - A.T @ dual)

            if by < 0:
                pinf = np.linalg.norm(A.T @ y - self._Et(z)) / resx0 / (-by)
                if pinf <= cfg.infeas_tol:
                    residuals["pinfres"] = float(pinf)
                    return Solution("primal_infeasible", x / tau, -y / (-by), np.nan, np.inf,
                                    residuals, it, ray=np.concatenate([y, z]) / (-by))
            if cx < 0:
                dinf = max(np.linalg.norm(A @ x) / resy0, np.linalg.norm(s - Ex) / resz0) / (-cx)
                if dinf <= cfg.infeas_tol:
                    residuals["dinfres"] = float(dinf)
                    return Solution("dual_infeasible", x / (-cx), np.zeros(m), -np.inf, np.inf,
                                    residuals, it, ray=x / (-cx))
            if it == cfg.max_iter:
                break

            W = NTScaling(s, z, dims)
            lam = W.lam
            self.factor(W)
            x1, y1, z1 = self.solve(-c, b, np.zeros(len(idx)))
            denom = float(c @ x1 + b @ y1) - kappa / tau

            def newton(sigma: float, rc: np.ndarray, rk: float):
                dvec = divide(rc, lam, dims)
                x2, y2, z2 = self.solve(-(1 - sigma) * rx, (1 - sigma) * ry,
                                        -(1 - sigma) * rz - W.apply(dvec))
                dtau = (-(1 - sigma) * rt - rk / tau - c @ x2 - b @ y2) / denom
                dx, dy, dz = dtau * x1 + x2, dtau * y1 + y2, dtau * z1 + z2
                ds = W.apply(dvec - W.apply(dz))
                dkappa = (rk - kappa * dtau) / tau
                return dx, dy, dz, ds, float(dtau), float(dkappa)

            def longest(ds, dz, dtau, dkappa) -> float:
                alpha = min(max_step(s, ds, dims), max_step(z, dz, dims))
                if dtau < 0:
                    alpha = min(alpha, -tau / dtau)
                if dkappa < 0:
                    alpha = min(alpha, -kappa / dkappa)
                return alpha

            # Predictor
            dx, dy, dz, ds, dtau, dkappa = newton(0.0, -product(lam, lam, dims), -tau * kappa)
            alpha_aff = min(1.0, longest(ds, dz, dtau, dkappa))
            sigma = (1.0 - alpha_aff) ** 3

            # Corrector
            corr = product(W.apply_inv(ds), W.apply(dz), dims)
            rc = sigma * mu * e - product(lam, lam, dims) - corr
            rk = sigma * mu - tau * kappa - dtau * dkappa
            dx, dy, dz, ds, dtau, dkappa = newton(sigma, rc, rk)
            alpha = min(1.0, cfg.step_fraction * longest(ds, dz, dtau, dkappa))

            x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
            tau, kappa = tau + alpha * dtau, kappa + alpha * dkappa
            if not (np.all(np.isfinite(x)) and np.isfinite(tau) and tau > 0 and kappa > 0):
                break

        residuals["tau"] = float(tau)
        return Solution("numerical_failure", x / max(tau, 1e-300), -y / max(tau, 1e-300), np.nan,
                        np.inf, residuals, cfg.max_iter)


def _presolve(p: ConeProgram, cfg: SolverConfig):
    """Drop empty equality rows; a nonzero right-hand side on one is infeasible."""
    A, b = p.eq_matrix, p.eq_rhs
    empty = ~np.any(A != 0.0, axis=1) if A.size else np.zeros(b.shape[0], dtype=bool)
    bad = empty & (np.abs(b) > cfg.feas_tol * max(1.0, float(np.max(np.abs(b), initial=0.0))))
    return ~empty, bool(np.any(bad))


def solve_cone(p: ConeProgram, cfg: Optional[SolverConfig] = None) -> Solution:
    """Solve a ConeProgram with the homogeneous self-dual interior-point method."""
    cfg = cfg or SolverConfig()
    keep, infeasible = _presolve(p, cfg)
    m = p.n_eq
    if infeasible:
        logger.info(kv(solve="presolve", status="primal_infeasible"))
        return Solution("primal_infeasible", np.zeros(p.n_vars), np.zeros(m), np.nan, np.inf,
                        {"primal": np.inf, "dual": np.nan}, 0)

    idx, dims = _cone_layout(p)
    ws = _HsdeWorkspace(p.objective, p.eq_matrix[keep], p.eq_rhs[keep], idx, dims, cfg)
    try:
        sol = ws.run()
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        logger.warning(kv(solve="native", status="numerical_failure", error=type(exc).__name__))
        sol = Solution("numerical_failure", np.zeros(p.n_vars), np.zeros(int(keep.sum())), np.nan,
                       np.inf, {"error": np.nan}, 0)

    dual = np.zeros(m)
    dual[keep] = sol.dual
    sol.dual = dual
    if sol.status == "optimal":
        sol.dual_slack = p.objective - p.eq_matrix.T @ dual
    logger.debug(kv(solve="native", status=sol.status, iters=sol.iterations, gap=sol.gap,
                    n=p.n_vars, m=m))
    return sol


def _polish(p: ConeProgram, sol: Solution, cfg: SolverConfig) -> Optional[Solution]:
    """Snap an interior LP optimum to a basic solution when that basis is optimal."""
    A, b, c = p.eq_matrix, p.eq_rhs, p.objective
    keep, _ = _presolve(p, cfg)
    A, b = A[keep], b[keep]
    m = A.shape[0]
    free = p.free_mask()
    free_idx = np.where(free)[0]
    nonneg_idx = np.where(~free)[0]
    if m == 0 or len(free_idx) > m:
        return None

    x = sol.primal
    slack = np.maximum(sol.dual_slack if sol.dual_slack is not None else 0.0, 0.0)
    score = x[nonneg_idx] / (x[nonneg_idx] + slack[nonneg_idx] + 1e-300)
    order = nonneg_idx[np.argsort(-score, kind="stable")]
    basis = np.concatenate([free_idx, order[: m - len(free_idx)]]).astype(int)
    AB = A[:, basis]
    if np.linalg.cond(AB) > 1e12:
        return None
    lu = scipy.linalg.lu_factor(AB)
    xB = scipy.linalg.lu_solve(lu, b)
    y = scipy.linalg.lu_solve(lu, c[basis], trans=1)

    scale_b = max(1.0, float(np.max(np.abs(b))))
    scale_c = max(1.0, float(np.max(np.abs(c))))
    tol = 10.0 * cfg.feas_tol
    if np.any(xB[len(free_idx):] < -tol * scale_b):
        return None
    reduced = c - A.T @ y
    if np.any(reduced[nonneg_idx] < -tol * scale_c):
        return None

    xn = np.zeros(p.n_vars)
    xn[basis] = xB
    xn[nonneg_idx] = np.maximum(xn[nonneg_idx], 0.0)
    obj = float(c @ xn)
    if obj > sol.objective + 10.0 * cfg.gap_tol * max(1.0, abs(obj)):
        return None

    dual = np.zeros(p.n_eq)
    dual[keep] = y
    residuals = {
        "primal": float(np.linalg.norm(A @ xn - b) / max(1.0, np.linalg.norm(b))),
        "dual": float(np.linalg.norm(reduced[free_idx]) / max(1.0, np.linalg.norm(c))) if len(free_idx) else 0.0,
        "gap": abs(obj - float(b @ y)) / max(1.0, abs(obj)),
    }
    return Solution("optimal", xn, dual, obj, residuals["gap"], residuals, sol.iterations,
                    dual_slack=c - p.eq_matrix.T @ dual, backend="native+polish")


def _solve_highs(p: ConeProgram, cfg: SolverConfig) -> Solution:
    free = p.free_mask()
    bounds = [(None, None) if f else (0.0, None) for f in free]
    has_eq = p.n_eq > 0
    res = linprog(
        p.objective,
        A_eq=p.eq_matrix if has_eq else None,
        b_eq=p.eq_rhs if has_eq else None,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": cfg.feas_tol,
                 "dual_feasibility_tolerance": cfg.feas_tol},
    )
    status = {0: "optimal", 2: "primal_infeasible", 3: "dual_infeasible"}.get(res.status, "numerical_failure")
    if status != "optimal":
        return Solution(status, np.zeros(p.n_vars), np.zeros(p.n_eq), np.nan, np.inf,
                        {"highs_status": float(res.status)}, int(getattr(res, "nit", 0)), backend="highs")
    x = np.asarray(res.x, dtype=float)
    y = np.asarray(res.eqlin.marginals, dtype=float) if has_eq else np.zeros(0)
    obj = float(p.objective @ x)
    gap = abs(obj - float(p.eq_rhs @ y)) / max(1.0, abs(obj))
    residuals = {
        "primal": float(np.linalg.norm(p.eq_matrix @ x - p.eq_rhs) / max(1.0, np.linalg.norm(p.eq_rhs))),
        "dual": 0.0,
        "gap": gap,
    }
    return Solution(status, x, y, obj, gap, residuals, int(res.nit),
                    dual_slack=p.objective - p.eq_matrix.T @ y, backend="highs")


def solve_lp(p: ConeProgram, cfg: Optional[SolverConfig] = None) -> Solution:
    """Solve a program with only free and nonnegative slices."""
    cfg = cfg or SolverConfig()
    if not p.is_lp:
        raise SpecInvalid("solve_lp called on a program with second-order cones")
    if cfg.lp_backend == "highs":
        return _solve_highs(p, cfg)
    sol = solve_cone(p, cfg)
    if sol.optimal and cfg.polish:
        polished = _polish(p, sol, cfg)
        if polished is not None:
            return polished
    return sol


def certify(sol: Solution, p: ConeProgram, cfg: Optional[SolverConfig] = None) -> CertificateReport:
    """Recompute feasibility, cone membership and gap of sol for p."""
    cfg = cfg or SolverConfig()
    A, b, c = p.eq_matrix, p.eq_rhs, p.objective
    x = np.asarray(sol.primal, dtype=float)
    y = np.asarray(sol.dual, dtype=float)
    scale_b = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    scale_c = max(1.0, float(np.max(np.abs(c), initial=0.0)))
    scale_x = max(1.0, float(np.max(np.abs(x), initial=0.0)))

    primal_res = float(np.max(np.abs(A @ x - b), initial=0.0)) / scale_b
    slack = c - A.T @ y
    free = p.free_mask()
    dual_res = float(np.max(np.abs(slack[free]), initial=0.0)) / scale_c
    primal_cone = cone_violation(x, p) / scale_x
    dual_cone = cone_violation(slack, p) / scale_c
    pobj, dobj = float(c @ x), float(b @ y)
    gap = abs(pobj - dobj) / max(1.0, abs(pobj))

    feas_thr = 10.0 * cfg.feas_tol
    gap_thr = 10.0 * cfg.gap_tol
    flags = []
    if sol.status != "optimal":
        flags.append(f"status={sol.status}")
    if primal_res > feas_thr:
        flags.append("primal_residual")
    if dual_res > feas_thr:
        flags.append("dual_residual")
    if primal_cone > feas_thr:
        flags.append("primal_cone")
    if dual_cone > feas_thr:
        flags.append("dual_cone")
    if gap > gap_thr:
        flags.append("gap")
    return CertificateReport(
        status=sol.status,
        primal_residual=primal_res,
        dual_residual=dual_res,
        primal_cone_violation=primal_cone,
        dual_cone_violation=dual_cone,
        gap=gap,
        feas_threshold=feas_thr,
        gap_threshold=gap_thr,
        passed=not flags,
        flags=flags,
    )


def dump_program(p: ConeProgram, path: Union[str, Path]) -> Path:
    """Write p in the plain-text standard-form layout.

    objective <n> c_1 ... c_n
    eq <row> <b_row> a_row,1 ... a_row,n
    cone <kind> <start> <stop>
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"objective {p.n_vars} " + " ".join(repr(float(v)) for v in p.objective) + "\n")
        for i in range(p.n_eq):
            fh.write(f"eq {i} {float(p.eq_rhs[i])!r} " + " ".join(repr(float(v)) for v in p.eq_matrix[i]) + "\n")
        for cs in p.cones:
            fh.write(f"cone {cs.kind} {cs.start} {cs.stop}\n")
    return path


def load_program(path: Union[str, Path]) -> ConeProgram:
    c, rows, rhs, cones = None, [], [], []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "objective":
                c = np.array([float(v) for v in parts[2:]])
            elif tag == "eq":
                rhs.append(float(parts[2]))
                rows.append([float(v) for v in parts[3:]])
            elif tag == "cone":
                cones.append(ConeSlice(int(parts[2]), int(parts[3]), parts[1]))
            else:
                raise SpecInvalid(f"{path}:{lineno}: unknown record {tag!r}")
    if c is None:
        raise SpecInvalid(f"{path}: missing objective line")
    A = np.array(rows, dtype=float).reshape(len(rows), c.shape[0])
    return ConeProgram(c, A, np.array(rhs), tuple(cones))


def failure_dump(p: ConeProgram, cfg: SolverConfig, stem: str) -> Optional[str]:
    """Dump a failed program when a dump directory is configured."""
    if not cfg.dump_dir:
        return None
    path = dump_program(p, Path(cfg.dump_dir) / f"{stem}.cone")
    return str(path)
