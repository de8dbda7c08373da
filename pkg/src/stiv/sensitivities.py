# src/stiv/sensitivities.py
"""Data-driven lower bounds on the sensitivities of a Psi matrix.

Every bound is the minimum over a battery of small linear programs of the form

    minimize v  s.t.  -v <= Psi Delta <= v,  Delta in some polyhedron,

where the polyhedron fixes signs of some coordinates, fixes Delta_k = 1 or normalizes
a block, and caps the l1 mass of the remaining coordinates. The batteries run through
utils.parallel and are reduced with min, so the result does not depend on scheduling.
"""
import hashlib
import itertools
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config.settings import settings
from src.stiv.cone_solver import ProgramBuilder, SolverConfig, failure_dump, solve_lp
from src.stiv.data_model import PsiMatrix
from src.stiv.exceptions import BlockTooLarge, InvalidParams, SolverFailure
from src.utils.logging import kv, setup_logger
from src.utils.parallel import run_bounded

logger = setup_logger(__name__)

ZERO_FLOOR = 1e-10
PsiLike = Union[PsiMatrix, np.ndarray]
ConeName = Literal["standard", "enlarged"]


class ConeFactor(BaseModel):
    """Cone constant of C_J (standard) or of the enlarged cone, with the certificate coefficient a."""

    model_config = ConfigDict(frozen=True)

    c: float = Field(..., ge=0, lt=1)
    s: int = Field(..., ge=1)
    cone: ConeName = "standard"

    @property
    def ratio(self) -> float:
        if self.cone == "enlarged":
            return (2.0 + self.c) / (1.0 - self.c)
        return (1.0 + self.c) / (1.0 - self.c)

    @property
    def a(self) -> float:
        return (1.0 + self.ratio) * self.s

    @classmethod
    def standard(cls, c: float, s: int) -> "ConeFactor":
        return cls(c=c, s=s, cone="standard")

    @classmethod
    def enlarged(cls, c: float, s: int) -> "ConeFactor":
        return cls(c=c, s=s, cone="enlarged")


class BlockBound(BaseModel):
    J0: List[int]
    value: float
    method: str


class ExactBound(BaseModel):
    k: int
    J: List[int]
    value: float


class LpTrace(BaseModel):
    battery: str
    k: Optional[int]
    j: Optional[int]
    signs: List[int]
    status: str
    value: float


class SensitivityReport(BaseModel):
    """kappa*_k(s), kappa_1(s) and optional block and exact bounds for one Psi and cone factor."""

    s: int
    c: float
    cone: ConeName
    ratio: float
    a: float
    psi_fingerprint: str
    kappa_coord: List[float]
    kappa1: float
    blocks: List[BlockBound] = Field(default_factory=list)
    exact: List[ExactBound] = Field(default_factory=list)
    methods: List[str] = Field(default_factory=list)
    trace: Optional[List[LpTrace]] = None

    def kappa_star(self, k: int) -> float:
        return self.kappa_coord[k]

    def block_value(self, J0: Iterable[int]) -> Optional[float]:
        key = sorted(int(j) for j in J0)
        for b in self.blocks:
            if b.J0 == key:
                return b.value
        return None

    def exact_value(self, k: int, J: Iterable[int]) -> Optional[float]:
        key = sorted(int(j) for j in J)
        for e in self.exact:
            if e.k == k and e.J == key:
                return e.value
        return None


class CoherenceBound(BaseModel):
    eta1: float
    eta2: float
    p: float
    bound: float
    rows: Dict[int, int]


def psi_array(psi: PsiLike) -> np.ndarray:
    return np.asarray(psi.values if isinstance(psi, PsiMatrix) else psi, dtype=float)


def fingerprint(psi: PsiLike) -> str:
    arr = np.ascontiguousarray(psi_array(psi))
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SensitivityLp:
    """One LP of a battery.

    fixed:      coordinate held at Delta_k = 1 (or None)
    signed:     coordinate -> sign; d_j = sign * Delta_j >= 0
    capped:     coordinates with |Delta_i| <= w_i, w entering the budget
    loose:      unconstrained coordinates
    budget:     (coefficient per signed coordinate, const): sum w + const <= sum coef_j d_j
    normalize:  signed coordinates whose d sum to one
    """

    fixed: Optional[int]
    signed: Tuple[Tuple[int, int], ...]
    capped: Tuple[int, ...]
    loose: Tuple[int, ...] = ()
    budget: Optional[Tuple[Tuple[float, ...], float]] = None
    normalize: Tuple[int, ...] = ()
    label: Dict[str, object] = field(default_factory=dict)

    def build(self, psi: np.ndarray):
        L, K = psi.shape
        pb = ProgramBuilder()
        pb.add_block("v", 1, "nonneg")
        signed_idx = [j for j, _ in self.signed]
        signs = np.array([e for _, e in self.signed], dtype=float)
        movable = list(self.capped) + list(self.loose)
        if signed_idx:
            pb.add_block("d", len(signed_idx), "nonneg")
        if movable:
            pb.add_block("delta", len(movable), "free")
        if self.capped:
            pb.add_block("w", len(self.capped), "nonneg")
            pb.add_block("wplus", len(self.capped), "nonneg")
            pb.add_block("wminus", len(self.capped), "nonneg")
        pb.add_block("splus", L, "nonneg")
        pb.add_block("sminus", L, "nonneg")
        if self.budget is not None:
            pb.add_block("slack", 1, "nonneg")

        base = psi[:, self.fixed] if self.fixed is not None else np.zeros(L)
        ones = np.ones((L, 1))
        eye_l = np.eye(L)
        upper = {"v": ones, "splus": -eye_l}
        lower = {"v": ones, "sminus": -eye_l}
        if signed_idx:
            ps = psi[:, signed_idx] * signs[None, :]
            upper["d"], lower["d"] = -ps, ps
        if movable:
            pm = psi[:, movable]
            upper["delta"], lower["delta"] = -pm, pm
        # v - Psi Delta >= 0 and v + Psi Delta >= 0 with the fixed column moved right
        pb.add_rows(upper, base)
        pb.add_rows(lower, -base)

        if self.capped:
            nc = len(self.capped)
            sel = np.zeros((nc, len(movable)))
            sel[np.arange(nc), np.arange(nc)] = 1.0
            eye_c = np.eye(nc)
            pb.add_rows({"w": eye_c, "delta": -sel, "wplus": -eye_c}, 0.0)
            pb.add_rows({"w": eye_c, "delta": sel, "wminus": -eye_c}, 0.0)

        if self.budget is not None:
            coef, const = self.budget
            terms = {"slack": np.array([[-1.0]])}
            if signed_idx:
                terms["d"] = np.asarray(coef, dtype=float).reshape(1, -1)
            if self.capped:
                terms["w"] = -np.ones((1, len(self.capped)))
            pb.add_rows(terms, const)

        if self.normalize:
            pos = {j: i for i, j in enumerate(signed_idx)}
            row = np.zeros((1, len(signed_idx)))
            for j in self.normalize:
                row[0, pos[j]] = 1.0
            pb.add_rows({"d": row}, 1.0)

        pb.set_cost("v", 1.0)
        return pb.build()


def _run_lp(psi: np.ndarray, lp: SensitivityLp, cfg: SolverConfig) -> Tuple[str, float]:
    program = lp.build(psi)
    sol = solve_lp(program, cfg)
    if sol.status == "optimal":
        value = max(float(sol.objective), 0.0)
        return sol.status, (0.0 if value < ZERO_FLOOR else value)
    if sol.status == "primal_infeasible":
        return sol.status, np.inf
    dump = failure_dump(program, cfg, "sensitivity_" + "_".join(f"{k}{v}" for k, v in lp.label.items()))
    logger.error(kv(battery="lp", status=sol.status, dump=dump, **lp.label))
    raise SolverFailure(f"sensitivity LP not solved: {sol.status}", sol, dump, dict(lp.label))


def _run_battery(
    psi: np.ndarray,
    lps: Sequence[SensitivityLp],
    cfg: Optional[SolverConfig],
    max_workers: Optional[int],
) -> List[Tuple[str, float]]:
    cfg = cfg or SolverConfig()
    return run_bounded([partial(_run_lp, psi, lp, cfg) for lp in lps], max_workers)


def _guard(size: int) -> None:
    if size > settings.block_limit:
        raise BlockTooLarge(size, settings.block_limit)


def certificate_lps(K: int, k: int, a: float) -> List[SensitivityLp]:
    """The 2K programs whose minimum is kappa*_k(s) for certificate coefficient a."""
    lps = []
    for j in range(K):
        for eps in (1, -1):
            if j == k:
                if eps == -1:
                    continue  # Delta_k = 1 contradicts a negative sign
                capped = tuple(i for i in range(K) if i != k)
                lps.append(SensitivityLp(k, (), capped, budget=((), 1.0 - a),
                                         label={"k": k, "j": j, "eps": eps}))
            else:
                capped = tuple(i for i in range(K) if i not in (j, k))
                lps.append(SensitivityLp(k, ((j, eps),), capped, budget=((a - 1.0,), 1.0),
                                         label={"k": k, "j": j, "eps": eps}))
    return lps


def exact_lps(K: int, k: int, J: Sequence[int], ratio: float) -> List[SensitivityLp]:
    """Sign-pattern programs whose minimum is kappa*_{k,J}."""
    J = sorted(set(J))
    others = [j for j in J if j != k]
    capped = tuple(i for i in range(K) if i not in J and i != k)
    const = -ratio if k in J else 1.0
    lps = []
    for signs in itertools.product((1, -1), repeat=len(others)):
        signed = tuple(zip(others, signs))
        lps.append(SensitivityLp(k, signed, capped, budget=(tuple([ratio] * len(others)), const),
                                 label={"k": k, "J": "-".join(map(str, J)), "signs": "".join("+" if e > 0 else "-" for e in signs)}))
    return lps


def block_lps(K: int, J0: Sequence[int], a: float) -> List[SensitivityLp]:
    """Programs whose minimum is the block bound kappa_{1,J0}(s)."""
    J0 = sorted(set(J0))
    lps = []
    # Delta and -Delta give the same value: fix the sign of the first block coordinate
    for tail in itertools.product((1, -1), repeat=len(J0) - 1):
        signs = (1,) + tail
        for j in range(K):
            if j in J0:
                signed = tuple(zip(J0, signs))
                coef = tuple(a if i == j else 0.0 for i in J0)
                capped = tuple(i for i in range(K) if i not in J0)
                lps.append(SensitivityLp(None, signed, capped, budget=(coef, 1.0), normalize=tuple(J0),
                                         label={"J0": "-".join(map(str, J0)), "j": j}))
            else:
                for eps in (1, -1):
                    signed = tuple(zip(J0, signs)) + ((j, eps),)
                    coef = tuple([0.0] * len(J0)) + (a - 1.0,)
                    capped = tuple(i for i in range(K) if i not in J0 and i != j)
                    lps.append(SensitivityLp(None, signed, capped, budget=(coef, 1.0), normalize=tuple(J0),
                                             label={"J0": "-".join(map(str, J0)), "j": j, "eps": eps}))
    return lps


def _check_s(s: int, K: int) -> None:
    if not 1 <= s <= K:
        raise InvalidParams(f"sparsity certificate s={s} must lie in 1..{K}")


def kappa_coord_cert(
    psi: PsiLike,
    k: int,
    s: int,
    cf: ConeFactor,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> float:
    """kappa*_k(s): lower bound on the coordinate-wise sensitivity of coordinate k."""
    arr = psi_array(psi)
    K = arr.shape[1]
    _check_s(s, K)
    results = _run_battery(arr, certificate_lps(K, k, cf.a), cfg, max_workers)
    return min(v for _, v in results)


def kappa_coord_cert_all(
    psi: PsiLike,
    s: int,
    cf: ConeFactor,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
    trace: Optional[List[LpTrace]] = None,
) -> np.ndarray:
    """kappa*_k(s) for every k in one battery of about 2K^2 programs."""
    arr = psi_array(psi)
    K = arr.shape[1]
    _check_s(s, K)
    lps, owner = [], []
    for k in range(K):
        batch = certificate_lps(K, k, cf.a)
        lps.extend(batch)
        owner.extend([k] * len(batch))
    results = _run_battery(arr, lps, cfg, max_workers)
    out = np.full(K, np.inf)
    for k, lp, (status, value) in zip(owner, lps, results):
        out[k] = min(out[k], value)
        if trace is not None:
            trace.append(LpTrace(battery="certif", k=k, j=int(lp.label["j"]), signs=[int(lp.label["eps"])],
                                 status=status, value=value))
    logger.info(kv(battery="certif", K=K, lps=len(lps), s=s, cone=cf.cone, min_kappa=float(np.min(out))))
    return out


def kappa1_cert(
    psi: PsiLike,
    s: int,
    c: float,
    cf: Optional[ConeFactor] = None,
    kappa_coord: Optional[np.ndarray] = None,
    cfg: Optional[SolverConfig] = None,
) -> float:
    """kappa_1(s) = min_k kappa*_k(s) / a, i.e. (1-c)/(2s) min_k kappa*_k(s) on C_J."""
    cf = cf or ConeFactor.standard(c, s)
    if kappa_coord is None:
        kappa_coord = kappa_coord_cert_all(psi, s, cf, cfg)
    return float(np.min(kappa_coord)) / cf.a


def kappa_block_cert(
    psi: PsiLike,
    J0: Sequence[int],
    s: int,
    c: float,
    cf: Optional[ConeFactor] = None,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> float:
    """kappa_{1,J0}(s): block bound from programs normalized by |Delta_J0|_1 = 1."""
    arr = psi_array(psi)
    K = arr.shape[1]
    _check_s(s, K)
    J0 = sorted(set(int(j) for j in J0))
    if not J0:
        return np.inf
    _guard(len(J0))
    cf = cf or ConeFactor.standard(c, s)
    results = _run_battery(arr, block_lps(K, J0, cf.a), cfg, max_workers)
    return min(v for _, v in results)


def kappa_coord_exact(
    psi: PsiLike,
    k: int,
    J: Sequence[int],
    cf: ConeFactor,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> float:
    """kappa*_{k,J}: coordinate-wise sensitivity on the cone of dominant coordinates of J."""
    arr = psi_array(psi)
    J = sorted(set(int(j) for j in J))
    if not J:
        return np.inf  # the cone over the empty set is {0}
    _guard(len(J))
    results = _run_battery(arr, exact_lps(arr.shape[1], k, J, cf.ratio), cfg, max_workers)
    return min(v for _, v in results)


def kappa_exact_all(
    psi: PsiLike,
    J: Sequence[int],
    cf: ConeFactor,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> np.ndarray:
    """kappa*_{k,J} for every k in one battery."""
    arr = psi_array(psi)
    K = arr.shape[1]
    J = sorted(set(int(j) for j in J))
    if not J:
        return np.full(K, np.inf)
    _guard(len(J))
    lps, owner = [], []
    for k in range(K):
        batch = exact_lps(K, k, J, cf.ratio)
        lps.extend(batch)
        owner.extend([k] * len(batch))
    results = _run_battery(arr, lps, cfg, max_workers)
    out = np.full(K, np.inf)
    for k, (_, value) in zip(owner, results):
        out[k] = min(out[k], value)
    return out


def kappa_general(
    psi: PsiLike,
    J0: Sequence[int],
    p: float,
    s: int,
    c: float,
    kappa_coord: Optional[np.ndarray] = None,
    cf: Optional[ConeFactor] = None,
    cfg: Optional[SolverConfig] = None,
) -> float:
    """Lower bound on kappa_{p,J0,J} for |J| <= s from the coordinate certificates.

    max(|J0|^{-1/p} min_{k in J0} kappa*_k(s), min_k kappa*_k(s) / a). The formula holds
    for every p >= 1; p = inf drops the |J0| factor.
    """
    if p < 1:
        raise InvalidParams("p must be >= 1")
    J0 = sorted(set(int(j) for j in J0))
    if not J0:
        return np.inf
    cf = cf or ConeFactor.standard(c, s)
    if kappa_coord is None:
        kappa_coord = kappa_coord_cert_all(psi, s, cf, cfg)
    kappa_coord = np.asarray(kappa_coord)
    return combine_block_bound(kappa_coord, J0, p, float(np.min(kappa_coord)) / cf.a)


def combine_block_bound(kappa_coord: np.ndarray, J0: Sequence[int], p: float, kappa1: float) -> float:
    """max(|J0|^{-1/p} min_{k in J0} kappa_k, kappa1) for coordinate bounds on a common cone."""
    J0 = sorted(set(int(j) for j in J0))
    if not J0:
        return np.inf
    block_min = float(np.min(np.asarray(kappa_coord)[J0]))
    factor = 1.0 if np.isinf(p) else len(J0) ** (-1.0 / p)
    return max(factor * block_min, kappa1)


def plugin_kappa1(kappa_exact: np.ndarray, J: Sequence[int], c: float, cone: ConeName = "standard") -> float:
    """kappa_{1,J} >= min_k kappa*_{k,J} / ((1 + ratio)|J|); (1-c)/(2|J|) min_k kappa*_{k,J} on C_J.

    Infinite on the empty set.
    """
    J = sorted(set(int(j) for j in J))
    if not J:
        return np.inf
    return float(np.min(kappa_exact)) / ConeFactor(c=c, s=len(J), cone=cone).a


def coherence_bound(psi: PsiLike, J: Sequence[int], c: float, p: float = 1.0) -> Optional[CoherenceBound]:
    """Best (eta1, eta2) admissible in the row-dominance condition, or None when no row qualifies."""
    arr = np.abs(psi_array(psi))
    L, K = arr.shape
    J = sorted(set(int(j) for j in J))
    if not J:
        return None
    limit = (1.0 - c) / (2.0 * len(J))
    per_k = {}
    candidates = set()
    for k in J:
        col = arr[:, k]
        rest = np.delete(arr, k, axis=1)
        other = rest.max(axis=1) if rest.shape[1] else np.zeros(L)
        ok = col > 0
        ratio = np.full(L, np.inf)
        ratio[ok] = other[ok] / col[ok]
        per_k[k] = (col, ratio)
        candidates.update(float(v) for v in ratio[ratio < limit])
    if not candidates:
        return None

    best = None
    for rho in sorted(candidates):
        rows, strengths = {}, []
        for k in J:
            col, ratio = per_k[k]
            admissible = np.where(ratio <= rho)[0]
            if not admissible.size:
                break
            l = int(admissible[np.argmax(col[admissible])])
            rows[k] = l
            strengths.append(col[l])
        else:
            eta1 = (1.0 - c) * min(strengths)
            eta2 = 1.0 - rho / limit
            if eta1 > 0 and eta2 > 0 and (best is None or eta1 * eta2 > best[0] * best[1]):
                best = (eta1, eta2, rows)
    if best is None:
        return None
    eta1, eta2, rows = best
    inv_p = 0.0 if np.isinf(p) else 1.0 / p
    bound = (2.0 * len(J)) ** (-inv_p) * (1.0 - c) ** (-1.0 + inv_p) * eta1 * eta2
    return CoherenceBound(eta1=eta1, eta2=eta2, p=p, bound=bound, rows=rows)


def kappa_coord_free(
    psi: PsiLike,
    k: int,
    cfg: Optional[SolverConfig] = None,
) -> float:
    """inf_{Delta_k = 1} |Psi Delta|_inf without cone restriction (STIV-R)."""
    arr = psi_array(psi)
    K = arr.shape[1]
    loose = tuple(i for i in range(K) if i != k)
    status, value = _run_lp(arr, SensitivityLp(k, (), (), loose=loose, label={"k": k}), cfg or SolverConfig())
    return value


def kappa1_free(
    psi: PsiLike,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> float:
    """inf_{|Delta|_1 = 1} |Psi Delta|_inf over all 2^{K-1} sign patterns."""
    arr = psi_array(psi)
    K = arr.shape[1]
    _guard(K)
    lps = []
    for tail in itertools.product((1, -1), repeat=K - 1):
        signs = (1,) + tail
        lps.append(SensitivityLp(None, tuple(zip(range(K), signs)), (), normalize=tuple(range(K)),
                                 label={"signs": "".join("+" if e > 0 else "-" for e in signs)}))
    results = _run_battery(arr, lps, cfg, max_workers)
    return min(v for _, v in results)


def sensitivity_report(
    psi: PsiLike,
    s: int,
    c: float,
    cone: ConeName = "standard",
    J0_list: Sequence[Sequence[int]] = (),
    exact_sets: Sequence[Sequence[int]] = (),
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
    trace: bool = False,
) -> SensitivityReport:
    """Coordinate certificates plus requested block and exact bounds."""
    cf = ConeFactor(c=c, s=s, cone=cone)
    lp_trace: Optional[List[LpTrace]] = [] if trace else None
    kappas = kappa_coord_cert_all(psi, s, cf, cfg, max_workers, lp_trace)
    kappa1 = float(np.min(kappas)) / cf.a
    methods = ["lp_certif"]

    blocks = []
    for J0 in J0_list:
        J0 = sorted(set(int(j) for j in J0))
        general = kappa_general(psi, J0, 1.0, s, c, kappas, cf)
        if len(J0) <= settings.block_limit:
            direct = kappa_block_cert(psi, J0, s, c, cf, cfg, max_workers)
            blocks.append(BlockBound(J0=J0, value=max(direct, general), method="lp_block"))
            methods.append("lp_block")
        else:
            blocks.append(BlockBound(J0=J0, value=general, method="certifgen"))
            methods.append("certifgen")

    exact = []
    for J in exact_sets:
        J = sorted(set(int(j) for j in J))
        values = kappa_exact_all(psi, J, cf, cfg, max_workers)
        exact.extend(ExactBound(k=k, J=J, value=float(v)) for k, v in enumerate(values))
        methods.append("lp_kappa")

    return SensitivityReport(
        s=s,
        c=c,
        cone=cone,
        ratio=cf.ratio,
        a=cf.a,
        psi_fingerprint=fingerprint(psi),
        kappa_coord=[float(v) for v in kappas],
        kappa1=kappa1,
        blocks=blocks,
        exact=exact,
        methods=sorted(set(methods)),
        trace=lp_trace,
    )


DIRECT_BLOCK_MAX = 3


def block_bound_from_report(
    psi: PsiLike,
    J0: Sequence[int],
    sr: SensitivityReport,
    cfg: Optional[SolverConfig] = None,
    max_workers: Optional[int] = None,
) -> float:
    """kappa-bar_{1,J0}(s) for a report: stored block value, direct battery for small blocks, else certifgen."""
    J0 = sorted(set(int(j) for j in J0))
    if not J0:
        return np.inf
    kappas = np.asarray(sr.kappa_coord)
    general = combine_block_bound(kappas, J0, 1.0, sr.kappa1)
    if len(J0) == 1:
        return general
    stored = sr.block_value(J0)
    if stored is not None:
        return max(stored, general)
    if len(J0) <= DIRECT_BLOCK_MAX:
        cf = ConeFactor(c=sr.c, s=sr.s, cone=sr.cone)
        return max(kappa_block_cert(psi, J0, sr.s, sr.c, cf, cfg, max_workers), general)
    return general
