# src/stiv/data_model.py
"""Observations and the normalizations built on them.

Usage:
    ds = Dataset(y=y, x=x, z=z, exo_idx=(1, 2))
    dx = compute_dx(ds, "rms")
    dz = compute_dz(ds, I=[ds.const_instr_idx])
    psi = compute_psi(ds, dx, dz)

Indices are zero-based throughout the API. Reports print them one-based.
"""
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Tuple

import numpy as np

from src.stiv.exceptions import (
    ConstantMissing,
    DataError,
    DegenerateColumn,
    DimensionMismatch,
)

DEGENERATE_MOMENT = 1e-12
CONSTANT_TOL = 1e-12

DxMode = Literal["rms", "maxabs"]


def col_mean(a: np.ndarray) -> np.ndarray:
    """Column means with pairwise summation along each column."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return np.asarray(np.mean(a))
    return np.ascontiguousarray(a.T).mean(axis=1)


def _frozen(a: Optional[np.ndarray], ndim: int, name: str) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 1 and ndim == 2:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def detect_constant(z: np.ndarray) -> Optional[int]:
    """Index of the first all-ones column of z, or None."""
    hits = np.where(np.all(np.abs(np.asarray(z) - 1.0) <= CONSTANT_TOL, axis=0))[0]
    return int(hits[0]) if hits.size else None


@dataclass(frozen=True)
class Dataset:
    """Outcome, regressors, instruments and an optional list of suspect instruments."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    zbar: Optional[np.ndarray] = None
    const_instr_idx: Optional[int] = None
    exo_idx: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        y = _frozen(self.y, 1, "y")
        x = _frozen(self.x, 2, "x")
        z = _frozen(self.z, 2, "z")
        zbar = _frozen(self.zbar, 2, "zbar")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "zbar", zbar)

        n = y.shape[0]
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        for name, arr in (("x", x), ("z", z), ("zbar", zbar)):
            if arr is not None and arr.shape[0] != n:
                raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, y has {n}")
        if x.shape[1] < 1 or z.shape[1] < 1:
            raise DataError("need at least one regressor and one instrument")

        for k in range(x.shape[1]):
            if np.all(x[:, k] == 0.0):
                raise DegenerateColumn("regressor", k)
        for l in range(z.shape[1]):
            if np.all(z[:, l] == 0.0):
                raise DegenerateColumn("instrument", l)

        # Declared index wins over detection
        idx = self.const_instr_idx
        if idx is None:
            idx = detect_constant(z)
            if idx is None:
                raise ConstantMissing("no instrument column is identically 1")
        idx = int(idx)
        if not 0 <= idx < z.shape[1]:
            raise DataError(f"const_instr_idx {idx} out of range")
        if np.any(np.abs(z[:, idx] - 1.0) > CONSTANT_TOL):
            raise ConstantMissing(f"instrument column {idx} is not identically 1")
        object.__setattr__(self, "const_instr_idx", idx)

        exo = tuple(sorted({int(k) for k in self.exo_idx}))
        for k in exo:
            if not 0 <= k < x.shape[1]:
                raise DataError(f"exogenous index {k} out of range")
            if not np.any(np.all(z == x[:, [k]], axis=0)):
                raise DataError(f"exogenous regressor {k} is not among the instruments")
        object.__setattr__(self, "exo_idx", exo)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[1]

    @property
    def L(self) -> int:
        return self.z.shape[1]

    @property
    def L1(self) -> int:
        return 0 if self.zbar is None else self.zbar.shape[1]

    @property
    def endo_idx(self) -> Tuple[int, ...]:
        return tuple(k for k in range(self.K) if k not in self.exo_idx)

    def instrument_of(self, k: int) -> int:
        """Column of z that repeats exogenous regressor k."""
        hits = np.where(np.all(self.z == self.x[:, [k]], axis=0))[0]
        if not hits.size:
            raise DataError(f"regressor {k} is not among the instruments")
        return int(hits[0])

    def residuals(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.K,):
            raise DimensionMismatch(f"beta must have length {self.K}")
        return self.y - self.x @ beta


@dataclass(frozen=True)
class DiagScale:
    """Positive diagonal normalization with the rule that produced it."""

    entries: np.ndarray
    mode: str
    index_set: Tuple[int, ...] = ()

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float, copy=True).ravel()
        if not np.all(np.isfinite(entries)) or np.any(entries <= 0):
            raise DataError("scale entries must be positive and finite")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "index_set", tuple(sorted(int(i) for i in self.index_set)))

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.entries


@dataclass(frozen=True)
class PsiMatrix:
    """Normalized instrument/regressor cross-moment matrix (L x K)."""

    values: np.ndarray
    dx: DiagScale
    dz: DiagScale

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_row(self, row: np.ndarray) -> "PsiMatrix":
        """Append one instrument row; used for row-addition monotonicity checks."""
        values = np.vstack([self.values, np.asarray(row, dtype=float).reshape(1, -1)])
        values.setflags(write=False)
        return PsiMatrix(values=values, dx=self.dx, dz=self.dz)


def rms_scale(a: np.ndarray, kind: str) -> np.ndarray:
    """E_n[a_k^2]^{-1/2} per column with the degeneracy guard."""
    second = col_mean(np.asarray(a) ** 2)
    bad = np.where(second < DEGENERATE_MOMENT)[0]
    if bad.size:
        raise DegenerateColumn(kind, int(bad[0]))
    return 1.0 / np.sqrt(second)


def maxabs_scale(a: np.ndarray, kind: str) -> np.ndarray:
    """(max_i |a_ki|)^{-1} per column with the degeneracy guard."""
    a = np.asarray(a)
    second = col_mean(a ** 2)
    bad = np.where(second < DEGENERATE_MOMENT)[0]
    if bad.size:
        raise DegenerateColumn(kind, int(bad[0]))
    return 1.0 / np.max(np.abs(a), axis=0)


def compute_dx(ds: Dataset, mode: DxMode = "rms") -> DiagScale:
    if mode == "rms":
        return DiagScale(rms_scale(ds.x, "regressor"), "rms")
    if mode == "maxabs":
        return DiagScale(maxabs_scale(ds.x, "regressor"), "maxabs")
    raise ValueError(f"unknown D_X mode {mode!r}")


def cross_scale(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(x.z)_l = max_k E_n[(X_k Z_l / E_n[X_k^2]^{1/2})^2]^{1/2} for every column l of z."""
    x = np.asarray(x, dtype=float)
    z2 = np.asarray(z, dtype=float) ** 2
    x_rms = 1.0 / rms_scale(x, "regressor")
    # E_n[X_k^2 Z_l^2] one regressor at a time, pairwise sums through col_mean
    cross = np.column_stack([col_mean(z2 * (x[:, [k]] / x_rms[k]) ** 2) for k in range(x.shape[1])])
    return np.sqrt(np.max(cross, axis=1))


def compute_dz(ds: Dataset, I: Iterable[int]) -> DiagScale:
    I = tuple(sorted({int(l) for l in I}))
    if ds.const_instr_idx not in I:
        raise ConstantMissing(f"constant instrument {ds.const_instr_idx} must belong to I")
    for l in I:
        if not 0 <= l < ds.L:
            raise DataError(f"instrument index {l} out of range")
    entries = maxabs_scale(ds.z, "instrument")
    in_I = np.array(I, dtype=int)
    xz = cross_scale(ds.x, ds.z[:, in_I])
    if np.any(xz <= 0):
        bad = int(in_I[np.argmax(xz <= 0)])
        raise DegenerateColumn("instrument", bad)
    entries = entries.copy()
    entries[in_I] = 1.0 / xz
    return DiagScale(entries, "mixed", I)


def psi_values(z: np.ndarray, x: np.ndarray, dz: np.ndarray, dx: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    # E_n[z_l x_k] one regressor at a time, pairwise sums through col_mean
    cross = np.column_stack([col_mean(z * x[:, [k]]) for k in range(x.shape[1])])
    values = np.asarray(dz)[:, None] * cross * np.asarray(dx)[None, :]
    values.setflags(write=False)
    return values


def compute_psi(ds: Dataset, dx: DiagScale, dz: DiagScale) -> PsiMatrix:
    if len(dx) != ds.K:
        raise DimensionMismatch(f"D_X has {len(dx)} entries, dataset has K={ds.K}")
    if len(dz) != ds.L:
        raise DimensionMismatch(f"D_Z has {len(dz)} entries, dataset has L={ds.L}")
    return PsiMatrix(psi_values(ds.z, ds.x, dz.entries, dx.entries), dx, dz)


def qhat(ds: Dataset, beta: np.ndarray, l: int) -> float:
    """(1/n) sum_i z_li^2 (y_i - x_i'beta)^2."""
    if not 0 <= l < ds.L:
        raise DimensionMismatch(f"instrument index {l} out of range")
    u = ds.residuals(beta)
    return float(np.mean((ds.z[:, l] * u) ** 2))
