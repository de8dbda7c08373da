# src/stiv/cones.py
"""Jordan-algebra helpers for products of nonnegative orthants and second-order cones.

A point of the cone is a flat vector: the orthant entries first, then each
second-order block (head first). All functions work block by block.
"""
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class ConeDims:
    """Orthant size and second-order block sizes of a product cone."""

    nonneg: int = 0
    soc: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return self.nonneg + sum(self.soc)

    @property
    def degree(self) -> int:
        return self.nonneg + len(self.soc)

    def soc_slices(self) -> List[slice]:
        out, start = [], self.nonneg
        for q in self.soc:
            out.append(slice(start, start + q))
            start += q
        return out


def identity(dims: ConeDims) -> np.ndarray:
    e = np.zeros(dims.size)
    e[: dims.nonneg] = 1.0
    for blk in dims.soc_slices():
        e[blk.start] = 1.0
    return e


def min_eigenvalue(u: np.ndarray, dims: ConeDims) -> float:
    """Smallest spectral value over all blocks (positive iff u is interior)."""
    vals = []
    if dims.nonneg:
        vals.append(np.min(u[: dims.nonneg]))
    for blk in dims.soc_slices():
        v = u[blk]
        vals.append(v[0] - np.linalg.norm(v[1:]))
    return float(min(vals)) if vals else np.inf


def shift_interior(u: np.ndarray, dims: ConeDims) -> np.ndarray:
    """Move u well inside the cone along the identity direction if needed."""
    ts = -min_eigenvalue(u, dims)
    if ts >= -1e-8 * max(np.linalg.norm(u), 1.0):
        return u + (1.0 + ts) * identity(dims)
    return u.copy()


def product(u: np.ndarray, v: np.ndarray, dims: ConeDims) -> np.ndarray:
    """Jordan product u o v."""
    out = np.empty_like(u)
    k = dims.nonneg
    out[:k] = u[:k] * v[:k]
    for blk in dims.soc_slices():
        a, b = u[blk], v[blk]
        out[blk.start] = a @ b
        out[blk.start + 1: blk.stop] = a[0] * b[1:] + b[0] * a[1:]
    return out


def divide(u: np.ndarray, v: np.ndarray, dims: ConeDims) -> np.ndarray:
    """Solve v o x = u for x (v interior)."""
    out = np.empty_like(u)
    k = dims.nonneg
    out[:k] = u[:k] / v[:k]
    for blk in dims.soc_slices():
        a, b = u[blk], v[blk]
        nb = np.linalg.norm(b[1:])
        det = (b[0] - nb) * (b[0] + nb)
        x0 = (b[0] * a[0] - b[1:] @ a[1:]) / det
        out[blk.start] = x0
        out[blk.start + 1: blk.stop] = (a[1:] - x0 * b[1:]) / b[0]
    return out


def _j_norm(v: np.ndarray) -> float:
    n1 = np.linalg.norm(v[1:])
    return float(np.sqrt(max((v[0] - n1) * (v[0] + n1), 0.0)))


def _hat_apply(wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the unit-determinant symmetric map with scaling point wbar."""
    w0, w1 = wbar[0], wbar[1:]
    t = w1 @ v[1:]
    out = np.empty_like(v)
    out[0] = w0 * v[0] + t
    out[1:] = v[0] * w1 + v[1:] + (t / (1.0 + w0)) * w1
    return out


def _hat_apply_inv(wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
    w0, w1 = wbar[0], wbar[1:]
    t = w1 @ v[1:]
    out = np.empty_like(v)
    out[0] = w0 * v[0] - t
    out[1:] = -v[0] * w1 + v[1:] + (t / (1.0 + w0)) * w1
    return out


def max_step(u: np.ndarray, du: np.ndarray, dims: ConeDims) -> float:
    """Largest alpha >= 0 with u + alpha*du in the cone (u interior); inf if unbounded."""
    alpha = np.inf
    k = dims.nonneg
    if k:
        neg = du[:k] < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-u[:k][neg] / du[:k][neg])))
    for blk in dims.soc_slices():
        a, d = u[blk], du[blk]
        nu = _j_norm(a)
        if nu <= 0:
            return 0.0
        # Map the block to the identity and read off the smallest spectral value
        q = _hat_apply_inv(a / nu, d) / nu
        lam = q[0] - np.linalg.norm(q[1:])
        if lam < 0:
            alpha = min(alpha, -1.0 / lam)
    return alpha


class NTScaling:
    """Nesterov-Todd scaling W with W z = W^{-1} s = lambda.

    Orthant blocks use W = diag(sqrt(s/z)); second-order blocks use
    W = eta * H(wbar) with eta^2 = ||s||_J / ||z||_J.
    """

    def __init__(self, s: np.ndarray, z: np.ndarray, dims: ConeDims):
        self.dims = dims
        k = dims.nonneg
        self.d = np.sqrt(s[:k] / z[:k])
        self.blocks = []
        for blk in dims.soc_slices():
            sb, zb = s[blk], z[blk]
            sn, zn = _j_norm(sb), _j_norm(zb)
            sbar, zbar = sb / sn, zb / zn
            gamma = np.sqrt(max((1.0 + sbar @ zbar) / 2.0, 0.0))
            jz = zbar.copy()
            jz[1:] = -jz[1:]
            wbar = (sbar + jz) / (2.0 * gamma)
            # Renormalize so that wbar'Jwbar = 1 exactly
            wbar[0] = np.sqrt(1.0 + wbar[1:] @ wbar[1:])
            self.blocks.append((blk, np.sqrt(sn / zn), wbar))
        self.lam = self.apply(z)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """W v."""
        out = np.empty_like(v)
        k = self.dims.nonneg
        out[:k] = self.d * v[:k]
        for blk, eta, wbar in self.blocks:
            out[blk] = eta * _hat_apply(wbar, v[blk])
        return out

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        """W^{-1} v."""
        out = np.empty_like(v)
        k = self.dims.nonneg
        out[:k] = v[:k] / self.d
        for blk, eta, wbar in self.blocks:
            out[blk] = _hat_apply_inv(wbar, v[blk]) / eta
        return out

    def inv_square_blocks(self) -> List[Tuple[slice, np.ndarray]]:
        """Dense W^{-2} for each second-order block."""
        out = []
        for blk, eta, wbar in self.blocks:
            jw = wbar.copy()
            jw[1:] = -jw[1:]
            jmat = -np.eye(len(wbar))
            jmat[0, 0] = 1.0
            out.append((blk, (2.0 * np.outer(jw, jw) - jmat) / eta ** 2))
        return out

    def inv_square_orthant(self) -> np.ndarray:
        return 1.0 / self.d ** 2
