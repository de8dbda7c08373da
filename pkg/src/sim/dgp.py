# src/sim/dgp.py
"""Simulation design with one endogenous regressor and exogenous copies of instruments.

    y   = X beta* + u
    x_1 = sum_{l <= L-K+1} z_l zeta_l + v
    x_k = z_{L-K+k}           k = 2..K   (exogenous, repeated among the instruments)

with z independent standard normals and (u, v) bivariate normal with standard deviations
sigma_struct, sigma_end and correlation rho. Suspect instruments zbar_l = w_l + theta_l u / sigma_struct^2
carry E[zbar_l u] = theta_l.
"""
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.stiv.data_model import Dataset
from src.stiv.exceptions import InvalidParams
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)


class DgpConfig(BaseModel):
    """Parameters of the simulation design; defaults give 49 observations and 50 instruments."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(49, ge=2)
    K: int = Field(25, ge=1)
    L: int = Field(50, ge=1)
    sigma_struct: float = Field(0.3, gt=0)
    sigma_end: float = Field(0.3, gt=0)
    rho: float = Field(0.3, ge=-1, le=1)
    beta_star: Optional[Tuple[float, ...]] = None
    zeta: Optional[Tuple[float, ...]] = None
    seed: int = 0
    add_constant_instrument: bool = True
    theta_star: Tuple[float, ...] = ()

    @model_validator(mode="after")
    def _shapes(self) -> "DgpConfig":
        if self.L < self.K:
            raise ValueError(f"need L >= K, got L={self.L} K={self.K}")
        if self.beta_star is not None and len(self.beta_star) != self.K:
            raise ValueError(f"beta_star must have length K={self.K}")
        if self.zeta is not None and len(self.zeta) != self.L - self.K + 1:
            raise ValueError(f"zeta must have length L-K+1={self.L - self.K + 1}")
        return self

    @classmethod
    def checked(cls, **fields) -> "DgpConfig":
        try:
            return cls(**fields)
        except ValidationError as exc:
            raise InvalidParams(str(exc)) from exc

    @property
    def beta(self) -> np.ndarray:
        if self.beta_star is not None:
            return np.asarray(self.beta_star, dtype=float)
        out = np.zeros(self.K)
        out[: min(5, self.K)] = 1.0
        return out

    @property
    def zeta_vec(self) -> np.ndarray:
        if self.zeta is not None:
            return np.asarray(self.zeta, dtype=float)
        return np.full(self.L - self.K + 1, 0.15)

    @property
    def exo_idx(self) -> Tuple[int, ...]:
        return tuple(range(1, self.K))


def generator(seed: int) -> np.random.Generator:
    """Counter-based stream for one seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def gen_dgp(cfg: DgpConfig) -> Dataset:
    """One dataset of the design, fully determined by cfg.seed."""
    gen = generator(cfg.seed)
    n, K, L = cfg.n, cfg.K, cfg.L
    z = gen.standard_normal((n, L))
    cov = np.array([
        [cfg.sigma_struct ** 2, cfg.rho * cfg.sigma_struct * cfg.sigma_end],
        [cfg.rho * cfg.sigma_struct * cfg.sigma_end, cfg.sigma_end ** 2],
    ])
    uv = gen.multivariate_normal(np.zeros(2), cov, size=n, method="eigh")
    u, v = uv[:, 0], uv[:, 1]

    x = np.empty((n, K))
    x[:, 0] = z[:, : L - K + 1] @ cfg.zeta_vec + v
    for k in range(1, K):
        x[:, k] = z[:, L - K + k]
    y = x @ cfg.beta + u

    zbar = None
    if cfg.theta_star:
        w = gen.standard_normal((n, len(cfg.theta_star)))
        zbar = w + np.outer(u, np.asarray(cfg.theta_star)) / cfg.sigma_struct ** 2

    const_idx = None
    if cfg.add_constant_instrument:
        z = np.column_stack([z, np.ones(n)])
        const_idx = L
    logger.debug(kv(dgp="generated", n=n, K=K, L=z.shape[1], seed=cfg.seed))
    return Dataset(y=y, x=x, z=z, zbar=zbar, const_instr_idx=const_idx, exo_idx=cfg.exo_idx)


def structural_errors(cfg: DgpConfig, ds: Dataset) -> np.ndarray:
    """u = y - X beta*."""
    return ds.residuals(cfg.beta)


def planted_invalid(cfg: DgpConfig) -> List[int]:
    return [l for l, t in enumerate(cfg.theta_star) if t != 0.0]
