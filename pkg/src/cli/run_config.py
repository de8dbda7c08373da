# src/cli/run_config.py
"""Run configuration and CSV ingestion for the command line.

A run is described by one JSON document; command-line flags override its keys. Each key
keeps its provenance (a JSON path or a flag) so validation errors can point at it.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config.settings import settings
from src.stiv.data_model import Dataset
from src.stiv.exceptions import ConfigError, DataError
from src.stiv.inference import ScenarioSpec
from src.utils.logging import kv, setup_logger

logger = setup_logger(__name__)

Command = Literal["fit", "sens", "ci", "select", "twostage", "nv", "simulate"]
COMMANDS = ("fit", "sens", "ci", "select", "twostage", "nv", "simulate")
CONST_COLUMN = "const"


class RunConfig(BaseModel):
    """Everything one command needs; defaults are echoed in every report."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    command: Command
    data: Optional[str] = None
    outcome: Optional[str] = None
    regressors: List[str] = Field(default_factory=list)
    instruments: List[str] = Field(default_factory=list)
    zbar: List[str] = Field(default_factory=list)
    constant: Optional[str] = None
    exogenous: List[str] = Field(default_factory=list)
    add_constant: bool = True

    estimator: Literal["stiv", "stiv_r", "sqrt_lasso"] = "stiv"
    c: float = Field(0.1, gt=0, lt=1)
    c_grid: List[float] = Field(default_factory=list)
    r: Optional[float] = Field(None, gt=0)
    s: Optional[int] = Field(None, ge=1)
    s_list: List[int] = Field(default_factory=list)
    I: List[str] = Field(default_factory=list)
    dx_mode: Literal["rms", "maxabs"] = "rms"
    cone: Literal["standard", "enlarged"] = "standard"
    J0: List[List[str]] = Field(default_factory=list)
    p: float = Field(1.0, ge=1)
    heavy_tail: bool = False
    plugin: bool = False

    scenario: int = Field(4, ge=1, le=5)
    alpha: float = Field(0.05, gt=0, lt=1)
    delta: float = Field(1.0, gt=0)
    c4: Optional[float] = Field(None, gt=0)
    simplified_c4: float = Field(1.0, ge=1.0)
    two_stage_r: bool = False
    error_dist: Literal["normal", "student_t", "laplace", "rademacher"] = "normal"
    B: int = Field(1000, ge=1)

    k_end: Optional[str] = None
    c_rf: float = Field(0.1, gt=0, lt=1)
    s_rf: Optional[int] = Field(None, ge=1)
    c_nv: float = Field(0.1, gt=0, lt=1)
    s1: Optional[int] = Field(None, ge=0)
    b_rule: Literal["certificate", "sparsity_scaled"] = "certificate"

    profile: Optional[str] = None
    n: Optional[int] = Field(None, ge=2)
    reps: Optional[int] = Field(None, ge=1)

    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    seed: int = 0
    max_workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _roles(self) -> "RunConfig":
        if self.command == "simulate":
            return self
        if not self.data:
            raise ValueError("data: a CSV path is required")
        if not self.outcome or not self.regressors or not self.instruments:
            raise ValueError("outcome, regressors and instruments must be given")
        regs, inst, zbar = set(self.regressors), set(self.instruments), set(self.zbar)
        exo = set(self.exogenous)
        if self.outcome in regs | inst | zbar:
            raise ValueError(f"outcome column {self.outcome!r} also has another role")
        if zbar & (regs | inst):
            raise ValueError(f"suspect instruments overlap other roles: {sorted(zbar & (regs | inst))}")
        if not exo <= regs:
            raise ValueError(f"exogenous columns must be regressors: {sorted(exo - regs)}")
        shared = regs & inst
        if shared - exo:
            raise ValueError(f"columns used as regressor and instrument must be declared exogenous: {sorted(shared - exo)}")
        if len(set(self.regressors)) != len(self.regressors) or len(set(self.instruments)) != len(self.instruments):
            raise ValueError("duplicate column in a role")
        if self.command == "nv" and not self.zbar:
            raise ValueError("nv needs suspect instruments (zbar)")
        if self.command == "twostage" and self.k_end is None:
            raise ValueError("twostage needs k_end")
        if self.k_end is not None and self.k_end not in regs:
            raise ValueError(f"k_end {self.k_end!r} is not a regressor")
        return self

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(scenario=self.scenario, alpha=self.alpha, delta=self.delta, c4=self.c4,
                            simplified_c4=self.simplified_c4,
                            two_stage=self.two_stage_r, error_dist=self.error_dist, B=self.B, seed=self.seed)

    def echo(self) -> Dict[str, Any]:
        return self.model_dump()


def _read_json(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}", path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", path)
    return doc


def parse_config(path: Optional[str] = None, flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge the JSON document with flag overrides (flags win) and validate."""
    merged: Dict[str, Any] = {}
    origin: Dict[str, str] = {}
    if path:
        doc = _read_json(path)
        merged.update(doc)
        origin.update({key: f"{path}:$.{key}" for key in doc})
    for key, value in (flags or {}).items():
        if value is None or value == () or value == []:
            continue
        merged[key] = list(value) if isinstance(value, tuple) else value
        origin[key] = f"--{key.replace('_', '-')}"
    try:
        cfg = RunConfig(**merged)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = err["loc"][0] if err["loc"] else None
        where = origin.get(str(loc), f"{path}:$.{loc}" if path and loc else (f"--{loc}" if loc else path))
        raise ConfigError(err["msg"], where) from exc
    logger.debug(kv(config=cfg.command, data=cfg.data, keys=len(merged)))
    return cfg


def _numeric(df: pd.DataFrame, column: str, path: str) -> np.ndarray:
    if column not in df.columns:
        raise ConfigError(f"column {column!r} not found in {path}", column)
    raw = df[column]
    parsed = pd.to_numeric(raw, errors="coerce")
    bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"non-numeric cell {raw.iloc[row]!r} in column {column!r}, data row {row + 1}")
    # float() of the decimal text is correctly rounded
    return np.array([float(v) for v in raw], dtype=float)


def load_dataset(cfg: RunConfig) -> Tuple[Dataset, Dict[str, List[str]]]:
    """Dataset of the configured roles; names of regressors, instruments and suspect instruments."""
    path = cfg.data
    if not path or not Path(path).is_file():
        raise DataError(f"input file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]
    y = _numeric(df, cfg.outcome, path)
    x = np.column_stack([_numeric(df, c, path) for c in cfg.regressors])
    inst = list(cfg.instruments)
    z = np.column_stack([_numeric(df, c, path) for c in inst])
    zbar = np.column_stack([_numeric(df, c, path) for c in cfg.zbar]) if cfg.zbar else None

    const_idx = inst.index(cfg.constant) if cfg.constant in inst else None
    if const_idx is None and not np.any(np.all(z == 1.0, axis=0)):
        if not cfg.add_constant:
            raise DataError("no constant instrument; add a column of ones or enable add_constant")
        z = np.column_stack([z, np.ones(z.shape[0])])
        inst.append(CONST_COLUMN)
        const_idx = len(inst) - 1
    exo = tuple(cfg.regressors.index(c) for c in cfg.exogenous)
    ds = Dataset(y=y, x=x, z=z, zbar=zbar, const_instr_idx=const_idx, exo_idx=exo)
    logger.info(kv(data=path, n=ds.n, K=ds.K, L=ds.L, L1=ds.L1))
    return ds, {"regressors": list(cfg.regressors), "instruments": inst, "zbar": list(cfg.zbar)}


def index_of(names: List[str], columns: List[str], role: str) -> List[int]:
    missing = [c for c in columns if c not in names]
    if missing:
        raise ConfigError(f"{role} refers to unknown columns {missing}", role)
    return [names.index(c) for c in columns]


def write_dataset(ds: Dataset, names: Dict[str, List[str]], path: str, outcome: str = "y") -> Path:
    """CSV with the outcome, regressors, instruments not already written, and suspect instruments."""
    cols: Dict[str, np.ndarray] = {outcome: ds.y}
    for k, name in enumerate(names["regressors"]):
        cols[name] = ds.x[:, k]
    for l, name in enumerate(names["instruments"]):
        if name in cols and not np.array_equal(cols[name], ds.z[:, l]):
            raise DataError(f"column name {name!r} used for two different series")
        cols.setdefault(name, ds.z[:, l])
    for l, name in enumerate(names.get("zbar", [])):
        cols[name] = ds.zbar[:, l]
    out = Path(path)
    pd.DataFrame(cols).to_csv(out, index=False, float_format="%.17g", encoding="utf-8")
    return out
