# src/stiv/exceptions.py
"""Error hierarchy for the STIV toolkit.

Everything a caller can fix by changing its inputs derives from UserInputError;
numerical breakdowns of the conic solver raise SolverFailure. The CLI maps the two
branches onto exit codes 1 and 2.
"""
from typing import Any, Optional


class StivError(Exception):
    """Base class for all toolkit errors."""


class UserInputError(StivError):
    """The request cannot be served as given."""


class DataError(UserInputError):
    """A Dataset violates one of its structural invariants."""


class DegenerateColumn(DataError):
    """A regressor or instrument column is (numerically) identically zero."""

    def __init__(self, kind: str, index: int):
        self.kind = kind
        self.index = index
        super().__init__(f"{kind} column {index} is identically zero")


class ConstantMissing(DataError):
    """The constant instrument is absent from the cone-constrained set."""


class DimensionMismatch(DataError):
    """Array shapes do not agree."""


class SpecInvalid(UserInputError):
    """An estimator specification is inconsistent with the data."""


class InvalidParams(UserInputError):
    """A numerical parameter lies outside its admissible range."""


class InfeasibleQuantile(UserInputError):
    """The quantile formula has no value for these parameters."""


class BlockTooLarge(UserInputError):
    """A sign-pattern battery would exceed the configured size guard."""

    def __init__(self, size: int, limit: int):
        self.size = size
        self.limit = limit
        super().__init__(f"block of size {size} exceeds limit {limit}")


class MismatchedReport(UserInputError):
    """A sensitivity report does not belong to the fit it is combined with."""


class NormalizationMismatch(UserInputError):
    """The fit used a different D_X normalization than the procedure requires."""


class DegenerateInstrument(UserInputError):
    """The estimated instrument is identically zero."""


class InfiniteC1(UserInputError):
    """The first-stage error bound is infinite, the second stage cannot be built."""


class InfinitePilotBound(UserInputError):
    """The pilot l1 bound is infinite, STIV-NV cannot be assembled."""


class ConfigError(UserInputError):
    """A run configuration could not be parsed or validated."""

    def __init__(self, message: str, provenance: Optional[str] = None):
        self.provenance = provenance
        prefix = f"[{provenance}] " if provenance else ""
        super().__init__(f"{prefix}{message}")


class SolverFailure(StivError):
    """The conic solver did not return an optimal certificate."""

    def __init__(
        self,
        message: str,
        solution: Any = None,
        dump_path: Optional[str] = None,
        location: Optional[dict] = None,
    ):
        self.solution = solution
        self.dump_path = dump_path
        self.location = location or {}
        details = []
        if self.location:
            details.append(", ".join(f"{k}={v}" for k, v in self.location.items()))
        if dump_path:
            details.append(f"program dumped to {dump_path}")
        suffix = f" ({'; '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")
