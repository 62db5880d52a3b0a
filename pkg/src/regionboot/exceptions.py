# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Errors raised by regionboot, each carrying the exit status it maps to."""

from enum import IntEnum
from typing import Optional, Sequence


class ExitStatus(IntEnum):
    """Process exit codes of the command-line front end."""

    OK = 0
    CONFIG = 2
    CAPABILITY = 3
    NUMERICAL = 4


def _restore_error(cls, args, state):
    error = Exception.__new__(cls)
    error.args = args
    error.__dict__.update(state)
    return error


class ErrorWithStatus(Exception):
    """Base error: a message plus the status the front end should report."""

    def __init__(self, msg: str, status: ExitStatus = ExitStatus.NUMERICAL):
        super().__init__(str(msg))
        self.msg = str(msg)
        self.status = status

    def __reduce__(self):
        # subclass constructors differ, so rebuild from state when crossing process pools
        return (_restore_error, (type(self), self.args, self.__dict__))


class DomainError(ErrorWithStatus, ValueError):
    """An argument lies outside the domain of the operation."""

    def __init__(self, msg: str):
        super().__init__(msg, ExitStatus.CONFIG)


class ConfigError(ErrorWithStatus):
    """Invalid run configuration, option file or CSV schema."""

    def __init__(self, msg: str):
        super().__init__(msg, ExitStatus.CONFIG)


class MissingCellError(ErrorWithStatus):
    """A bootstrap table lacks a cell required by a p-value method."""

    def __init__(self, msg: str):
        super().__init__(msg, ExitStatus.CONFIG)


class UnsupportedCapabilityError(ErrorWithStatus):
    """The model does not provide the requested optional capability."""

    def __init__(self, model_name: str, capability: str):
        super().__init__(
            f"Model {model_name} does not provide {capability}", ExitStatus.CAPABILITY
        )
        self.model_name = model_name
        self.capability = capability


class UndefinedProjectionError(ErrorWithStatus):
    """The boundary projection is undefined at the given point."""


class DegenerateDesignError(ErrorWithStatus):
    """The regression design cannot identify the coefficients."""


class NearSingularGammaError(ErrorWithStatus):
    """|gamma_1| fell below the admissible bound."""


class AbcSingularityError(ErrorWithStatus):
    """The denominator of the ABC conversion vanished."""


class ReplicateError(ErrorWithStatus):
    """Replicate generation or region evaluation failed."""


class FitConvergenceError(ErrorWithStatus):
    """The nonlinear least squares iteration did not converge."""

    def __init__(self, msg: str, gamma: Sequence[float], gradient_norm: float):
        super().__init__(
            f"{msg} (gamma={list(map(float, gamma))}, gradient norm={gradient_norm:.3e})"
        )
        self.gamma = tuple(float(g) for g in gamma)
        self.gradient_norm = float(gradient_norm)


class CellError(ErrorWithStatus):
    """A table cell failed; wraps the underlying error with the cell identity."""

    def __init__(self, index: int, scales: Sequence[float], cause: Exception):
        status: Optional[ExitStatus] = getattr(cause, "status", None)
        super().__init__(
            f"Cell {index} (taus={tuple(float(t) for t in scales)}) failed: {cause}",
            status if status is not None else ExitStatus.NUMERICAL,
        )
        self.index = index
        self.scales = tuple(scales)
        self.cause = cause
