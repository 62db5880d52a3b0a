# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Bias-corrected p-values of the region hypothesis.

Every report satisfies ``alpha = Phi(-z)``; standard errors are propagated to
the probability scale by the delta method, ``se_alpha = phi(z) * se_z``.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special

from regionboot.exceptions import AbcSingularityError, DomainError, MissingCellError
from regionboot.fit import GammaFit, LinearFit, check_gamma1
from regionboot.model import Capability, ModelSpec
from regionboot.resample import BootstrapTable, ScaleTuple, run_cell
from regionboot.statfun import RandomStream, std_normal_cdf, std_normal_pdf, std_normal_quantile

logger = logging.getLogger(__name__)

ABC_DENOMINATOR_BOUND = 1e-6
# reported probabilities stay strictly inside (0, 1)
_ALPHA_FLOOR = float(np.finfo(float).tiny)
_ALPHA_CEILING = float(np.nextafter(1.0, 0.0))
REPORT_COLUMNS = ["method", "alpha", "z", "se_alpha"]


class Method(str, Enum):
    """P-value methods in order of increasing correction."""

    P0 = "p0"
    ABC = "abc"
    P1 = "p1"
    P2 = "p2"
    P3 = "p3"
    EXACT = "exact"

    @classmethod
    def parse(cls, names: Union[str, Iterable[str]]) -> List["Method"]:
        """Parse method names; ``all`` selects every method."""
        if isinstance(names, str):
            names = [name for name in names.replace(" ", "").split(",") if name]
        names = list(names)
        if "all" in names:
            return list(cls)
        try:
            return sorted({cls(name) for name in names}, key=list(cls).index)
        except ValueError as error:
            raise DomainError(f"Unknown p-value method in {names}") from error


@dataclass(frozen=True)
class PValueReport:
    """A p-value with its z-value, standard error and provenance."""

    method: Method
    alpha: float
    z: float
    se_alpha: Optional[float] = None
    provenance: Dict[str, str] = field(default_factory=dict, compare=False)

    def as_row(self) -> dict:
        """Return the report file row."""
        return {
            "method": self.method.value,
            "alpha": self.alpha,
            "z": self.z,
            "se_alpha": self.se_alpha,
        }


def _report(
    method: Method, z: float, se_z: Optional[float] = None, **provenance: str
) -> PValueReport:
    se_alpha = None if se_z is None else std_normal_pdf(z) * se_z
    return PValueReport(method, std_normal_cdf(-z), float(z), se_alpha, provenance)


def table_provenance(table: BootstrapTable) -> Dict[str, str]:
    """Return the model and table identifiers of a table."""
    return {"model": table.model_id, "table": table.identifier}


def _se(gradient: Sequence[float], cov: np.ndarray) -> float:
    gradient = np.asarray(gradient, dtype=float)
    return math.sqrt(max(float(gradient @ cov @ gradient), 0.0))


def p0(table: BootstrapTable) -> PValueReport:
    """Ordinary bootstrap probability: the one-step cell at tau = 1.

    Raises:
        MissingCellError: if the table has no one-step cell at tau = 1.
    """
    cell = table.find_one_step(1.0)
    if cell is None:
        raise MissingCellError("The table has no one-step cell at tau = 1")
    return _report(Method.P0, cell.z, math.sqrt(cell.var_z), **table_provenance(table))


def z_abc(z0_y: float, z0_proj: float, a: float) -> float:
    """ABC conversion of the bootstrap z-values at y and at its boundary projection.

    Raises:
        AbcSingularityError: if |1 - a * (z0_y - z0_proj)| < 1e-6.
    """
    difference = z0_y - z0_proj
    denominator = 1.0 - a * difference
    if abs(denominator) < ABC_DENOMINATOR_BOUND:
        raise AbcSingularityError(
            f"ABC denominator {denominator:.3g} vanishes (a={a}, z difference={difference})"
        )
    return difference / denominator - z0_proj


def p_abc(
    model: ModelSpec,
    table: BootstrapTable,
    stream: Optional[RandomStream] = None,
    B: Optional[int] = None,
) -> PValueReport:
    """ABC-corrected p-value; the tau = 1 cell is re-run at the projected observation.

    The projected cell is computed exactly when ``stream`` is None and counted
    from ``B`` chains otherwise. No standard error is reported.
    """
    model.require(Capability.PROJECT_TO_BOUNDARY)
    model.require(Capability.ACCELERATION)
    z0_y = p0(table).z
    projected = model.project_to_boundary(table.observation)
    if stream is None:
        model.require(Capability.ONE_STEP_PROB)
        z0_proj = -std_normal_quantile(model.one_step_prob(projected, 1.0))
    else:
        if B is None:
            raise DomainError("A Monte Carlo ABC correction needs B")
        z0_proj = run_cell(model, projected, ScaleTuple((1.0,)), B, stream).z
    a = model.acceleration()
    logger.debug(f"ABC inputs: z0(y)={z0_y:.6f}, z0(projection)={z0_proj:.6f}, a={a:.6f}")
    return _report(
        Method.ABC, z_abc(z0_y, z0_proj, a), model=model.identifier, table=table.identifier
    )


def p1(fit: LinearFit, **provenance: str) -> PValueReport:
    """First-order corrected p-value from z1 = v_hat - c_hat.

    Keyword arguments are recorded as provenance next to ``fit=onestep``.
    """
    provenance.setdefault("fit", "onestep")
    return _report(Method.P1, fit.v_hat - fit.c_hat, _se((1.0, -1.0), fit.cov), **provenance)


def p2(fit: GammaFit, **provenance: str) -> PValueReport:
    """Two-step corrected p-value from z2 = g1 (1 + g3) + g2 / g1."""
    if fit.order != 3:
        raise DomainError(f"p2 needs an order 3 fit, got order {fit.order}")
    g1, g2, g3 = fit.gamma
    check_gamma1(g1)
    z = g1 * (1.0 + g3) + g2 / g1
    gradient = (1.0 + g3 - g2 / (g1 * g1), 1.0 / g1, g1)
    provenance.setdefault("fit", "zeta2")
    return _report(Method.P2, z, _se(gradient, fit.cov), **provenance)


def p3(fit: GammaFit, **provenance: str) -> PValueReport:
    """Three-step corrected p-value.

    z3 = g1 (1 + g3 + 4 g3^2 + g6) + (g2 + g3^2 / 2 + g4 + g5) / g1
    """
    if fit.order != 6:
        raise DomainError(f"p3 needs an order 6 fit, got order {fit.order}")
    g1, g2, g3, g4, g5, g6 = fit.gamma
    check_gamma1(g1)
    linear = 1.0 + g3 + 4.0 * g3 * g3 + g6
    inverse = g2 + 0.5 * g3 * g3 + g4 + g5
    z = g1 * linear + inverse / g1
    gradient = (
        linear - inverse / (g1 * g1),
        1.0 / g1,
        g1 * (1.0 + 8.0 * g3) + g3 / g1,
        1.0 / g1,
        1.0 / g1,
        g1,
    )
    provenance.setdefault("fit", "zeta3")
    return _report(Method.P3, z, _se(gradient, fit.cov), **provenance)


def exact(model: ModelSpec, y: np.ndarray) -> PValueReport:
    """Exact p-value from the model oracle.

    An oracle value of 0 or 1 (an observation deep inside the region, or at
    the origin of the spherical model) is reported as the nearest double
    inside (0, 1) so that z stays finite.
    """
    model.require(Capability.EXACT_PVALUE)
    alpha = model.exact_pvalue(y)
    if not _ALPHA_FLOOR <= alpha <= _ALPHA_CEILING:
        clamped = min(max(alpha, _ALPHA_FLOOR), _ALPHA_CEILING)
        logger.warning(f"Exact p-value {alpha:.3g} reported as {clamped!r}")
        alpha = clamped
    z = -float(special.ndtri(alpha))
    return PValueReport(Method.EXACT, alpha, z, None, {"model": model.identifier})


def two_step_shift(a: float, v: float, tau1: float, tau2: float) -> float:
    """Predicted z2(tau1, tau2) - z1(sqrt(tau1^2 + tau2^2)) caused by the acceleration."""
    if not (tau1 > 0 and tau2 > 0):
        raise DomainError(f"Scales must be positive, got {tau1}, {tau2}")
    t1, t2 = tau1 * tau1, tau2 * tau2
    return a * t1 * t2 * (v * v - (t1 + t2)) / (t1 + t2) ** 2.5


def reports_frame(reports: Iterable[PValueReport]) -> pd.DataFrame:
    """Return the reports as a frame with the report columns."""
    return pd.DataFrame([report.as_row() for report in reports], columns=REPORT_COLUMNS)


def write_reports(reports: Iterable[PValueReport], path: Union[str, Path]) -> Path:
    """Write one CSV row per method: method, alpha, z, se_alpha (blank when absent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_frame(reports).to_csv(path, index=False)
    logger.info(f"P-values written to {path}")
    return path
