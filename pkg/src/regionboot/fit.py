# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Weighted regressions of bootstrap z-values on the scales.

The one-step fit regresses z on (1/tau, tau) in closed form. The multistep
fits adjust the three coefficients of the two-step surface ``zeta2`` or the six
of the three-step surface ``zeta3`` by damped Gauss-Newton iterations with a
ridge penalty. Every residual is weighted by 1 / var_z of its cell. The ridge
weights act per replicate: the penalty is multiplied by the mean cell B, so a
penalized fit does not change with the nominal B of an oracle table.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from regionboot.exceptions import (
    DegenerateDesignError,
    DomainError,
    FitConvergenceError,
    NearSingularGammaError,
)
from regionboot.resample import BootstrapCell, BootstrapTable, ScaleTuple

logger = logging.getLogger(__name__)

GAMMA1_BOUND = 1e-6
DEFAULT_RIDGE = 0.01
MAX_ITERATIONS = 200
FIT_ATTEMPTS = 3
INITIAL_DAMPING = 1e-3
RELATIVE_DECREASE = 1e-12
_MAX_DAMPING = 1e16
_MIN_DAMPING = 1e-15
_EXACT_FIT = 1e-28
_STALL_GRADIENT = 1e-6
_MIN_INIT = 1e-3

Cells = Union[BootstrapTable, Sequence[BootstrapCell]]


class ScaleFeatures(NamedTuple):
    """Scale summaries s1..s4 entering the multistep surfaces."""

    s1: float
    s2: float
    s3: float
    s4: float


@dataclass(frozen=True)
class LinearFit:
    """One-step fit z = v / tau + c * tau."""

    v_hat: float
    c_hat: float
    cov: np.ndarray
    rss: float

    @property
    def se(self) -> np.ndarray:
        """Standard errors of the coefficients."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def z_at(self, tau: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Fitted z-value at scale ``tau``."""
        return self.v_hat / tau + self.c_hat * tau

    def slope_at(self, inv_tau: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Derivative of the fitted curve with respect to 1 / tau."""
        return self.v_hat - self.c_hat / (inv_tau * inv_tau)


@dataclass(frozen=True)
class GammaFit:
    """Penalized fit of the two-step (order 3) or three-step (order 6) surface."""

    order: int
    gamma: np.ndarray
    cov: np.ndarray
    ridge_weights: np.ndarray
    rss: float
    objective: float
    iterations: int

    @property
    def se(self) -> np.ndarray:
        """Standard errors of the coefficients."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def _cells(table: Cells) -> List[BootstrapCell]:
    return list(table.cells if isinstance(table, BootstrapTable) else table)


def fit_onestep(table: Cells) -> LinearFit:
    """Weighted least squares of the one-step z-values on (1/tau, tau).

    Raises:
        DegenerateDesignError: fewer than two distinct one-step scales.
    """
    cells = [cell for cell in _cells(table) if cell.k == 1]
    taus = np.array([cell.scales.taus[0] for cell in cells])
    if len(np.unique(taus)) < 2:
        raise DegenerateDesignError(
            f"The one-step fit needs two distinct scales, got {sorted(set(taus.tolist()))}"
        )
    z = np.array([cell.z for cell in cells])
    w = 1.0 / np.array([cell.var_z for cell in cells])
    design = np.column_stack([1.0 / taus, taus])
    normal = design.T @ (w[:, None] * design)
    if np.linalg.cond(normal) > 1e14:
        raise DegenerateDesignError("The one-step design matrix is singular")
    cov = np.linalg.inv(normal)
    v_hat, c_hat = cov @ (design.T @ (w * z))
    residuals = z - design @ np.array([v_hat, c_hat])
    rss = float(np.sum(w * residuals * residuals))
    logger.debug(f"One-step fit on {len(cells)} cells: v={v_hat:.6f}, c={c_hat:.6f}")
    return LinearFit(float(v_hat), float(c_hat), cov, rss)


def scale_features(scales: Union[ScaleTuple, Sequence[float]]) -> ScaleFeatures:
    """Return (s1, s2, s3, s4) of a scale tuple; absent steps drop out of the formulas."""
    if not isinstance(scales, ScaleTuple):
        scales = ScaleTuple(tuple(scales))
    sq = [t * t for t in scales.taus]
    if scales.k == 1:
        return ScaleFeatures(1.0 / scales.taus[0], 0.0, 0.0, 0.0)
    if scales.k == 2:
        t1, t2 = sq
        s1 = (t1 + t2) ** -0.5
        return ScaleFeatures(s1, t1 * t2 * s1**4, 0.0, 0.0)
    t1, t2, t3 = sq
    s1 = (t1 + t2 + t3) ** -0.5
    s2 = (t1 * t2 + t2 * t3 + t3 * t1) * s1**4
    s3 = (t1 * t2 * t3 + t2 * t2 * t3 + t1 * t1 * (t2 + t3)) * s1**6
    s4 = t1 * t2 * t3 * s1**6
    return ScaleFeatures(s1, s2, s3, s4)


def check_gamma1(gamma1: float) -> None:
    """Raise NearSingularGammaError when abs(gamma1) is below the bound."""
    if not abs(gamma1) >= GAMMA1_BOUND:
        raise NearSingularGammaError(f"|gamma_1| = {abs(gamma1):.3g} is below {GAMMA1_BOUND}")


def _zeta2_values(gamma: np.ndarray, features: np.ndarray) -> np.ndarray:
    g1, g2, g3 = gamma
    s1, s2 = features[:, 0], features[:, 1]
    return s1 * g1 * (1.0 + s2 * g3) - (g2 + s2 * g3) / (s1 * g1)


def _zeta2_jacobian(gamma: np.ndarray, features: np.ndarray) -> np.ndarray:
    g1, g2, g3 = gamma
    s1, s2 = features[:, 0], features[:, 1]
    return np.column_stack(
        [
            s1 * (1.0 + s2 * g3) + (g2 + s2 * g3) / (s1 * g1 * g1),
            -1.0 / (s1 * g1),
            s1 * g1 * s2 - s2 / (s1 * g1),
        ]
    )


def _zeta3_values(gamma: np.ndarray, features: np.ndarray) -> np.ndarray:
    g1, g2, g3, g4, g5, g6 = gamma
    s1, s2, s3, s4 = features.T
    inner = 1.0 + g3 * s2 + 4.0 * g3 * g3 * s2 * s2 + g5 * s3 + g6 * s4
    outer = g2 + g3 * s2 + 7.0 * g3 * g3 * s2 * s2 + g4 * s2 + 3.0 * g5 * s3 + 3.0 * g6 * s4
    return g1 * s1 * inner - outer / (g1 * s1)


def _zeta3_jacobian(gamma: np.ndarray, features: np.ndarray) -> np.ndarray:
    g1, g2, g3, g4, g5, g6 = gamma
    s1, s2, s3, s4 = features.T
    inner = 1.0 + g3 * s2 + 4.0 * g3 * g3 * s2 * s2 + g5 * s3 + g6 * s4
    outer = g2 + g3 * s2 + 7.0 * g3 * g3 * s2 * s2 + g4 * s2 + 3.0 * g5 * s3 + 3.0 * g6 * s4
    scale = g1 * s1
    return np.column_stack(
        [
            s1 * inner + outer / (g1 * g1 * s1),
            -1.0 / scale,
            scale * (s2 + 8.0 * g3 * s2 * s2) - (s2 + 14.0 * g3 * s2 * s2) / scale,
            -s2 / scale,
            scale * s3 - 3.0 * s3 / scale,
            scale * s4 - 3.0 * s4 / scale,
        ]
    )


def zeta2(gamma: Sequence[float], scales: Union[ScaleTuple, Sequence[float]]) -> float:
    """Two-step z surface at one- or two-step scales.

    Raises:
        NearSingularGammaError: if |gamma_1| < 1e-6.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (3,):
        raise DomainError(f"zeta2 takes three coefficients, got {gamma.size}")
    features = scale_features(scales)
    if features.s3 or features.s4:
        raise DomainError("zeta2 is defined for one- and two-step scales only")
    check_gamma1(gamma[0])
    return float(_zeta2_values(gamma, np.array([features]))[0])


def zeta3(gamma: Sequence[float], scales: Union[ScaleTuple, Sequence[float]]) -> float:
    """Three-step z surface, also evaluated at one- and two-step scales.

    Raises:
        NearSingularGammaError: if |gamma_1| < 1e-6.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (6,):
        raise DomainError(f"zeta3 takes six coefficients, got {gamma.size}")
    check_gamma1(gamma[0])
    return float(_zeta3_values(gamma, np.array([scale_features(scales)]))[0])


def default_ridge_weights(order: int, weight: float = DEFAULT_RIDGE) -> np.ndarray:
    """Ridge weights (0, 0, w, ..., w): gamma_1 and gamma_2 are never penalized."""
    if order not in (3, 6):
        raise DomainError(f"Fit order must be 3 or 6, got {order}")
    if weight < 0:
        raise DomainError(f"Ridge weight must be nonnegative, got {weight}")
    omega = np.full(order, float(weight))
    omega[:2] = 0.0
    return omega


def initial_gamma(table: Cells, order: int) -> np.ndarray:
    """Start from gamma_1 = v_hat of the one-step fit and zero elsewhere."""
    v_hat = fit_onestep(table).v_hat
    sign = -1.0 if v_hat < 0 else 1.0
    gamma = np.zeros(order)
    gamma[0] = sign * max(abs(v_hat), _MIN_INIT)
    return gamma


class _Problem(NamedTuple):
    values: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray]
    features: np.ndarray
    z: np.ndarray
    w: np.ndarray
    penalty: np.ndarray

    def residuals(self, gamma: np.ndarray) -> np.ndarray:
        return self.z - self.values(gamma, self.features)

    def objective(self, gamma: np.ndarray) -> float:
        r = self.residuals(gamma)
        return float(np.sum(self.w * r * r) + np.sum(self.penalty * gamma * gamma))


def _project(gamma: np.ndarray, sign: float) -> np.ndarray:
    if abs(gamma[0]) < GAMMA1_BOUND:
        gamma = gamma.copy()
        gamma[0] = sign * GAMMA1_BOUND
    return gamma


def _levenberg_marquardt(problem: _Problem, gamma: np.ndarray, damping: float):
    """Minimize the penalized objective; returns (gamma, objective, iterations)."""
    sign = -1.0 if gamma[0] < 0 else 1.0
    gamma = _project(gamma.astype(float), sign)
    current = problem.objective(gamma)
    exact = _EXACT_FIT * float(np.sum(problem.w * problem.z * problem.z))
    gradient_norm = math.inf
    for iteration in range(1, MAX_ITERATIONS + 1):
        jac = problem.jacobian(gamma, problem.features)
        hessian = jac.T @ (problem.w[:, None] * jac) + np.diag(problem.penalty)
        descent = jac.T @ (problem.w * problem.residuals(gamma)) - problem.penalty * gamma
        gradient_norm = float(np.linalg.norm(descent))
        diagonal = np.diag(hessian)
        diagonal = np.maximum(diagonal, 1e-12 * max(float(diagonal.max()), 1.0))
        while True:
            try:
                step = np.linalg.solve(hessian + damping * np.diag(diagonal), descent)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                candidate = _project(gamma + step, sign)
                trial = problem.objective(candidate)
                if math.isfinite(trial) and trial <= current:
                    break
            damping *= 10.0
            if damping > _MAX_DAMPING:
                if gradient_norm <= _STALL_GRADIENT * (1.0 + current):
                    return gamma, current, iteration
                raise FitConvergenceError(
                    "Damped Gauss-Newton step cannot decrease the objective", gamma, gradient_norm
                )
        decrease = current - trial
        gamma, current = candidate, trial
        logger.debug(f"Iteration {iteration}: objective {current:.12g}, damping {damping:.1e}")
        if current <= exact:
            return gamma, current, iteration
        if decrease <= RELATIVE_DECREASE * current and damping <= 1.0:
            return gamma, current, iteration
        damping = max(damping / 10.0, _MIN_DAMPING)
    raise FitConvergenceError(
        f"No convergence within {MAX_ITERATIONS} iterations", gamma, gradient_norm
    )


def fit_multistep(
    table: Cells,
    order: int,
    ridge_weights: Optional[Sequence[float]] = None,
    init: Optional[Sequence[float]] = None,
) -> GammaFit:
    """Fit zeta2 (order 3, cells with k <= 2) or zeta3 (order 6, all cells).

    Minimizes sum_i w_i (z_i - zeta(gamma; scales_i))^2 + B * sum_j omega_j gamma_j^2
    with w_i = 1 / var_z_i and B the mean cell B. A fit that does not converge
    is retried with heavier initial damping.

    Args:
        table: the bootstrap table or its cells.
        order: 3 or 6.
        ridge_weights: omega; None fits without penalty.
        init: starting coefficients; by default derived from the one-step fit.

    Raises:
        DegenerateDesignError: fewer distinct cells than coefficients.
        FitConvergenceError: no convergence after all attempts.
        NearSingularGammaError: gamma_1 ends pinned at its bound.
    """
    if order not in (3, 6):
        raise DomainError(f"Fit order must be 3 or 6, got {order}")
    cells = [cell for cell in _cells(table) if cell.k <= (2 if order == 3 else 3)]
    distinct = {cell.scales.taus for cell in cells}
    if len(distinct) < order:
        raise DegenerateDesignError(
            f"An order {order} fit needs {order} distinct cells, got {len(distinct)}"
        )
    omega = np.zeros(order) if ridge_weights is None else np.asarray(ridge_weights, float)
    if omega.shape != (order,) or np.any(omega < 0):
        raise DomainError(f"Ridge weights must be {order} nonnegative reals, got {omega}")
    start = initial_gamma(cells, order) if init is None else np.asarray(init, dtype=float)
    if start.shape != (order,):
        raise DomainError(f"Initial coefficients must have length {order}")
    check_gamma1(start[0])

    values, jacobian = (
        (_zeta2_values, _zeta2_jacobian) if order == 3 else (_zeta3_values, _zeta3_jacobian)
    )
    mean_b = float(np.mean([cell.B for cell in cells]))
    problem = _Problem(
        values=values,
        jacobian=jacobian,
        features=np.array([scale_features(cell.scales) for cell in cells]),
        z=np.array([cell.z for cell in cells]),
        w=1.0 / np.array([cell.var_z for cell in cells]),
        penalty=mean_b * omega,
    )

    for attempt in Retrying(
        stop=stop_after_attempt(FIT_ATTEMPTS),
        retry=retry_if_exception_type(FitConvergenceError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            damping = INITIAL_DAMPING * 100.0 ** (attempt.retry_state.attempt_number - 1)
            gamma, objective, iterations = _levenberg_marquardt(problem, start, damping)

    if abs(gamma[0]) <= GAMMA1_BOUND:
        raise NearSingularGammaError(f"gamma_1 is pinned at the bound {GAMMA1_BOUND}")
    jac = problem.jacobian(gamma, problem.features)
    information = jac.T @ (problem.w[:, None] * jac) + np.diag(problem.penalty)
    try:
        cov = np.linalg.inv(information)
    except np.linalg.LinAlgError as error:
        raise DegenerateDesignError(f"Singular information matrix: {error}") from error
    residuals = problem.residuals(gamma)
    rss = float(np.sum(problem.w * residuals * residuals))
    logger.info(
        f"Order {order} fit on {len(cells)} cells converged in {iterations} iterations "
        f"(objective {objective:.6g})"
    )
    return GammaFit(order, gamma, (cov + cov.T) / 2.0, omega, rss, objective, iterations)


def fit_report_rows(fits: Dict[str, Union[LinearFit, GammaFit]]) -> List[dict]:
    """Flatten fits into rows of (fit, coefficient, estimate, se, rss, objective, iterations)."""
    rows = []
    for name, fit in fits.items():
        if isinstance(fit, LinearFit):
            names: Iterable[str] = ("v", "c")
            estimates = (fit.v_hat, fit.c_hat)
            objective, iterations = fit.rss, 0
        else:
            names = (f"gamma{j + 1}" for j in range(fit.order))
            estimates = fit.gamma
            objective, iterations = fit.objective, fit.iterations
        for coefficient, estimate, se in zip(names, estimates, fit.se):
            rows.append(
                {
                    "fit": name,
                    "coefficient": coefficient,
                    "estimate": float(estimate),
                    "se": float(se),
                    "rss": fit.rss,
                    "objective": objective,
                    "iterations": iterations,
                }
            )
    return rows
