# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Problem-of-regions models: replicate generators paired with region indicators.

A model generates replicates ``Y* ~ f(y*; center, tau)`` and tells whether a
point lies in the null region R. Built-in analytic models additionally expose
deterministic oracles (exact bootstrap probabilities, the exact p-value, the
boundary projection and the acceleration constant). Optional capabilities are
declared explicitly; asking a model for one it lacks raises
``UnsupportedCapabilityError`` instead of approximating.

Models receive replicate centers in batches of shape ``(m, p)``. For models
built from i.i.d. sums, ``tau = sqrt(n / n')`` corresponds to resampling
``n'`` observations; how a plug-in honours ``tau`` is up to its author.
"""

import importlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, ClassVar, FrozenSet, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import integrate, optimize, special

from regionboot.exceptions import (
    ConfigError,
    DomainError,
    ReplicateError,
    UndefinedProjectionError,
    UnsupportedCapabilityError,
)
from regionboot.statfun import (
    RandomStream,
    gamma_reg_lower,
    gamma_reg_upper,
    noncentral_chisq_cdf,
    sample_gamma,
    sample_std_normal,
)

logger = logging.getLogger(__name__)

Point = np.ndarray

# relative slack on the spherical boundary so that projected points test inside
_BOUNDARY_SLACK = 1e-12
_QUAD_TOLERANCE = 1e-9
_QUAD_TAIL = 1e-13
_QUAD_LIMIT = 200


class Capability(str, Enum):
    """Optional model capabilities."""

    ONE_STEP_PROB = "one_step_prob"
    K_STEP_PROB = "k_step_prob"
    PROJECT_TO_BOUNDARY = "project_to_boundary"
    ACCELERATION = "acceleration"
    EXACT_PVALUE = "exact_pvalue"
    BOUNDARY_POINT = "boundary_point"


class SphericalGeometry(NamedTuple):
    """Signed distance, curvature traces and their combination c = d1 - v * d2."""

    v: float
    d1: float
    d2: float
    c: float


def as_point(coords: Union[float, Sequence[float], np.ndarray], p: Optional[int] = None) -> Point:
    """Validate and return a 1-D float point, optionally of dimension ``p``."""
    point = np.atleast_1d(np.asarray(coords, dtype=float))
    if point.ndim != 1 or point.size < 1:
        raise DomainError(f"A point must be a nonempty vector, got shape {point.shape}")
    if not np.all(np.isfinite(point)):
        raise DomainError(f"Point coordinates must be finite: {point}")
    if p is not None and point.size != p:
        raise DomainError(f"Point has dimension {point.size}, model expects {p}")
    return point


def _validate_taus(taus: Sequence[float]) -> tuple:
    taus = tuple(float(t) for t in taus)
    if not 1 <= len(taus) <= 3:
        raise DomainError(f"Between one and three scales are required, got {len(taus)}")
    if not all(t > 0 and math.isfinite(t) for t in taus):
        raise DomainError(f"Scales must be positive and finite: {taus}")
    return taus


class ModelSpec(ABC):
    """A replicate generator and region indicator with optional oracles.

    Attributes:
        name: model family name used in identifiers and error messages.
        p: dimension of the observation.
        n: base sample size defining the scale tau = sqrt(n / n').
        capabilities: the optional operations the model provides.
    """

    name: ClassVar[str] = "model"
    capabilities: ClassVar[FrozenSet[Capability]] = frozenset()

    p: int
    n: float

    @property
    def identifier(self) -> str:
        """Return a short description of the model and its parameters."""
        return f"{self.name}(p={self.p},n={self.n:g})"

    def supports(self, capability: Capability) -> bool:
        """Return whether the model provides ``capability``."""
        return capability in self.capabilities

    def require(self, capability: Capability) -> None:
        """Raise UnsupportedCapabilityError unless ``capability`` is provided."""
        if not self.supports(capability):
            raise UnsupportedCapabilityError(self.identifier, capability.value)

    def sample_replicate(
        self, center: np.ndarray, tau: float, stream: RandomStream
    ) -> np.ndarray:
        """Draw one replicate around each center at scale ``tau``.

        Args:
            center: a point of shape (p,) or a batch of shape (m, p).
            tau: the scale, any positive real.
            stream: the random stream all draws of this call come from.

        Returns:
            Replicates with the same shape as ``center``.
        """
        if not tau > 0:
            raise DomainError(f"Scale must be positive, got {tau}")
        centers = np.asarray(center, dtype=float)
        batch = np.atleast_2d(centers)
        if batch.shape[-1] != self.p:
            raise DomainError(f"Centers have dimension {batch.shape[-1]}, model expects {self.p}")
        draws = np.asarray(self._draw(batch, float(tau), stream), dtype=float)
        if draws.shape != batch.shape:
            raise ReplicateError(
                f"{self.identifier} returned replicates of shape {draws.shape}, "
                f"expected {batch.shape}"
            )
        if not np.all(np.isfinite(draws)):
            raise ReplicateError(f"{self.identifier} produced non-finite replicates")
        return draws.reshape(centers.shape)

    def in_region(self, point: np.ndarray) -> Union[bool, np.ndarray]:
        """Return whether the point (or each point of a batch) lies in R."""
        points = np.asarray(point, dtype=float)
        batch = np.atleast_2d(points)
        if batch.shape[-1] != self.p:
            raise DomainError(f"Point has dimension {batch.shape[-1]}, model expects {self.p}")
        inside = np.asarray(self._contains(batch), dtype=bool).reshape(batch.shape[0])
        return bool(inside[0]) if points.ndim <= 1 else inside

    @abstractmethod
    def _draw(self, centers: np.ndarray, tau: float, stream: RandomStream) -> np.ndarray:
        """Draw a batch of replicates; ``centers`` has shape (m, p)."""

    @abstractmethod
    def _contains(self, points: np.ndarray) -> np.ndarray:
        """Return a boolean vector of region membership for shape (m, p)."""

    def one_step_prob(self, y: Point, tau: float) -> float:
        """Exact one-step bootstrap probability Pr{Y* in R; y, tau}."""
        raise UnsupportedCapabilityError(self.identifier, Capability.ONE_STEP_PROB.value)

    def k_step_prob(self, y: Point, taus: Sequence[float]) -> float:
        """Exact multistep bootstrap probability for one to three scales."""
        raise UnsupportedCapabilityError(self.identifier, Capability.K_STEP_PROB.value)

    def project_to_boundary(self, y: Point) -> Point:
        """Return the restricted estimate of the mean on the boundary of R."""
        raise UnsupportedCapabilityError(self.identifier, Capability.PROJECT_TO_BOUNDARY.value)

    def acceleration(self) -> float:
        """Return the acceleration constant of the model."""
        raise UnsupportedCapabilityError(self.identifier, Capability.ACCELERATION.value)

    def exact_pvalue(self, y: Point) -> float:
        """Return the exact p-value of the region hypothesis at ``y``."""
        raise UnsupportedCapabilityError(self.identifier, Capability.EXACT_PVALUE.value)

    def boundary_point(self) -> Point:
        """Return a parameter value on the boundary of R."""
        raise UnsupportedCapabilityError(self.identifier, Capability.BOUNDARY_POINT.value)


@dataclass(frozen=True)
class SphericalNormalModel(ModelSpec):
    """Y ~ N_p(eta, I_p) with the ball R = {eta : ||eta|| <= sqrt(n)}."""

    p: int
    n: float

    name: ClassVar[str] = "spherical"
    capabilities: ClassVar[FrozenSet[Capability]] = frozenset(Capability)

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise DomainError(f"Dimension must be a positive integer, got {self.p}")
        if not self.n > 0:
            raise DomainError(f"Sample size must be positive, got {self.n}")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "n", float(self.n))

    def _draw(self, centers: np.ndarray, tau: float, stream: RandomStream) -> np.ndarray:
        noise = sample_std_normal(stream, centers.size).reshape(centers.shape)
        return centers + tau * noise

    def _contains(self, points: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", points, points) <= self.n * (1.0 + _BOUNDARY_SLACK)

    def one_step_prob(self, y: Point, tau: float) -> float:
        """Noncentral chi-square probability of the ball at scale tau."""
        y = as_point(y, self.p)
        if not tau > 0:
            raise DomainError(f"Scale must be positive, got {tau}")
        tau2 = tau * tau
        return noncentral_chisq_cdf(self.p, float(y @ y) / tau2, self.n / tau2)

    def k_step_prob(self, y: Point, taus: Sequence[float]) -> float:
        """One-step probability at the combined scale sqrt(sum tau_i^2)."""
        # normal steps add variances
        taus = _validate_taus(taus)
        return self.one_step_prob(y, math.sqrt(sum(t * t for t in taus)))

    def project_to_boundary(self, y: Point) -> Point:
        """Radial projection of y onto the sphere of radius sqrt(n)."""
        y = as_point(y, self.p)
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            raise UndefinedProjectionError("The origin has no unique projection on the sphere")
        return math.sqrt(self.n) * y / norm

    def spherical_geometry(self, y: Point) -> SphericalGeometry:
        """Return the exact geometric quantities (v, d1, d2, c) at ``y``."""
        y = as_point(y, self.p)
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            raise UndefinedProjectionError("Geometry is undefined at the origin")
        root_n = math.sqrt(self.n)
        v = norm - root_n
        d1 = (self.p - 1) / (2.0 * root_n)
        d2 = (self.p - 1) / (4.0 * self.n)
        return SphericalGeometry(v=v, d1=d1, d2=d2, c=d1 - v * d2)

    def acceleration(self) -> float:
        """The normal model has no acceleration."""
        return 0.0

    def exact_pvalue(self, y: Point) -> float:
        """Pr{||Y||^2 >= ||y||^2} with eta on the boundary."""
        y = as_point(y, self.p)
        return 1.0 - noncentral_chisq_cdf(self.p, self.n, float(y @ y))

    def boundary_point(self) -> Point:
        """Return (sqrt(n), 0, ..., 0)."""
        eta = np.zeros(self.p)
        eta[0] = math.sqrt(self.n)
        return eta


@dataclass(frozen=True)
class ExponentialMeanModel(ModelSpec):
    """Y = sqrt(n) * mean of n exponentials, Gamma(shape n, mean eta); R = {y <= sqrt(n)}."""

    n: float

    name: ClassVar[str] = "exponential"
    capabilities: ClassVar[FrozenSet[Capability]] = frozenset(Capability)

    def __post_init__(self):
        if not self.n > 0:
            raise DomainError(f"Sample size must be positive, got {self.n}")
        object.__setattr__(self, "n", float(self.n))

    @property
    def p(self) -> int:
        """The exponential model is one-dimensional."""
        return 1

    def _scalar(self, y: Point) -> float:
        return float(as_point(y, 1)[0])

    def _draw(self, centers: np.ndarray, tau: float, stream: RandomStream) -> np.ndarray:
        if not np.all(centers > 0.0):
            raise DomainError("The mean of a Gamma replicate must be positive")
        shape = self.n / (tau * tau)
        return np.asarray(sample_gamma(stream, shape, centers / shape), dtype=float)

    def _contains(self, points: np.ndarray) -> np.ndarray:
        return points[:, 0] <= math.sqrt(self.n)

    def _one_step(self, y: float, tau: float) -> float:
        if not y > 0:
            raise DomainError(f"The exponential model requires a positive observation, got {y}")
        shape = self.n / (tau * tau)
        return gamma_reg_lower(shape, math.sqrt(self.n) * shape / y)

    def _nested(self, y: float, taus: tuple) -> float:
        """Integrate the inner steps against the Gamma transition of the first step."""
        if len(taus) == 1:
            return self._one_step(y, taus[0])
        shape = self.n / (taus[0] * taus[0])
        theta = y / shape
        inner = taus[1:]
        # work in u = log(Y* / theta), where Y* / theta ~ Gamma(shape, 1)
        lower = math.log(special.gammaincinv(shape, _QUAD_TAIL))
        upper = math.log(special.gammainccinv(shape, _QUAD_TAIL))
        log_norm = special.gammaln(shape)

        def integrand(u: float) -> float:
            g = math.exp(u)
            return self._nested(theta * g, inner) * math.exp(shape * u - g - log_norm)

        boundary = math.log(math.sqrt(self.n) / theta)
        points = [boundary] if lower < boundary < upper else None
        value, abserr = integrate.quad(
            integrand,
            lower,
            upper,
            points=points,
            epsabs=_QUAD_TOLERANCE,
            epsrel=_QUAD_TOLERANCE,
            limit=_QUAD_LIMIT,
        )
        logger.debug(f"Quadrature at y={y:.6g}, taus={taus}: {value:.10g} (error {abserr:.2e})")
        return min(max(value, 0.0), 1.0)

    def one_step_prob(self, y: Point, tau: float) -> float:
        """Gamma probability of the half line at scale tau."""
        if not tau > 0:
            raise DomainError(f"Scale must be positive, got {tau}")
        return self._one_step(self._scalar(y), float(tau))

    def k_step_prob(self, y: Point, taus: Sequence[float]) -> float:
        """Multistep probability by nested quadrature over the earlier steps."""
        return self._nested(self._scalar(y), _validate_taus(taus))

    def project_to_boundary(self, y: Point) -> Point:
        """The boundary is the single point sqrt(n)."""
        self._scalar(y)
        return np.array([math.sqrt(self.n)])

    def acceleration(self) -> float:
        """Acceleration 1 / (3 sqrt(n)) of the Gamma mean."""
        return 1.0 / (3.0 * math.sqrt(self.n))

    def exact_pvalue(self, y: Point) -> float:
        """Pr{Y >= y} with the mean on the boundary."""
        y = self._scalar(y)
        if y <= 0:
            return 1.0
        return gamma_reg_upper(self.n, y * math.sqrt(self.n))

    def boundary_point(self) -> Point:
        """Return sqrt(n)."""
        return np.array([math.sqrt(self.n)])


class CallableModel(ModelSpec):
    """A user-supplied model built from a sampler and a region indicator.

    ``sampler(centers, tau, stream)`` receives centers of shape (m, p) and must
    return replicates of the same shape; ``indicator(points)`` returns a boolean
    vector of length m. The model provides no optional capabilities.
    """

    def __init__(
        self,
        name: str,
        p: int,
        n: float,
        sampler: Callable[[np.ndarray, float, RandomStream], np.ndarray],
        indicator: Callable[[np.ndarray], np.ndarray],
    ):
        if int(p) != p or p < 1:
            raise DomainError(f"Dimension must be a positive integer, got {p}")
        if not n > 0:
            raise DomainError(f"Sample size must be positive, got {n}")
        self._name = name
        self.p = int(p)
        self.n = float(n)
        self._sampler = sampler
        self._indicator = indicator

    @property
    def identifier(self) -> str:
        """Return the user-given name with the model parameters."""
        return f"{self._name}(p={self.p},n={self.n:g})"

    def _draw(self, centers: np.ndarray, tau: float, stream: RandomStream) -> np.ndarray:
        return self._sampler(centers, tau, stream)

    def _contains(self, points: np.ndarray) -> np.ndarray:
        return self._indicator(points)


def observation_from_xbar(
    model: ModelSpec,
    xbar: Optional[Sequence[float]] = None,
    xbar_norm2: Optional[float] = None,
) -> Point:
    """Return the transformed observation y = sqrt(n) * xbar.

    ``xbar_norm2`` gives ||xbar||^2 instead and places y on the first axis.
    """
    if (xbar is None) == (xbar_norm2 is None):
        raise ConfigError("Give exactly one of xbar and xbar_norm2")
    root_n = math.sqrt(model.n)
    if xbar_norm2 is not None:
        if xbar_norm2 < 0:
            raise DomainError(f"||xbar||^2 must be nonnegative, got {xbar_norm2}")
        y = np.zeros(model.p)
        y[0] = math.sqrt(model.n * xbar_norm2)
        return y
    return root_n * as_point(xbar, model.p)


def solve_observation(model: ModelSpec, target: float) -> Point:
    """Find the observation on the ray through the boundary point with exact p-value ``target``."""
    model.require(Capability.EXACT_PVALUE)
    model.require(Capability.BOUNDARY_POINT)
    if not 0 < target < 1:
        raise DomainError(f"Target p-value must lie in (0, 1), got {target}")
    eta = model.boundary_point()
    direction = eta / np.linalg.norm(eta)

    def excess(t: float) -> float:
        return model.exact_pvalue(t * direction) - target

    lower = 1e-9
    upper = float(np.linalg.norm(eta)) + 10.0
    for _ in range(60):
        if excess(upper) < 0:
            break
        upper *= 2.0
    else:
        raise DomainError(f"Cannot bracket an observation with exact p-value {target}")
    t = optimize.brentq(excess, lower, upper, xtol=1e-13, maxiter=200)
    logger.info(f"Observation for exact p-value {target} in {model.identifier}: ||y|| = {t:.10g}")
    return t * direction


def build_model(name: str, p: int = 1, n: float = 10.0) -> ModelSpec:
    """Build a model by name, or load a plug-in given as ``package.module:factory``.

    Plug-in factories are called as ``factory(p=p, n=n)`` and must return a
    ModelSpec instance.
    """
    key = name.strip().lower()
    if key in ("spherical", "normal"):
        return SphericalNormalModel(p=p, n=n)
    if key == "exponential":
        if p != 1:
            raise ConfigError(f"The exponential model is one-dimensional, got p={p}")
        return ExponentialMeanModel(n=n)
    if ":" in name:
        module_name, _, attribute = name.partition(":")
        try:
            factory = getattr(importlib.import_module(module_name), attribute)
        except (ImportError, AttributeError) as error:
            raise ConfigError(f"Cannot load model plug-in {name}: {error}") from error
        try:
            model = factory(p=p, n=n)
        except TypeError as error:
            raise ConfigError(f"Cannot call plug-in {name} as factory(p, n): {error}") from error
        if not isinstance(model, ModelSpec):
            raise ConfigError(f"Plug-in {name} did not return a ModelSpec")
        return model
    raise ConfigError(f"Unknown model: {name}")
