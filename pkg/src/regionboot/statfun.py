# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Special functions and random sampling primitives.

The normal, incomplete gamma and Poisson building blocks come from
``scipy.special``; randomness is addressed by ``RandomStream`` so that any draw
is fully determined by a master seed and a stream path, whatever the order in
which workers evaluate them.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import special

from regionboot.exceptions import DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

_SERIES_TOLERANCE = 1e-14
_SERIES_CHUNK = 64
# Poisson terms this many standard deviations below the mean carry no double mass
_SERIES_SKIP_SIGMAS = 40.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MAX_SEED = 2**64


def _unwrap(value: np.ndarray) -> ArrayLike:
    """Return a Python float for 0-d results, the array otherwise."""
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class RandomStream:
    """A reproducible random stream addressed by (master_seed, stream_path).

    The bit generator is the counter-based Philox keyed by a ``SeedSequence``
    whose spawn key is the stream path, so distinct paths give independent
    streams and the same path always replays the same draws.
    """

    master_seed: int
    stream_path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < _MAX_SEED:
            raise DomainError(f"master_seed must be a 64-bit unsigned integer: {self.master_seed}")
        path = tuple(int(i) for i in self.stream_path)
        if any(i < 0 for i in path):
            raise DomainError(f"stream_path entries must be nonnegative: {path}")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_path", path)

    def child(self, *path: int) -> "RandomStream":
        """Return the stream addressed by this path extended with ``path``."""
        return RandomStream(self.master_seed, self.stream_path + tuple(path))

    def generator(self) -> np.random.Generator:
        """Return a fresh generator positioned at the start of this stream."""
        seed_sequence = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=self.stream_path
        )
        return np.random.Generator(np.random.Philox(seed_sequence))


def std_normal_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal distribution function Phi(x)."""
    return _unwrap(special.ndtr(np.asarray(x, dtype=float)))


def std_normal_pdf(x: ArrayLike) -> ArrayLike:
    """Standard normal density phi(x)."""
    x = np.asarray(x, dtype=float)
    return _unwrap(_INV_SQRT_2PI * np.exp(-0.5 * x * x))


def std_normal_quantile(p: ArrayLike) -> ArrayLike:
    """Inverse of the standard normal distribution function.

    Raises:
        DomainError: if any probability lies outside the open interval (0, 1).
    """
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise DomainError(f"Normal quantile requires 0 < p < 1, got {p}")
    return _unwrap(special.ndtri(p))


def gamma_reg_lower(shape: ArrayLike, x: ArrayLike) -> ArrayLike:
    """Regularized lower incomplete gamma function P(shape, x).

    Raises:
        DomainError: for nonpositive shape or negative x.
    """
    shape = np.asarray(shape, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.all(shape > 0.0):
        raise DomainError(f"Gamma shape must be positive, got {shape}")
    if not np.all(x >= 0.0):
        raise DomainError(f"Incomplete gamma argument must be nonnegative, got {x}")
    return _unwrap(special.gammainc(shape, x))


def gamma_reg_upper(shape: ArrayLike, x: ArrayLike) -> ArrayLike:
    """Regularized upper incomplete gamma function Q(shape, x) = 1 - P(shape, x)."""
    shape = np.asarray(shape, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.all(shape > 0.0):
        raise DomainError(f"Gamma shape must be positive, got {shape}")
    if not np.all(x >= 0.0):
        raise DomainError(f"Incomplete gamma argument must be nonnegative, got {x}")
    return _unwrap(special.gammaincc(shape, x))


def noncentral_chisq_cdf(df: float, noncentrality: float, x: float) -> float:
    """Distribution function of the noncentral chi-square distribution.

    Evaluated as the Poisson(noncentrality / 2) mixture of central chi-square
    distribution functions. Terms are summed in chunks until the Poisson mass
    left, times the largest central term it can multiply, drops below
    1e-14 of the accumulated sum. Summation starts 40 Poisson standard
    deviations below the mean, so large noncentralities cost no more than
    moderate ones.

    Raises:
        DomainError: for nonpositive degrees of freedom, negative
            noncentrality or negative x.
    """
    if not df > 0:
        raise DomainError(f"Degrees of freedom must be positive, got {df}")
    if not noncentrality >= 0:
        raise DomainError(f"Noncentrality must be nonnegative, got {noncentrality}")
    if not x >= 0:
        raise DomainError(f"Chi-square argument must be nonnegative, got {x}")
    half_df = 0.5 * df
    half_x = 0.5 * x
    if x == 0:
        return 0.0
    if noncentrality == 0:
        return float(special.gammainc(half_df, half_x))

    lam = 0.5 * noncentrality
    total = 0.0
    start = max(0, int(lam - _SERIES_SKIP_SIGMAS * math.sqrt(lam)))
    while True:
        j = np.arange(start, start + _SERIES_CHUNK, dtype=float)
        weights = np.exp(special.xlogy(j, lam) - lam - special.gammaln(j + 1.0))
        total += float(np.sum(weights * special.gammainc(half_df + j, half_x)))
        last = j[-1]
        # the central terms decrease in j, so this bounds everything left
        remaining = float(special.pdtrc(last, lam)) * float(
            special.gammainc(half_df + last + 1.0, half_x)
        )
        if remaining <= _SERIES_TOLERANCE * total:
            break
        start += _SERIES_CHUNK
    return min(total, 1.0)


def sample_std_normal(stream: RandomStream, count: int) -> np.ndarray:
    """Return ``count`` i.i.d. standard normal draws from ``stream``."""
    if count < 0:
        raise DomainError(f"Sample count must be nonnegative, got {count}")
    return stream.generator().standard_normal(int(count))


def sample_gamma(
    stream: RandomStream, shape: float, scale: ArrayLike, size: Union[int, None] = None
) -> ArrayLike:
    """Draw Gamma(shape, scale) variates from ``stream``.

    ``scale`` may be an array, in which case one draw per entry is returned.
    Shapes below one are handled by numpy's boosted Marsaglia-Tsang sampler.

    Raises:
        DomainError: for nonpositive shape or scale.
    """
    scale = np.asarray(scale, dtype=float)
    if not shape > 0:
        raise DomainError(f"Gamma shape must be positive, got {shape}")
    if not np.all(scale > 0.0):
        raise DomainError("Gamma scale must be positive")
    draws = stream.generator().gamma(shape, scale, size=size)
    return _unwrap(np.asarray(draws))
