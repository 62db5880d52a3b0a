# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

import logging
import math

from regionboot.analysis import CoverageResult

logger = logging.getLogger(__name__)


def binomial_bound(alpha: float, trials: int, sigmas: float = 4.0) -> float:
    """Half-width of a band of ``sigmas`` binomial standard errors around ``alpha``."""
    return sigmas * math.sqrt(alpha * (1.0 - alpha) / trials)


def assert_rejects_at(result: CoverageResult, level: float, tolerance: float):
    """Assert that a coverage run rejects within ``tolerance`` of ``level``."""
    logger.info(f"{result.method.value}: {result.frequency:.4f} (se {result.se:.4f})")
    assert abs(result.frequency - level) <= tolerance, result.as_row()
