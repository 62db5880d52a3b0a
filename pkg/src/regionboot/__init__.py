# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Multistep-multiscale bootstrap p-values for the problem of regions."""

from regionboot.exceptions import ErrorWithStatus, ExitStatus
from regionboot.model import (
    CallableModel,
    Capability,
    ExponentialMeanModel,
    ModelSpec,
    SphericalNormalModel,
    build_model,
)
from regionboot.statfun import RandomStream

__all__ = [
    "CallableModel",
    "Capability",
    "ErrorWithStatus",
    "ExitStatus",
    "ExponentialMeanModel",
    "ModelSpec",
    "RandomStream",
    "SphericalNormalModel",
    "build_model",
]
