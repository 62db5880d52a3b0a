# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Run configuration.

Options are declared in ``config.yaml`` next to this module. A run takes the
declared defaults, then the entries of an optional key=value file, then
command-line flags, each layer overriding the previous one.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from regionboot.exceptions import ConfigError
from regionboot.fit import default_ridge_weights
from regionboot.pvalue import Method

logger = logging.getLogger(__name__)

OPTIONS_FILE = Path(__file__).with_name("config.yaml")
SPHERICAL_NAMES = ("spherical", "normal")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _key(name: str) -> str:
    return name.strip().replace("-", "_")


def load_options(path: Path = OPTIONS_FILE) -> Dict[str, dict]:
    """Return the option declarations, keyed by field name."""
    declared = yaml.safe_load(path.read_text())["options"]
    return {_key(name): spec for name, spec in declared.items()}


def option_defaults(path: Path = OPTIONS_FILE) -> Dict[str, Any]:
    """Return the declared defaults of the options that have one."""
    options = load_options(path)
    return {name: spec["default"] for name, spec in options.items() if "default" in spec}


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a file of ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as error:
        raise ConfigError(f"Cannot read config file {path}: {error}") from error
    known = load_options()
    entries = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        key = _key(key)
        if key not in known:
            raise ConfigError(f"{path}:{number}: unknown option {key!r}")
        entries[key] = value.strip()
    return entries


def generate_seed() -> int:
    """Draw a fresh 64-bit master seed from operating-system entropy."""
    return int(np.random.SeedSequence().generate_state(1, np.uint64)[0])


def _floats(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(float(v) for v in value.split(",") if v.strip())
    return value


class RunConfig(BaseModel):
    """Validated options of one command-line run."""

    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    model: str
    p: int = Field(ge=1)
    n: float = Field(ge=2)
    xbar_norm2: Optional[float] = Field(default=None, ge=0)
    xbar: Optional[Tuple[float, ...]] = None
    target: Optional[float] = Field(default=None, gt=0, lt=1)
    mode: Literal["mc", "oracle"]
    b: int = Field(ge=100)
    nominal_b: int = Field(ge=1)
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    methods: Tuple[Method, ...]
    ridge: Optional[Tuple[float, ...]] = None
    scales_file: Optional[Path] = None
    table_in: Optional[Path] = None
    out_dir: Path
    workers: int = Field(ge=1)
    log_level: str
    trials: int = Field(ge=1)
    level: float = Field(gt=0, lt=1)
    method: Method
    rows: str

    @model_validator(mode="before")
    @classmethod
    def _blank_is_unset(cls, data: Any) -> Any:
        if isinstance(data, Mapping):
            return {k: v for k, v in data.items() if not (isinstance(v, str) and not v.strip())}
        return data

    @field_validator("xbar", mode="before")
    @classmethod
    def _parse_xbar(cls, value: Any) -> Any:
        return _floats(value)

    @field_validator("methods", mode="before")
    @classmethod
    def _parse_methods(cls, value: Any) -> Any:
        return tuple(Method.parse(value))

    @field_validator("ridge", mode="before")
    @classmethod
    def _parse_ridge(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() == "none":
            return None
        if isinstance(value, str) and value.strip().lower() == "default":
            return tuple(default_ridge_weights(6))
        return _floats(value)

    @field_validator("ridge")
    @classmethod
    def _check_ridge(cls, value: Optional[Tuple[float, ...]]) -> Optional[Tuple[float, ...]]:
        if value is not None and (len(value) != 6 or any(w < 0 for w in value)):
            raise ValueError("ridge must be none, default or six nonnegative reals")
        return value

    @field_validator("log_level")
    @classmethod
    def _check_log_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {LOG_LEVELS}")
        return value

    @model_validator(mode="after")
    def _check_observation(self) -> "RunConfig":
        given = [v for v in (self.xbar_norm2, self.xbar, self.target) if v is not None]
        if len(given) > 1:
            raise ValueError("give at most one of xbar-norm2, xbar and target")
        if self.xbar_norm2 is not None and self.model.lower() not in SPHERICAL_NAMES:
            raise ValueError("xbar-norm2 applies to the spherical model only")
        return self

    @classmethod
    def from_sources(
        cls, config_file: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None
    ) -> "RunConfig":
        """Layer option defaults, an optional key=value file and explicit overrides.

        Raises:
            ConfigError: on a malformed file or any invalid option.
        """
        values = option_defaults()
        if config_file is not None:
            values.update(read_config_file(config_file))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls(**values)
        except ValidationError as error:
            problems = "; ".join(
                f"{'.'.join(str(part) for part in e['loc']) or 'config'}: {e['msg']}"
                for e in error.errors()
            )
            raise ConfigError(f"Invalid configuration: {problems}") from error

    @property
    def has_observation(self) -> bool:
        """Whether the observation is given through xbar or xbar_norm2."""
        return any(v is not None for v in (self.xbar_norm2, self.xbar, self.target))

    def resolve_seed(self) -> int:
        """Return the configured seed, generating and reporting one when unset."""
        if self.seed is not None:
            return self.seed
        seed = generate_seed()
        logger.info(f"Generated master seed {seed}")
        return seed
