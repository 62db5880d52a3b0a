# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Multistep-multiscale bootstrap tables.

A table holds one cell per scale tuple. In Monte Carlo mode a cell counts how
many of B replicate chains ``y -> y* (-> y** (-> y***))`` end in the region;
in oracle mode the model's exact probabilities take the place of the counts
and a nominal B only sets the weights used by the fits.

Chains are generated in blocks of ``BLOCK_SIZE``. Step ``s`` of block ``b`` in
cell ``i`` draws from the stream ``(i, b, s)`` below the master seed, so a
table depends on the seed alone and never on how blocks are spread over
workers.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pathos.multiprocessing import ProcessPool as Pool

from regionboot.exceptions import CellError, ConfigError, DomainError
from regionboot.model import Capability, ModelSpec, as_point
from regionboot.statfun import RandomStream, std_normal_pdf, std_normal_quantile

logger = logging.getLogger(__name__)

BLOCK_SIZE = 16384
DEFAULT_NOMINAL_B = 10_000
MIN_PLAN_B = 100

# n'/n ratios of the first step and the later steps
FIRST_STEP_RATIOS = (0.3, 0.6, 1.0, 1.5, 2.1)
LATER_STEP_RATIOS = (0.6, 1.5)

TABLE_COLUMNS = ["k", "tau1", "tau2", "tau3", "B", "count", "alpha", "z", "var_z"]
SCALE_COLUMNS = ["tau1", "tau2", "tau3"]


@dataclass(frozen=True)
class ScaleTuple:
    """Scales (tau1[, tau2[, tau3]]) of a one-, two- or three-step bootstrap."""

    taus: Tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not 1 <= len(taus) <= 3:
            raise DomainError(f"A scale tuple has one to three scales, got {len(taus)}")
        if not all(t > 0 and math.isfinite(t) for t in taus):
            raise DomainError(f"Scales must be positive and finite: {taus}")
        object.__setattr__(self, "taus", taus)

    @classmethod
    def from_squares(cls, *squares: float) -> "ScaleTuple":
        """Build a scale tuple from the squared scales."""
        if any(not s > 0 for s in squares):
            raise DomainError(f"Squared scales must be positive: {squares}")
        return cls(tuple(math.sqrt(s) for s in squares))

    @property
    def k(self) -> int:
        """Number of bootstrap steps."""
        return len(self.taus)

    @property
    def combined(self) -> float:
        """Scale sqrt(tau1^2 + ...) of the equivalent one-step normal bootstrap."""
        return math.sqrt(sum(t * t for t in self.taus))

    def padded(self) -> Tuple[Optional[float], ...]:
        """Return (tau1, tau2, tau3) with None for absent steps."""
        return self.taus + (None,) * (3 - self.k)


@dataclass(frozen=True)
class ScalePlan:
    """Ordered scale tuples and the number of chains per cell."""

    cells: Tuple[ScaleTuple, ...]
    replicates_per_cell: int

    def __post_init__(self):
        cells = tuple(self.cells)
        if not cells:
            raise DomainError("A scale plan needs at least one cell")
        if int(self.replicates_per_cell) < MIN_PLAN_B:
            raise DomainError(
                f"A scale plan needs at least {MIN_PLAN_B} replicates per cell, "
                f"got {self.replicates_per_cell}"
            )
        steps = [cell.k for cell in cells]
        if steps != sorted(steps):
            raise DomainError("Plan cells must be ordered by their number of steps")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "replicates_per_cell", int(self.replicates_per_cell))

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class BootstrapCell:
    """Outcome of one cell: count out of B, its probability, z-value and z variance."""

    scales: ScaleTuple
    B: int
    count: float
    alpha: float
    z: float
    var_z: float

    @property
    def k(self) -> int:
        """Number of bootstrap steps of the cell."""
        return self.scales.k


@dataclass(frozen=True)
class BootstrapTable:
    """Cells of a scale plan together with the provenance of the run."""

    cells: Tuple[BootstrapCell, ...]
    model_id: str
    observation: np.ndarray = field(compare=False)
    master_seed: Optional[int] = None
    mode: str = "mc"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "observation", np.asarray(self.observation, dtype=float))

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def identifier(self) -> str:
        """Return a short description of the run that produced the table."""
        seed = "" if self.master_seed is None else f",seed={self.master_seed}"
        return f"{self.mode}(cells={len(self.cells)}{seed})"

    def up_to(self, max_k: int) -> List[BootstrapCell]:
        """Return the cells with at most ``max_k`` steps, in table order."""
        return [cell for cell in self.cells if cell.k <= max_k]

    def one_step(self) -> List[BootstrapCell]:
        """Return the one-step cells."""
        return self.up_to(1)

    def find_one_step(self, tau: float, tolerance: float = 1e-9) -> Optional[BootstrapCell]:
        """Return the one-step cell at scale ``tau``, if the table has one."""
        for cell in self.one_step():
            if abs(cell.scales.taus[0] - tau) <= tolerance:
                return cell
        return None

    def to_frame(self) -> pd.DataFrame:
        """Return the table in the interchange CSV schema."""
        rows = []
        for cell in self.cells:
            tau1, tau2, tau3 = cell.scales.padded()
            rows.append(
                {
                    "k": cell.k,
                    "tau1": tau1,
                    "tau2": tau2,
                    "tau3": tau3,
                    "B": cell.B,
                    "count": cell.count,
                    "alpha": cell.alpha,
                    "z": cell.z,
                    "var_z": cell.var_z,
                }
            )
        return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def default_scale_plan(n: float, B: int) -> ScalePlan:
    """Return the 5 + 10 + 20 cell plan with scales tau^2 = n / n'.

    The first step resamples n' = 0.3n, 0.6n, n, 1.5n and 2.1n observations,
    later steps n' = 0.6n and 1.5n.
    """
    if not n >= 2:
        raise DomainError(f"Sample size must be at least 2, got {n}")
    first = [1.0 / r for r in FIRST_STEP_RATIOS]
    later = [1.0 / r for r in LATER_STEP_RATIOS]
    cells = [ScaleTuple.from_squares(s1) for s1 in first]
    cells += [ScaleTuple.from_squares(s1, s2) for s1 in first for s2 in later]
    cells += [
        ScaleTuple.from_squares(s1, s2, s3) for s1 in first for s2 in later for s3 in later
    ]
    return ScalePlan(tuple(cells), B)


def read_scale_plan(path: Union[str, Path], B: int) -> ScalePlan:
    """Read scales from a CSV with columns tau1, tau2, tau3 (blank for absent steps).

    Cells are stably reordered by number of steps.
    """
    frame = _read_csv(path)
    if "tau1" not in frame.columns:
        raise ConfigError(f"Scale file {path} has no tau1 column")
    cells = []
    for row in frame.itertuples(index=False):
        taus = [getattr(row, name) for name in SCALE_COLUMNS if name in frame.columns]
        cells.append(ScaleTuple(tuple(t for t in taus if not pd.isna(t))))
    cells.sort(key=lambda cell: cell.k)
    return ScalePlan(tuple(cells), B)


def transform_cell(count: float, B: int) -> Tuple[float, float, float]:
    """Convert a count out of B into (alpha, z, var_z).

    The count is clamped to [0.5, B - 0.5] so that z stays finite, and the
    variance of z follows from the binomial variance by the delta method.
    """
    if B < 1:
        raise DomainError(f"B must be at least 1, got {B}")
    if not 0 <= count <= B:
        raise DomainError(f"Count must lie in [0, B], got {count} of {B}")
    clamped = min(max(count, 0.5), B - 0.5)
    alpha = clamped / B
    return alpha, -std_normal_quantile(alpha), _z_variance(alpha, B)


def _z_variance(alpha: float, B: float) -> float:
    density = std_normal_pdf(std_normal_quantile(alpha))
    if density == 0.0:
        return math.inf
    return alpha * (1.0 - alpha) / (B * density * density)


def oracle_cell(scales: ScaleTuple, alpha: float, nominal_b: int) -> BootstrapCell:
    """Build a cell from an exact probability, weighted as if counted from ``nominal_b`` chains.

    The probability is used as is unless it is numerically 0 or 1; then it is
    clamped like a count to [0.5 / B, 1 - 0.5 / B].
    """
    if nominal_b < 1:
        raise DomainError(f"Nominal B must be at least 1, got {nominal_b}")
    variance = None
    if 0.0 < alpha < 1.0:
        variance = _z_variance(alpha, nominal_b)
    if variance is None or not (math.isfinite(variance) and variance > 0):
        clamped = min(max(alpha, 0.5 / nominal_b), 1.0 - 0.5 / nominal_b)
        logger.warning(
            f"Oracle probability {alpha:.3g} at taus={scales.taus} clamped to {clamped:.3g}"
        )
        alpha = clamped
        variance = _z_variance(alpha, nominal_b)
    return BootstrapCell(
        scales=scales,
        B=int(nominal_b),
        count=alpha * nominal_b,
        alpha=alpha,
        z=-std_normal_quantile(alpha),
        var_z=variance,
    )


def _count_block(
    model: ModelSpec, y: np.ndarray, taus: Sequence[float], size: int, stream: RandomStream
) -> int:
    """Run ``size`` chains from ``y`` and count those ending in the region."""
    points = np.tile(y, (size, 1))
    for step, tau in enumerate(taus):
        points = model.sample_replicate(points, tau, stream.child(step))
    return int(np.count_nonzero(model.in_region(points)))


def _blocks(B: int) -> List[int]:
    full, rest = divmod(B, BLOCK_SIZE)
    return [BLOCK_SIZE] * full + ([rest] if rest else [])


def run_cell(
    model: ModelSpec, y: np.ndarray, scales: ScaleTuple, B: int, stream: RandomStream
) -> BootstrapCell:
    """Count B replicate chains of the cell; ``stream`` addresses this cell."""
    if B < 1:
        raise DomainError(f"B must be at least 1, got {B}")
    y = as_point(y, model.p)
    count = sum(
        _count_block(model, y, scales.taus, size, stream.child(block))
        for block, size in enumerate(_blocks(B))
    )
    alpha, z, var_z = transform_cell(count, B)
    return BootstrapCell(scales=scales, B=B, count=count, alpha=alpha, z=z, var_z=var_z)


def oracle_prob(model: ModelSpec, y: np.ndarray, scales: ScaleTuple) -> float:
    """Return the exact bootstrap probability of a cell."""
    if scales.k == 1:
        model.require(Capability.ONE_STEP_PROB)
        return model.one_step_prob(y, scales.taus[0])
    model.require(Capability.K_STEP_PROB)
    return model.k_step_prob(y, scales.taus)


def _apply(task: tuple):
    function, args = task
    return function(*args)


def parallel_map(function: Callable, tasks: Sequence[tuple], workers: int) -> list:
    """Apply ``function`` to each argument tuple, through a process pool when workers > 1.

    Results come back in task order whatever the number of workers.
    """
    tasks = [(function, tuple(args)) for args in tasks]
    if workers <= 1 or len(tasks) <= 1:
        return [_apply(task) for task in tasks]
    pool = Pool(min(workers, len(tasks)))
    try:
        # a pool that was used before has to be restarted
        pool.restart()
    except AssertionError:
        pass
    try:
        return pool.map(_apply, tasks)
    finally:
        pool.close()
        pool.join()


def _cell_task(function: Callable, index: int, scales: ScaleTuple, *args):
    """Run one task of a cell, tagging any failure with the cell."""
    try:
        return function(*args)
    except Exception as error:
        raise CellError(index, scales.taus, error) from error


def build_table(
    model: ModelSpec,
    y: np.ndarray,
    plan: ScalePlan,
    stream: Optional[RandomStream] = None,
    oracle: bool = False,
    nominal_b: int = DEFAULT_NOMINAL_B,
    workers: int = 1,
) -> BootstrapTable:
    """Build the bootstrap table of ``plan`` at observation ``y``.

    Args:
        model: the model generating replicates.
        y: the observation.
        plan: the scale plan; its B is ignored in oracle mode.
        stream: the root stream of the run, required in Monte Carlo mode.
        oracle: use the model's exact probabilities instead of counting.
        nominal_b: B assumed for the weights of oracle cells.
        workers: number of worker processes; results do not depend on it.

    Raises:
        CellError: wrapping the first failure, with the failing cell.
    """
    y = as_point(y, model.p)
    if oracle:
        model.require(Capability.ONE_STEP_PROB)
        if any(scales.k > 1 for scales in plan.cells):
            model.require(Capability.K_STEP_PROB)
        tasks = [
            (oracle_prob, index, scales, model, y, scales)
            for index, scales in enumerate(plan.cells)
        ]
        alphas = parallel_map(_cell_task, tasks, workers)
        cells = [oracle_cell(s, a, nominal_b) for s, a in zip(plan.cells, alphas)]
        logger.info(f"Oracle table of {len(cells)} cells for {model.identifier}")
        return BootstrapTable(tuple(cells), model.identifier, y, None, "oracle")

    if stream is None:
        raise ConfigError("Monte Carlo tables require a random stream")
    B = plan.replicates_per_cell
    tasks = []
    owners = []
    for index, scales in enumerate(plan.cells):
        for block, size in enumerate(_blocks(B)):
            cell_stream = stream.child(index, block)
            tasks.append((_count_block, index, scales, model, y, scales.taus, size, cell_stream))
            owners.append(index)
    counts = parallel_map(_cell_task, tasks, workers)
    totals = [0] * len(plan.cells)
    for index, count in zip(owners, counts):
        totals[index] += count
    cells = []
    for scales, count in zip(plan.cells, totals):
        alpha, z, var_z = transform_cell(count, B)
        cells.append(BootstrapCell(scales=scales, B=B, count=count, alpha=alpha, z=z, var_z=var_z))
    logger.info(
        f"Monte Carlo table of {len(cells)} cells x {B} chains for {model.identifier} "
        f"(seed {stream.master_seed}, {workers} worker(s))"
    )
    return BootstrapTable(tuple(cells), model.identifier, y, stream.master_seed, "mc")


def write_table(table: BootstrapTable, path: Union[str, Path]) -> Path:
    """Write the table as CSV, with its provenance in leading ``#`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seed = "" if table.master_seed is None else str(table.master_seed)
    with path.open("w", newline="") as handle:
        handle.write(f"# model: {table.model_id}\n")
        handle.write(f"# mode: {table.mode}\n")
        handle.write(f"# master_seed: {seed}\n")
        handle.write(f"# observation: {' '.join(repr(float(v)) for v in table.observation)}\n")
        table.to_frame().to_csv(handle, index=False)
    logger.info(f"Bootstrap table written to {path}")
    return path


def _read_csv(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as error:
        raise ConfigError(f"Cannot read {path}: {error}") from error


def _read_provenance(path: Path) -> dict:
    provenance = {}
    with path.open() as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            provenance[key.strip()] = value.strip()
    return provenance


def _present(row, name: str) -> bool:
    return name in row and not pd.isna(row[name])


def read_table(path: Union[str, Path]) -> BootstrapTable:
    """Read a table in the interchange schema, such as counts produced elsewhere.

    Columns k, tau1, B and count are required. alpha, z and var_z are taken as
    given when present and recomputed from count and B otherwise.
    """
    path = Path(path)
    frame = _read_csv(path)
    missing = [name for name in ("k", "tau1", "B", "count") if name not in frame.columns]
    if missing:
        raise ConfigError(f"Table {path} lacks columns {missing}")
    cells = []
    for index, row in frame.iterrows():
        taus = tuple(float(row[name]) for name in SCALE_COLUMNS if _present(row, name))
        scales = ScaleTuple(taus)
        if int(row["k"]) != scales.k:
            raise ConfigError(f"Row {index} of {path}: k={row['k']} but {scales.k} scales given")
        B = int(row["B"])
        count = float(row["count"])
        if all(_present(row, name) for name in ("alpha", "z", "var_z")):
            alpha, z, var_z = float(row["alpha"]), float(row["z"]), float(row["var_z"])
        else:
            alpha, z, var_z = transform_cell(count, B)
        if not var_z > 0:
            raise ConfigError(f"Row {index} of {path}: var_z must be positive, got {var_z}")
        cells.append(BootstrapCell(scales=scales, B=B, count=count, alpha=alpha, z=z, var_z=var_z))
    if not cells:
        raise ConfigError(f"Table {path} has no cells")

    provenance = _read_provenance(path)
    seed = provenance.get("master_seed") or None
    observation = provenance.get("observation", "")
    logger.info(f"Read {len(cells)} cells from {path}")
    return BootstrapTable(
        tuple(cells),
        provenance.get("model", "external"),
        np.array([float(v) for v in observation.split()]),
        int(seed) if seed is not None else None,
        provenance.get("mode", "external"),
    )
