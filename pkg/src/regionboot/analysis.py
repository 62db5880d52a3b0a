# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Analysis pipelines shared by the command-line commands.

An analysis builds (or reads) a bootstrap table, fits what the requested
p-value methods need and derives the p-values. Tables only hold the cells the
requested methods use: one-step cells for p0, abc and p1, two-step cells for p2
and three-step cells for p3.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from regionboot.exceptions import ConfigError
from regionboot.fit import (
    GammaFit,
    LinearFit,
    default_ridge_weights,
    fit_multistep,
    fit_onestep,
    fit_report_rows,
)
from regionboot.model import (
    Capability,
    ModelSpec,
    build_model,
    observation_from_xbar,
    solve_observation,
)
from regionboot.pvalue import (
    Method,
    PValueReport,
    exact,
    p0,
    p1,
    p2,
    p3,
    p_abc,
    reports_frame,
    table_provenance,
    two_step_shift,
)
from regionboot.resample import (
    BootstrapTable,
    ScalePlan,
    build_table,
    parallel_map,
    write_table,
)
from regionboot.statfun import RandomStream

logger = logging.getLogger(__name__)

TABLE_FILE = "bootstrap_table.csv"
FIT_FILE = "fit_report.csv"
PVALUE_FILE = "pvalues.csv"
SHIFT_FILE = "shift_report.csv"
CURVE_FILE = "curve.csv"
TABLE2_FILE = "table2.csv"
COVERAGE_FILE = "coverage.csv"

CURVE_POINTS = 101
SHIFT_COLUMNS = ["tau1", "tau2", "observed", "predicted"]
CURVE_COLUMNS = ["kind", "inv_tau", "z", "se_z", "fitted"]
COVERAGE_COLUMNS = ["method", "level", "trials", "rejections", "frequency", "se"]

# normal then exponential at 5%, then both at 95%
TABLE2_ROWS: Tuple[Tuple[str, float, float], ...] = tuple(
    (family, n, target)
    for target in (0.05, 0.95)
    for family in ("normal", "exponential")
    for n in (10.0, 100.0, 1000.0)
)
TABLE2_DIMENSION = 4

# stream of the abc cell at the projected observation, apart from the table cells
_ABC_STREAM = 2**31


@dataclass
class Analysis:
    """Table, fits, p-values and shift diagnostics of one observation."""

    table: BootstrapTable
    fits: Dict[str, Union[LinearFit, GammaFit]] = field(default_factory=dict)
    reports: List[PValueReport] = field(default_factory=list)
    shifts: List[dict] = field(default_factory=list)

    def report(self, method: Method) -> PValueReport:
        """Return the report of ``method``."""
        for report in self.reports:
            if report.method == method:
                return report
        raise KeyError(method)


def steps_needed(methods: Sequence[Method]) -> int:
    """Largest number of bootstrap steps any of ``methods`` relies on."""
    if Method.P3 in methods:
        return 3
    if Method.P2 in methods:
        return 2
    if any(m in methods for m in (Method.P0, Method.ABC, Method.P1)):
        return 1
    return 0


def restrict_plan(plan: ScalePlan, max_k: int) -> ScalePlan:
    """Keep the cells with at most ``max_k`` steps."""
    return ScalePlan(
        tuple(cell for cell in plan.cells if cell.k <= max_k), plan.replicates_per_cell
    )


def resolve_observation(
    model: ModelSpec,
    xbar: Optional[Sequence[float]] = None,
    xbar_norm2: Optional[float] = None,
    target: Optional[float] = None,
) -> np.ndarray:
    """Return y from the sample mean, its squared norm, or a target exact p-value."""
    if target is not None:
        return solve_observation(model, target)
    return observation_from_xbar(model, xbar=xbar, xbar_norm2=xbar_norm2)


def analyze_table(
    model: ModelSpec,
    table: BootstrapTable,
    methods: Sequence[Method],
    ridge: Optional[Sequence[float]] = None,
    stream: Optional[RandomStream] = None,
) -> Analysis:
    """Fit ``table`` and compute the requested p-values.

    Args:
        model: the model of the table; only the abc and exact methods query it.
        table: the bootstrap table.
        methods: p-value methods to report, in this order.
        ridge: six ridge weights for the multistep fits, None for none.
        stream: root stream of a Monte Carlo run, for the abc projected cell.
    """
    analysis = Analysis(table)
    fits = analysis.fits
    distinct = {cell.scales.taus for cell in table.one_step()}
    if Method.P1 in methods or (model.supports(Capability.ACCELERATION) and len(distinct) > 1):
        fits["onestep"] = fit_onestep(table)
    if Method.P2 in methods:
        fits["zeta2"] = fit_multistep(table, 3, _ridge(ridge, 3))
    if Method.P3 in methods:
        fits["zeta3"] = fit_multistep(table, 6, _ridge(ridge, 6))
    provenance = table_provenance(table)

    for method in methods:
        if method == Method.P0:
            analysis.reports.append(p0(table))
        elif method == Method.ABC:
            mc = stream is not None and table.mode == "mc"
            analysis.reports.append(
                p_abc(
                    model,
                    table,
                    stream.child(_ABC_STREAM) if mc else None,
                    table.cells[0].B if mc else None,
                )
            )
        elif method == Method.P1:
            analysis.reports.append(p1(fits["onestep"], **provenance))
        elif method == Method.P2:
            analysis.reports.append(p2(fits["zeta2"], **provenance))
        elif method == Method.P3:
            analysis.reports.append(p3(fits["zeta3"], **provenance))
        else:
            analysis.reports.append(exact(model, table.observation))

    if "onestep" in fits and model.supports(Capability.ACCELERATION):
        analysis.shifts = shift_rows(table, fits["onestep"], model.acceleration())
    return analysis


def _ridge(ridge: Optional[Sequence[float]], order: int) -> Optional[np.ndarray]:
    return None if ridge is None else np.asarray(ridge[:order], dtype=float)


def run_analysis(
    model: ModelSpec,
    y: np.ndarray,
    plan: ScalePlan,
    methods: Sequence[Method],
    stream: Optional[RandomStream] = None,
    oracle: bool = False,
    nominal_b: int = 10_000,
    ridge: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> Analysis:
    """Build the table the methods need at ``y`` and analyze it.

    Monte Carlo runs draw below ``stream``; oracle runs ignore it.
    """
    stream = None if oracle else stream
    max_k = steps_needed(methods)
    if max_k == 0:
        seed = None if stream is None else stream.master_seed
        table = BootstrapTable((), model.identifier, y, seed, "oracle" if oracle else "mc")
    else:
        table = build_table(
            model, y, restrict_plan(plan, max_k), stream, oracle, nominal_b, workers
        )
    return analyze_table(model, table, methods, ridge, stream)


def shift_rows(table: BootstrapTable, fit: LinearFit, a: float) -> List[dict]:
    """Observed and predicted z-value shifts of the two-step cells.

    The observed shift needs a one-step cell at the combined scale and is
    left empty otherwise.
    """
    rows = []
    for cell in table.cells:
        if cell.k != 2:
            continue
        tau1, tau2 = cell.scales.taus
        combined = table.find_one_step(cell.scales.combined)
        rows.append(
            {
                "tau1": tau1,
                "tau2": tau2,
                "observed": None if combined is None else cell.z - combined.z,
                "predicted": two_step_shift(a, fit.v_hat, tau1, tau2),
            }
        )
    return rows


def write_analysis(analysis: Analysis, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the table, fit, p-value and shift CSVs into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"table": write_table(analysis.table, out_dir / TABLE_FILE)}
    frame = pd.DataFrame(
        fit_report_rows(analysis.fits),
        columns=["fit", "coefficient", "estimate", "se", "rss", "objective", "iterations"],
    )
    paths["fits"] = _write_frame(frame, out_dir / FIT_FILE)
    paths["pvalues"] = _write_frame(reports_frame(analysis.reports), out_dir / PVALUE_FILE)
    if analysis.shifts:
        frame = pd.DataFrame(analysis.shifts, columns=SHIFT_COLUMNS)
        paths["shifts"] = _write_frame(frame, out_dir / SHIFT_FILE)
    return paths


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def curve_frame(
    table: BootstrapTable, fit: LinearFit, points: int = CURVE_POINTS
) -> pd.DataFrame:
    """One-step z-values against 1/tau, followed by a dense grid of the fitted curve."""
    rows = []
    for cell in table.one_step():
        tau = cell.scales.taus[0]
        rows.append(
            {
                "kind": "cell",
                "inv_tau": 1.0 / tau,
                "z": cell.z,
                "se_z": math.sqrt(cell.var_z),
                "fitted": fit.z_at(tau),
            }
        )
    inv_taus = [row["inv_tau"] for row in rows]
    for inv_tau in np.linspace(min(inv_taus), max(inv_taus), points):
        rows.append(
            {
                "kind": "fit",
                "inv_tau": inv_tau,
                "z": None,
                "se_z": None,
                "fitted": fit.z_at(1.0 / inv_tau),
            }
        )
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def parse_table2_rows(text: str) -> List[Tuple[str, float, float]]:
    """Parse ``family:n:target`` entries; ``all`` selects every row."""
    if text.strip().lower() == "all":
        return list(TABLE2_ROWS)
    rows = []
    for entry in text.split(","):
        try:
            family, n, target = entry.strip().split(":")
            rows.append((family.strip().lower(), float(n), float(target)))
        except ValueError as error:
            raise ConfigError(f"Table row must read family:n:target, got {entry!r}") from error
        if rows[-1][0] not in ("normal", "exponential"):
            raise ConfigError(f"Table rows use the normal or exponential model, got {family!r}")
    return rows


def table2_model(family: str, n: float) -> ModelSpec:
    """Return the four-dimensional spherical model or the exponential model."""
    if family == "normal":
        return build_model("spherical", TABLE2_DIMENSION, n)
    return build_model("exponential", 1, n)


def table2_row(
    family: str,
    n: float,
    target: float,
    plan: ScalePlan,
    oracle: bool = True,
    seed: Optional[int] = None,
    nominal_b: int = 10_000,
    workers: int = 1,
) -> dict:
    """P-values in percent (standard errors in percent) for one row of the example table."""
    model = table2_model(family, n)
    y = solve_observation(model, target)
    stream = None if oracle else RandomStream(seed)
    table = build_table(model, y, plan, stream, oracle, nominal_b, workers)
    plain = analyze_table(model, table, list(Method), None, stream)
    ridged = analyze_table(model, table, [Method.P2, Method.P3], default_ridge_weights(6), stream)

    def percent(report: PValueReport, se: bool = False) -> Optional[float]:
        value = report.se_alpha if se else report.alpha
        return None if value is None else 100.0 * value

    row = {"family": family, "n": n, "target": 100.0 * target}
    for name, method in (("alpha0", Method.P0), ("alpha_abc", Method.ABC)):
        row[name] = percent(plain.report(method))
    for name, method in (("alpha1", Method.P1), ("alpha2", Method.P2), ("alpha3", Method.P3)):
        row[name] = percent(plain.report(method))
        row[name.replace("alpha", "se")] = percent(plain.report(method), se=True)
    for name, method in (("ridge_alpha2", Method.P2), ("ridge_alpha3", Method.P3)):
        row[name] = percent(ridged.report(method))
        row[name.replace("alpha", "se")] = percent(ridged.report(method), se=True)
    row["exact"] = percent(plain.report(Method.EXACT))
    logger.info(f"Table row {family} n={n:g} target={target}: alpha0={row['alpha0']:.2f}%")
    return row


@dataclass(frozen=True)
class CoverageResult:
    """Rejection frequency of a p-value method on the boundary of the region."""

    method: Method
    level: float
    trials: int
    rejections: int

    @property
    def frequency(self) -> float:
        """Share of trials rejecting at the level."""
        return self.rejections / self.trials

    @property
    def se(self) -> float:
        """Binomial standard error of the frequency."""
        f = self.frequency
        return math.sqrt(f * (1.0 - f) / self.trials)

    def as_row(self) -> dict:
        """Return the coverage file row."""
        return {
            "method": self.method.value,
            "level": self.level,
            "trials": self.trials,
            "rejections": self.rejections,
            "frequency": self.frequency,
            "se": self.se,
        }


def coverage_trial(
    model: ModelSpec,
    method: Method,
    trial: int,
    seed: int,
    plan: ScalePlan,
    oracle: bool,
    nominal_b: int,
    ridge: Optional[Sequence[float]],
) -> float:
    """P-value of ``method`` at an observation drawn around the boundary point."""
    root = RandomStream(seed)
    y = model.sample_replicate(model.boundary_point(), 1.0, root.child(0, trial))
    analysis = run_analysis(
        model,
        y,
        plan,
        [method],
        stream=root.child(1, trial),
        oracle=oracle,
        nominal_b=nominal_b,
        ridge=ridge,
    )
    return analysis.reports[0].alpha


def run_coverage(
    model: ModelSpec,
    method: Method,
    level: float,
    trials: int,
    plan: ScalePlan,
    seed: int,
    oracle: bool = True,
    nominal_b: int = 10_000,
    ridge: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> CoverageResult:
    """Estimate Pr{alpha_method(Y) < level} with Y drawn at the boundary point.

    Raises:
        UnsupportedCapabilityError: if the model has no boundary point.
    """
    model.require(Capability.BOUNDARY_POINT)
    tasks = [
        (model, method, trial, seed, plan, oracle, nominal_b, ridge) for trial in range(trials)
    ]
    alphas = parallel_map(coverage_trial, tasks, workers)
    result = CoverageResult(method, level, trials, int(sum(a < level for a in alphas)))
    logger.info(
        f"Coverage of {method.value} at level {level}: {result.frequency:.4f} "
        f"(se {result.se:.4f}, {trials} trials)"
    )
    return result
