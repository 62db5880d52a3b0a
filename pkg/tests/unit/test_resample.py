# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

import logging
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from regionboot.exceptions import (
    CellError,
    ConfigError,
    DomainError,
    ExitStatus,
    UnsupportedCapabilityError,
)
from regionboot.fit import fit_multistep, fit_onestep
from regionboot.model import CallableModel, SphericalNormalModel, observation_from_xbar
from regionboot.resample import (
    BLOCK_SIZE,
    ScalePlan,
    ScaleTuple,
    build_table,
    default_scale_plan,
    oracle_cell,
    parallel_map,
    read_scale_plan,
    read_table,
    run_cell,
    transform_cell,
    write_table,
)
from regionboot.statfun import RandomStream


@pytest.fixture(scope="function")
def model() -> SphericalNormalModel:
    """Return the four-dimensional spherical model with n = 10."""
    return SphericalNormalModel(p=4, n=10)


@pytest.fixture(scope="function")
def y(model) -> np.ndarray:
    """Return the observation with ||xbar||^2 = 2.680."""
    return observation_from_xbar(model, xbar_norm2=2.680)


@pytest.fixture(scope="function")
def small_plan() -> ScalePlan:
    """Return a plan with two one-step cells and one two-step cell."""
    cells = (
        ScaleTuple.from_squares(1 / 0.3),
        ScaleTuple.from_squares(1.0),
        ScaleTuple.from_squares(1.0, 1 / 1.5),
    )
    return ScalePlan(cells, 4000)


def _exploding(p: int = 1) -> CallableModel:
    def sampler(centers, tau, stream):
        raise ValueError("sampler failed")

    return CallableModel("exploding", p, 10.0, sampler, lambda points: points[:, 0] < 0)


class TestScales:
    """Tests for scale tuples and plans."""

    def test_scale_tuple(self):
        """Test steps, padding and the combined scale."""
        scales = ScaleTuple.from_squares(1.0, 1 / 1.5)
        assert scales.k == 2
        assert scales.padded() == (1.0, math.sqrt(1 / 1.5), None)
        assert scales.combined == pytest.approx(math.sqrt(10 / 6))

    @pytest.mark.parametrize("taus", [(), (1.0, 1.0, 1.0, 1.0), (0.0,), (-1.0,), (math.inf,)])
    def test_invalid_scale_tuple(self, taus):
        """Test that scale tuples need one to three positive finite scales."""
        with pytest.raises(DomainError):
            ScaleTuple(taus)

    def test_default_plan(self):
        """Test the 5 + 10 + 20 cells of the default plan."""
        plan = default_scale_plan(10, 10_000)
        assert len(plan) == 35
        assert [cell.k for cell in plan.cells].count(1) == 5
        assert [cell.k for cell in plan.cells].count(2) == 10
        assert [cell.k for cell in plan.cells].count(3) == 20
        first = [cell.taus[0] ** 2 for cell in plan.cells[:5]]
        assert first == pytest.approx([10 / 3, 10 / 6, 1.0, 10 / 15, 10 / 21])
        assert plan.cells[5].taus == pytest.approx((math.sqrt(10 / 3), math.sqrt(10 / 6)))
        assert plan.replicates_per_cell == 10_000

    def test_plan_validation(self):
        """Test that plans need cells, enough chains and step-ordered cells."""
        one, two = ScaleTuple((1.0,)), ScaleTuple((1.0, 1.0))
        with pytest.raises(DomainError):
            ScalePlan((), 1000)
        with pytest.raises(DomainError):
            ScalePlan((one,), 99)
        with pytest.raises(DomainError):
            ScalePlan((two, one), 1000)
        with pytest.raises(DomainError):
            default_scale_plan(1.5, 1000)

    def test_read_scale_plan(self, tmp_path):
        """Test that scale files are read and stably ordered by steps."""
        path = tmp_path / "scales.csv"
        path.write_text("tau1,tau2,tau3\n1.0,0.5,\n2.0,,\n1.0,0.5,0.5\n1.5,,\n")
        plan = read_scale_plan(path, 500)
        assert [cell.taus for cell in plan.cells] == [
            (2.0,),
            (1.5,),
            (1.0, 0.5),
            (1.0, 0.5, 0.5),
        ]

    def test_read_scale_plan_without_tau1(self, tmp_path):
        """Test that a scale file needs a tau1 column."""
        path = tmp_path / "scales.csv"
        path.write_text("scale\n1.0\n")
        with pytest.raises(ConfigError):
            read_scale_plan(path, 500)


class TestCells:
    """Tests for converting probabilities into z-values."""

    def test_transform_half(self):
        """Test the z-value and delta-method variance at one half."""
        alpha, z, var_z = transform_cell(50, 100)
        assert alpha == 0.5
        assert z == pytest.approx(0.0)
        assert var_z == pytest.approx(0.25 * 2 * math.pi / 100)

    @pytest.mark.parametrize("count, alpha", [(0, 0.5 / 200), (200, 1 - 0.5 / 200)])
    def test_transform_clamps(self, count, alpha):
        """Test that empty and full counts are clamped half a chain inside."""
        clamped, z, var_z = transform_cell(count, 200)
        assert clamped == pytest.approx(alpha)
        assert math.isfinite(z) and var_z > 0

    def test_transform_sign(self):
        """Test that small bootstrap probabilities give positive z-values."""
        assert transform_cell(5, 1000)[1] > 0
        assert transform_cell(995, 1000)[1] < 0

    @pytest.mark.parametrize("count, B", [(-1, 10), (11, 10), (0, 0)])
    def test_transform_domain(self, count, B):
        """Test that counts outside [0, B] are rejected."""
        with pytest.raises(DomainError):
            transform_cell(count, B)

    def test_oracle_cell(self):
        """Test that exact probabilities are used as is."""
        cell = oracle_cell(ScaleTuple((1.0,)), 0.0085, 10_000)
        assert cell.alpha == 0.0085
        assert cell.count == pytest.approx(85)
        assert cell.z == pytest.approx(2.3867, abs=1e-3)
        assert cell.B == 10_000

    @pytest.mark.parametrize("alpha", [0.0, 1e-300, 1.0])
    def test_oracle_cell_clamps(self, alpha, caplog):
        """Test that degenerate exact probabilities are clamped with a warning."""
        with caplog.at_level(logging.WARNING, logger="regionboot.resample"):
            cell = oracle_cell(ScaleTuple((1.0,)), alpha, 1000)
        assert 0.5 / 1000 <= cell.alpha <= 1 - 0.5 / 1000
        assert math.isfinite(cell.var_z) and cell.var_z > 0
        assert "clamped" in caplog.text


class TestBuildTable:
    """Tests for Monte Carlo and oracle tables."""

    def test_reproducible(self, model, y, small_plan):
        """Test that a master seed determines every count."""
        first = build_table(model, y, small_plan, RandomStream(11))
        second = build_table(model, y, small_plan, RandomStream(11))
        other = build_table(model, y, small_plan, RandomStream(12))
        assert [c.count for c in first.cells] == [c.count for c in second.cells]
        assert [c.count for c in first.cells] != [c.count for c in other.cells]
        assert first.master_seed == 11 and first.mode == "mc"
        assert first.identifier == "mc(cells=3,seed=11)"

    def test_monte_carlo_matches_oracle(self, model, y, small_plan):
        """Test that counted probabilities agree with the exact ones."""
        mc = build_table(model, y, small_plan, RandomStream(5))
        oracle = build_table(model, y, small_plan, oracle=True)
        for counted, exact in zip(mc.cells, oracle.cells):
            se = math.sqrt(exact.alpha * (1 - exact.alpha) / counted.B)
            assert abs(counted.alpha - exact.alpha) < 4.5 * se

    def test_counts_are_binomial(self, model, y, small_plan):
        """Test counts of 50 seeds against Binomial(B, alpha) with a chi-square statistic."""
        plan = ScalePlan(small_plan.cells, 1000)
        alphas = np.array([cell.alpha for cell in build_table(model, y, plan, oracle=True).cells])
        counts = np.array(
            [
                [cell.count for cell in build_table(model, y, plan, RandomStream(seed)).cells]
                for seed in range(50)
            ]
        )
        expected = plan.replicates_per_cell * alphas
        statistic = np.sum((counts - expected) ** 2 / (expected * (1.0 - alphas)))
        assert stats.chi2.sf(statistic, df=counts.size) > 1e-3

    def test_oracle_weights_scale_with_b(self, model, y):
        """Test that the nominal B scales every weight by one factor and leaves fits alone."""
        plan = default_scale_plan(10, 1000)
        small = build_table(model, y, plan, oracle=True, nominal_b=1000)
        large = build_table(model, y, plan, oracle=True, nominal_b=100_000)
        ratios = [a.var_z / b.var_z for a, b in zip(small.cells, large.cells)]
        np.testing.assert_allclose(ratios, 100.0, rtol=1e-12)
        for a, b in zip(fit_onestep(small).cov.ravel(), fit_onestep(large).cov.ravel()):
            assert a == pytest.approx(100.0 * b, rel=1e-9)
        assert fit_onestep(small).v_hat == pytest.approx(fit_onestep(large).v_hat, rel=1e-10)
        np.testing.assert_allclose(
            fit_multistep(small, 3).gamma, fit_multistep(large, 3).gamma, rtol=0, atol=1e-8
        )

    def test_run_cell_matches_table(self, model, y):
        """Test that a cell run alone reproduces its table entry across blocks."""
        scales = ScaleTuple((1.0,))
        B = BLOCK_SIZE + 5
        root = RandomStream(3)
        table = build_table(model, y, ScalePlan((scales,), B), root)
        cell = run_cell(model, y, scales, B, root.child(0))
        assert cell.count == table.cells[0].count
        assert cell.B == B

    def test_workers_do_not_change_counts(self, model, y, small_plan):
        """Test that the table does not depend on the number of workers."""
        serial = build_table(model, y, small_plan, RandomStream(9), workers=1)
        pooled = build_table(model, y, small_plan, RandomStream(9), workers=2)
        assert [c.count for c in serial.cells] == [c.count for c in pooled.cells]

    def test_oracle_table(self, model, y, small_plan):
        """Test that oracle tables use the nominal B and no seed."""
        table = build_table(model, y, small_plan, oracle=True, nominal_b=500)
        assert table.mode == "oracle"
        assert table.master_seed is None
        assert all(cell.B == 500 for cell in table.cells)
        assert table.cells[0].alpha == pytest.approx(model.one_step_prob(y, math.sqrt(10 / 3)))

    def test_monte_carlo_requires_stream(self, model, y, small_plan):
        """Test that Monte Carlo tables need a stream."""
        with pytest.raises(ConfigError):
            build_table(model, y, small_plan)

    def test_oracle_requires_capability(self, small_plan):
        """Test that oracle tables need exact probabilities."""
        with pytest.raises(UnsupportedCapabilityError):
            build_table(_exploding(), np.array([1.0]), small_plan, oracle=True)

    def test_failing_cell(self, small_plan):
        """Test that a failure names the first failing cell."""
        with pytest.raises(CellError) as excinfo:
            build_table(_exploding(), np.array([1.0]), small_plan, RandomStream(1))
        assert excinfo.value.index == 0
        assert excinfo.value.status == ExitStatus.NUMERICAL
        assert isinstance(excinfo.value.cause, ValueError)

    def test_table_queries(self, model, y):
        """Test the step filters and the lookup of one-step cells."""
        table = build_table(model, y, default_scale_plan(10, 1000), oracle=True)
        assert len(table.one_step()) == 5
        assert len(table.up_to(2)) == 15
        assert table.find_one_step(1.0).scales.taus == (1.0,)
        assert table.find_one_step(1.01) is None
        assert table.identifier == "oracle(cells=35)"


class TestParallelMap:
    """Tests for the process pool wrapper."""

    def test_serial(self):
        """Test that a single worker applies the function in order."""
        assert parallel_map(pow, [(2, 3), (3, 2)], workers=1) == [8, 9]

    def test_pool_lifecycle(self, mocker):
        """Test that the pool is restarted, mapped, closed and joined."""
        pool = mocker.MagicMock()
        pool.map.return_value = [8, 9]
        pool_class = mocker.patch("regionboot.resample.Pool", return_value=pool)
        assert parallel_map(pow, [(2, 3), (3, 2)], workers=4) == [8, 9]
        pool_class.assert_called_once_with(2)
        pool.restart.assert_called_once()
        pool.close.assert_called_once()
        pool.join.assert_called_once()

    def test_fresh_pool(self, mocker):
        """Test that a pool which cannot be restarted is used as is."""
        pool = mocker.MagicMock()
        pool.restart.side_effect = AssertionError
        pool.map.return_value = [1, 1]
        mocker.patch("regionboot.resample.Pool", return_value=pool)
        assert parallel_map(pow, [(1, 3), (1, 2)], workers=2) == [1, 1]
        pool.close.assert_called_once()


class TestTableFiles:
    """Tests for the table interchange format."""

    def test_write_and_read(self, model, y, small_plan, tmp_path):
        """Test that a written table is read back with its provenance."""
        table = build_table(model, y, small_plan, RandomStream(2**63 + 5))
        path = write_table(table, tmp_path / "out" / "table.csv")
        loaded = read_table(path)
        assert loaded.cells == table.cells
        assert loaded.master_seed == 2**63 + 5
        assert loaded.model_id == "spherical(p=4,n=10)"
        assert loaded.mode == "mc"
        np.testing.assert_array_equal(loaded.observation, y)

    def test_counts_only(self, tmp_path):
        """Test that z-values are recomputed when only counts are given."""
        path = tmp_path / "counts.csv"
        path.write_text("k,tau1,tau2,tau3,B,count\n1,1.0,,,100,50\n2,1.0,0.5,,100,0\n")
        table = read_table(path)
        assert table.cells[0].z == pytest.approx(0.0)
        assert table.cells[1].alpha == pytest.approx(0.005)
        assert table.model_id == "external"
        assert table.master_seed is None

    def test_frame_schema(self, model, y, small_plan):
        """Test the columns of the table frame."""
        frame = build_table(model, y, small_plan, oracle=True).to_frame()
        assert list(frame.columns) == ["k", "tau1", "tau2", "tau3", "B", "count", "alpha", "z",
                                       "var_z"]
        assert pd.isna(frame.loc[0, "tau2"])

    @pytest.mark.parametrize(
        "content",
        [
            "k,tau1,B\n1,1.0,100\n",
            "k,tau1,tau2,B,count\n1,1.0,0.5,100,10\n",
            "k,tau1,B,count,alpha,z,var_z\n1,1.0,100,10,0.1,1.28,0.0\n",
            "k,tau1,B,count\n",
        ],
    )
    def test_invalid_tables(self, content, tmp_path):
        """Test that malformed tables are configuration errors."""
        path = tmp_path / "table.csv"
        path.write_text(content)
        with pytest.raises(ConfigError):
            read_table(path)

    def test_missing_file(self, tmp_path):
        """Test that a missing table is a configuration error."""
        with pytest.raises(ConfigError):
            read_table(tmp_path / "absent.csv")
