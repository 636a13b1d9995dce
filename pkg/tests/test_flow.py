"""Euler integration of the boosting flow and its trajectory diagnostics."""

import numpy as np
import pytest

from igb.domain import EmpiricalDistribution, TreeParams, evaluate_model
from igb.errors import BlowupError, ConfigError
from igb.flow import (
    METRIC_COLUMNS,
    FlowParams,
    accumulated_stderr,
    euler_step,
    integrate_flow,
    trajectory_discrepancy,
)
from igb.generators import GeneratorSpec, generate_dataset

TREE11 = TreeParams(depth=1, proposals=5, temperature=2.0, dim=1)


def _flow_params(**overrides):
    base = dict(kind="l2", tree=TREE11, step=0.05, horizon=1.0, mc_trees=50, seed=1)
    base.update(overrides)
    return FlowParams(**base)


class TestEulerStep:
    def test_single_sample_moves_toward_the_label(self):
        dist = EmpiricalDistribution(np.array([[0.4]]), np.array([2.0]))
        out = euler_step(dist, "l2", 0.5, TREE11, step=0.1, n_trees=16, seed=2)
        # F'(x0) = c + step * (y0 - c)
        assert evaluate_model(out, np.array([[0.4]]))[0] == pytest.approx(0.5 + 0.1 * 1.5)

    def test_zero_residuals_leave_the_model_alone(self):
        rng = np.random.default_rng(3)
        X = rng.random((40, 1))
        dist = EmpiricalDistribution(X, 0.7 * np.ones(40))
        out = euler_step(dist, "l2", 0.7, TREE11, step=0.1, n_trees=8, seed=3)
        np.testing.assert_array_equal(evaluate_model(out, X), np.full(40, 0.7))

    def test_zero_step_is_the_identity_on_values(self):
        rng = np.random.default_rng(4)
        dist = EmpiricalDistribution(rng.random((30, 1)), rng.standard_normal(30))
        out = euler_step(dist, "l2", 0.2, TREE11, step=0.0, n_trees=8, seed=4)
        np.testing.assert_array_equal(evaluate_model(out, dist.X), np.full(30, 0.2))

    def test_matches_the_first_flow_step(self):
        rng = np.random.default_rng(5)
        dist = EmpiricalDistribution(rng.random((50, 1)), rng.standard_normal(50))
        params = _flow_params(step=0.05, horizon=0.05, mc_trees=20, seed=6)
        trace = integrate_flow(dist, params)
        from igb.losses import initial_constant

        z0 = initial_constant("l2", dist)
        assert z0 == pytest.approx(float(np.mean(dist.y)), rel=1e-12)
        manual = euler_step(dist, "l2", z0, TREE11, step=0.05, n_trees=20, seed=6, key=(0,))
        np.testing.assert_array_equal(
            evaluate_model(trace.model, dist.X), evaluate_model(manual, dist.X)
        )


class TestSinglePointRelaxation:
    def test_tracks_the_exact_exponential(self):
        """One sample: the flow at x0 is the scalar ODE z' = y0 - z."""
        dist = EmpiricalDistribution(np.array([[0.3]]), np.array([1.0]))
        lam, T = 0.02, 2.0
        params = FlowParams(kind="l2", tree=TREE11, step=lam, horizon=T,
                            mc_trees=4, seed=7, init_const=3.0)
        grid = np.array([[0.3]])
        trace = integrate_flow(dist, params, grid=grid, grid_times=[1.0, 2.0])
        for t in (1.0, 2.0):
            got = trace.grid_values[t][0]
            discrete = 1.0 + 2.0 * (1 - lam) ** round(t / lam)
            assert got == pytest.approx(discrete, rel=1e-9)
            assert abs(got - (1.0 + 2.0 * np.exp(-t))) <= lam

    def test_forced_start_records_its_measured_residual(self):
        dist = EmpiricalDistribution(np.array([[0.3]]), np.array([1.0]))
        params = _flow_params(horizon=0.05, mc_trees=2, init_const=3.0)
        trace = integrate_flow(dist, params)
        assert trace.mean_residual[0] == 2.0  # grad of l2 at z=3, y=1


class TestDefaultStart:
    def test_initial_residual_is_exactly_zero(self):
        rng = np.random.default_rng(8)
        dist = EmpiricalDistribution(rng.random((333, 1)), rng.standard_normal(333))
        trace = integrate_flow(dist, _flow_params(horizon=0.1))
        assert trace.mean_residual[0] == 0.0

    def test_residuals_stay_centered(self):
        """Every tree's mean over the sample equals minus the mean residual,
        so the centering survives each Euler step up to rounding."""
        rng = np.random.default_rng(9)
        dist = EmpiricalDistribution(rng.random((400, 1)), rng.standard_normal(400))
        trace = integrate_flow(dist, _flow_params(step=0.05, horizon=2.0, mc_trees=100))
        assert np.all(np.abs(trace.mean_residual) <= 1e-3)
        assert np.all(np.abs(trace.mean_residual[1:]) <= 1e-12)


def test_monotone_training_loss_within_noise():
    """Squared-loss training error decreases up to Monte Carlo wiggle."""
    spec = GeneratorSpec("additive-sine", dim=1, noise=0.2)
    dist = generate_dataset(spec, 400, seed=21)
    params = _flow_params(step=0.05, horizon=3.0, mc_trees=600, seed=10)
    trace = integrate_flow(dist, params, record_step_stats=True)
    rises = np.diff(trace.train_loss)
    allowance = 3 * params.step * trace.step_stats["train_d_std"] / np.sqrt(params.mc_trees)
    assert np.all(rises <= allowance)


def test_no_blowup_over_long_horizons():
    rng = np.random.default_rng(11)
    X = rng.random((120, 1))
    for kind, y in (("l2", rng.standard_normal(120)),
                    ("exp", np.where(rng.random(120) < 0.6, 1.0, -1.0))):
        dist = EmpiricalDistribution(X, y)
        params = FlowParams(kind=kind, tree=TREE11, step=0.05, horizon=20.0,
                            mc_trees=100, seed=12)
        trace = integrate_flow(dist, params)
        assert np.all(np.isfinite(trace.train_loss))
        assert np.all(np.isfinite(evaluate_model(trace.model, X)))


def test_trajectories_shrink_with_the_step():
    """Refining the Euler step moves the trajectory by less (first order)."""
    spec = GeneratorSpec("linear", dim=1, noise=0.1)
    dist = generate_dataset(spec, 300, seed=22)
    grid = np.linspace(0.0, 1.0, 33).reshape(-1, 1)
    traces = {}
    for lam in (0.1, 0.05, 0.025):
        params = FlowParams(kind="l2", tree=TREE11, step=lam, horizon=1.0,
                            mc_trees=4000, seed=13)
        traces[lam] = integrate_flow(dist, params, grid=grid, grid_times=[0.5, 1.0])
    coarse = trajectory_discrepancy(traces[0.1], traces[0.05])["sup"]
    fine = trajectory_discrepancy(traces[0.05], traces[0.025])["sup"]
    assert 0.0 < fine < coarse
    assert fine / coarse <= 0.85


class TestBudgetAndValidation:
    def test_tree_budget_enforced(self):
        with pytest.raises(ConfigError):
            _flow_params(step=0.01, horizon=10.0, mc_trees=100, max_total_trees=50_000)

    def test_tree_budget_allows_exact_fit(self):
        params = _flow_params(step=0.1, horizon=1.0, mc_trees=10, max_total_trees=100)
        assert params.n_steps == 10

    @pytest.mark.parametrize("bad", [{"step": 0.0}, {"step": -1.0}, {"horizon": 0.0},
                                     {"mc_trees": 0}, {"kind": "huber"}])
    def test_bad_parameters_rejected(self, bad):
        with pytest.raises(ConfigError):
            _flow_params(**bad)

    def test_snapshot_time_must_sit_on_the_step_lattice(self):
        dist = EmpiricalDistribution(np.array([[0.5]]), np.array([1.0]))
        grid = np.array([[0.5]])
        with pytest.raises(ConfigError):
            integrate_flow(dist, _flow_params(), grid=grid, grid_times=[0.033])

    def test_snapshot_times_need_a_grid(self):
        dist = EmpiricalDistribution(np.array([[0.5]]), np.array([1.0]))
        with pytest.raises(ConfigError):
            integrate_flow(dist, _flow_params(), grid_times=[0.5])

    def test_labels_need_covariates(self):
        dist = EmpiricalDistribution(np.array([[0.5]]), np.array([1.0]))
        with pytest.raises(ConfigError):
            integrate_flow(dist, _flow_params(), y_test=np.array([1.0]))


class TestBlowup:
    def _diverging_setup(self):
        # separable labels with one contrarian point saturate the logits
        X = np.linspace(0.01, 0.99, 21).reshape(-1, 1)
        y = (X[:, 0] > 0.5).astype(float)
        y[0] = 1.0  # mislabeled far-left point
        return EmpiricalDistribution(X, y)

    def test_blowup_carries_time_and_partial_trace(self):
        dist = self._diverging_setup()
        params = FlowParams(kind="logloss", tree=TREE11, step=2.0, horizon=4000.0,
                            mc_trees=2, seed=14)
        with pytest.raises(BlowupError) as info:
            integrate_flow(dist, params)
        err = info.value
        assert np.isfinite(err.t) and 0.0 < err.t <= 4000.0
        assert err.trace.times.shape[0] >= 1
        assert np.all(np.isfinite(err.trace.train_loss))

    def test_metrics_survive_up_to_the_blowup(self):
        dist = self._diverging_setup()
        params = FlowParams(kind="logloss", tree=TREE11, step=2.0, horizon=4000.0,
                            mc_trees=2, seed=14)
        try:
            integrate_flow(dist, params)
        except BlowupError as err:
            assert err.trace.times[-1] <= err.t
        else:
            pytest.fail("expected a blow-up")


class TestTrajectoryDiscrepancy:
    def _trace(self, seed, n=200, data_seed=23, grid_times=(0.0, 0.5, 1.0), mc=100):
        spec = GeneratorSpec("linear", dim=1, noise=0.1)
        dist = generate_dataset(spec, n, seed=data_seed)
        grid = np.linspace(0, 1, 17).reshape(-1, 1)
        params = _flow_params(mc_trees=mc, seed=seed)
        return integrate_flow(dist, params, grid=grid, grid_times=list(grid_times))

    def test_identical_runs_have_zero_gap(self):
        a, b = self._trace(15), self._trace(15)
        report = trajectory_discrepancy(a, b)
        assert report["sup"] == 0.0

    def test_time_zero_gap_is_the_initializer_gap(self):
        a = self._trace(15, n=100, data_seed=24, grid_times=(0.0,))
        b = self._trace(15, n=5000, data_seed=25, grid_times=(0.0,))
        za = float(np.mean(generate_dataset(GeneratorSpec("linear", dim=1, noise=0.1), 100, seed=24).y))
        zb = float(np.mean(generate_dataset(GeneratorSpec("linear", dim=1, noise=0.1), 5000, seed=25).y))
        assert trajectory_discrepancy(a, b)["sup"] == pytest.approx(abs(za - zb), rel=1e-12)

    def test_mismatched_schedules_rejected(self):
        a = self._trace(15, grid_times=(0.0, 0.5))
        b = self._trace(15, grid_times=(0.0, 1.0))
        with pytest.raises(ConfigError):
            trajectory_discrepancy(a, b)

    def test_missing_grids_rejected(self):
        spec = GeneratorSpec("linear", dim=1, noise=0.1)
        dist = generate_dataset(spec, 50, seed=26)
        bare = integrate_flow(dist, _flow_params(horizon=0.1))
        with pytest.raises(ConfigError):
            trajectory_discrepancy(bare, bare)


class TestStepStatistics:
    def test_accumulated_stderr_matches_the_recorded_spread(self):
        rng = np.random.default_rng(16)
        dist = EmpiricalDistribution(rng.random((150, 1)), rng.standard_normal(150))
        params = _flow_params(step=0.1, horizon=1.0, mc_trees=30)
        trace = integrate_flow(dist, params, X_test=rng.random((50, 1)),
                               y_test=rng.standard_normal(50), record_step_stats=True)
        stds = trace.step_stats["train_d_std"]
        expected = np.sqrt(np.sum((0.1 * stds[3:7]) ** 2) / 30)
        assert accumulated_stderr(trace, 0.3, 0.7, side="train") == pytest.approx(expected, rel=1e-12)

    def test_requires_recorded_statistics(self):
        rng = np.random.default_rng(17)
        dist = EmpiricalDistribution(rng.random((50, 1)), rng.standard_normal(50))
        trace = integrate_flow(dist, _flow_params(horizon=0.1))
        with pytest.raises(ConfigError):
            accumulated_stderr(trace, 0.0, 0.1)

    def test_test_side_needs_test_data(self):
        rng = np.random.default_rng(18)
        dist = EmpiricalDistribution(rng.random((50, 1)), rng.standard_normal(50))
        trace = integrate_flow(dist, _flow_params(horizon=0.2), record_step_stats=True)
        with pytest.raises(ConfigError):
            accumulated_stderr(trace, 0.0, 0.2, side="test")

    def test_unknown_side_rejected(self):
        rng = np.random.default_rng(19)
        dist = EmpiricalDistribution(rng.random((50, 1)), rng.standard_normal(50))
        trace = integrate_flow(dist, _flow_params(horizon=0.1), record_step_stats=True)
        with pytest.raises(ConfigError):
            accumulated_stderr(trace, 0.0, 0.1, side="validation")


def test_metrics_csv_layout(tmp_path):
    rng = np.random.default_rng(20)
    dist = EmpiricalDistribution(rng.random((60, 1)), rng.standard_normal(60))
    trace = integrate_flow(dist, _flow_params(step=0.1, horizon=0.5))
    path = tmp_path / "metrics.csv"
    trace.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 1 + 6  # t=0 row plus five steps


def test_full_trace_is_seed_deterministic():
    spec = GeneratorSpec("product", dim=2, noise=0.1)
    dist = generate_dataset(spec, 150, seed=27)
    tree = TreeParams(depth=2, proposals=5, temperature=2.0, dim=2)
    params = FlowParams(kind="l2", tree=tree, step=0.1, horizon=1.0, mc_trees=40, seed=28)
    t1 = integrate_flow(dist, params, record_step_stats=True)
    t2 = integrate_flow(dist, params, record_step_stats=True)
    np.testing.assert_array_equal(t1.train_loss, t2.train_loss)
    np.testing.assert_array_equal(t1.mean_residual, t2.mean_residual)
    np.testing.assert_array_equal(t1.step_stats["train_d_mean"], t2.step_stats["train_d_mean"])
    X = np.random.default_rng(0).random((100, 2))
    np.testing.assert_array_equal(evaluate_model(t1.model, X), evaluate_model(t2.model, X))
