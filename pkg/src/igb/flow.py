"""Euler integration of the infinitesimal boosting flow.

The flow starts at the best constant predictor and repeatedly moves by
step * (Monte Carlo average of mc_trees gradient trees sampled at the
current predictor).  All evaluation points of interest (training sample,
held-out sample, snapshot grid) carry incremental value caches that are
updated with the same averaged-tree evaluation the final model uses, so the
cached trajectory and a from-scratch evaluation of the returned model agree
bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .domain import EmpiricalDistribution, EnsembleModel, TreeParams, write_csv
from .errors import BlowupError, ConfigError, DataError
from .losses import LOSS_KINDS, initial_constant, loss_grad, loss_hess, loss_value
from .trees import sample_forest, sample_tree_batch

METRIC_COLUMNS = ["t", "train_loss", "test_loss", "mean_residual", "l2_to_target", "wall_ms"]


@dataclass(frozen=True)
class FlowParams:
    """Configuration of one flow integration.

    kind: loss name; tree: per-node sampler parameters; step: Euler step
    (the shrinkage); horizon: final time, a multiple of step; mc_trees:
    trees averaged per step; seed: master seed (step k, tree m uses the
    generator derived from (seed, k, m)); init_const: optional override of
    the fitted constant start.
    """

    kind: str
    tree: TreeParams
    step: float
    horizon: float
    mc_trees: int
    seed: int
    init_const: float | None = None
    max_total_trees: int | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.step) or self.step <= 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.mc_trees < 1:
            raise ConfigError(f"mc_trees must be >= 1, got {self.mc_trees}")
        if self.max_total_trees is not None and self.n_steps * self.mc_trees > self.max_total_trees:
            raise ConfigError(
                f"{self.n_steps} steps x {self.mc_trees} trees exceeds the "
                f"budget of {self.max_total_trees}"
            )

    @property
    def n_steps(self) -> int:
        # Smallest step count whose span covers the horizon; the tolerance
        # keeps T/step that is a multiple up to rounding from gaining a step.
        return int(np.ceil(self.horizon / self.step - 1e-9))


@dataclass
class FlowTrace:
    """Recorded trajectory of one integration.

    Per-row arrays have length n_steps + 1 (the t=0 row first).  Undefined
    metrics (no held-out data, no target) are NaN.  grid_values maps each
    requested snapshot time to the flow's values on the snapshot grid.
    step_stats, when recorded, holds per-step mean and standard deviation
    over the Monte Carlo block of each tree's contribution to the loss
    derivative, for the training and held-out samples.
    """

    params: FlowParams
    times: np.ndarray
    train_loss: np.ndarray
    test_loss: np.ndarray
    mean_residual: np.ndarray
    l2_to_target: np.ndarray
    wall_ms: np.ndarray
    grid: np.ndarray | None
    grid_values: dict
    step_stats: dict | None
    model: EnsembleModel

    def to_csv(self, path) -> None:
        rows = np.column_stack([
            self.times, self.train_loss, self.test_loss,
            self.mean_residual, self.l2_to_target, self.wall_ms,
        ])
        write_csv(path, METRIC_COLUMNS, rows)


def euler_step(dist: EmpiricalDistribution, kind: str, model, tree_params: TreeParams,
               step: float, n_trees: int, seed: int, key: tuple = ()) -> EnsembleModel:
    """One explicit Euler step: model + step * averaged tree block.

    The input may be an EnsembleModel or a plain constant.  Returns a new
    model; the input is not modified.
    """
    if not isinstance(model, EnsembleModel):
        model = EnsembleModel(float(model), tree_params.dim)
    batch = sample_forest(dist, kind, model, tree_params, seed, n_trees, key=key)
    if not np.all(np.isfinite(batch.leaf_values)):
        raise BlowupError("tree block contains non-finite leaf values")
    out = EnsembleModel(model.base, model.dim, increments=list(model.increments))
    out.add_increment(step, batch)
    return out


def integrate_flow(dist: EmpiricalDistribution, params: FlowParams,
                   X_test=None, y_test=None, target=None,
                   grid=None, grid_times=None,
                   record_step_stats: bool = False, key: tuple = ()) -> FlowTrace:
    """Integrate the flow to its horizon, recording metrics at every step.

    target, when given, is a callable on covariates; the l2_to_target
    column is the root mean square gap between the flow and the target on
    the held-out points (on the snapshot grid when no held-out points are
    supplied).  grid/grid_times request value snapshots at specific times,
    each a multiple of the step.  Step k, tree m draws from the generator
    derived from (seed, *key, k, m).  Non-finite leaf values or predictor
    values abort with a BlowupError carrying the time reached and, as its
    `trace` attribute, the partial trajectory.
    """
    kind = params.kind
    if params.tree.dim != dist.p:
        raise ConfigError(f"tree dim {params.tree.dim} does not match sample dim {dist.p}")
    n_steps = params.n_steps
    lam = params.step
    M = params.mc_trees

    if X_test is not None:
        X_test = np.ascontiguousarray(X_test, dtype=np.float64)
        if X_test.ndim != 2 or X_test.shape[1] != dist.p:
            raise DataError(f"held-out covariates have shape {X_test.shape}")
        if X_test.min(initial=0.0) < 0.0 or X_test.max(initial=0.0) > 1.0:
            raise DataError("held-out covariates must lie in [0,1]^p")
        if y_test is not None:
            y_test = np.asarray(y_test, dtype=np.float64)
            if y_test.shape != (X_test.shape[0],):
                raise DataError("held-out labels do not match covariates")
    elif y_test is not None:
        raise ConfigError("y_test given without X_test")

    snap_steps: dict[int, float] = {}
    if grid is not None:
        grid = np.ascontiguousarray(grid, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[1] != dist.p:
            raise DataError(f"snapshot grid has shape {grid.shape}")
        times = [params.horizon] if grid_times is None else list(grid_times)
        for t in times:
            k = round(t / lam)
            if k < 0 or k > n_steps or abs(k * lam - t) > 1e-9 * max(1.0, params.horizon):
                raise ConfigError(f"snapshot time {t} is not a step multiple within the horizon")
            snap_steps[k] = float(t)
    elif grid_times:
        raise ConfigError("grid_times given without grid")

    z0 = initial_constant(kind, dist) if params.init_const is None else float(params.init_const)
    z = np.full(dist.n, z0, dtype=np.float64)
    zt = np.full(X_test.shape[0], z0, dtype=np.float64) if X_test is not None else None
    zg = np.full(grid.shape[0], z0, dtype=np.float64) if grid is not None else None

    # Points the l2_to_target column is measured on.
    if target is not None:
        if X_test is not None:
            target_vals, target_cache = np.asarray(target(X_test), dtype=np.float64).reshape(-1), "test"
        elif grid is not None:
            target_vals, target_cache = np.asarray(target(grid), dtype=np.float64).reshape(-1), "grid"
        else:
            raise ConfigError("target given without held-out points or a grid")
    else:
        target_vals, target_cache = None, None

    rows = n_steps + 1
    times = lam * np.arange(rows)
    train_loss = np.full(rows, np.nan)
    test_loss = np.full(rows, np.nan)
    mean_residual = np.full(rows, np.nan)
    l2_to_target = np.full(rows, np.nan)
    wall_ms = np.zeros(rows)
    grid_values: dict[float, np.ndarray] = {}
    stats = (
        {name: np.full(n_steps, np.nan) for name in
         ("train_d_mean", "train_d_std", "test_d_mean", "test_d_std")}
        if record_step_stats else None
    )

    def fill_row(r):
        train_loss[r] = float(np.mean(loss_value(kind, dist.y, z)))
        mean_residual[r] = float(np.mean(loss_grad(kind, dist.y, z)))
        if zt is not None and y_test is not None:
            test_loss[r] = float(np.mean(loss_value(kind, y_test, zt)))
        if target_vals is not None:
            cur = zt if target_cache == "test" else zg
            l2_to_target[r] = float(np.sqrt(np.mean((cur - target_vals) ** 2)))

    def make_trace(upto, model):
        return FlowTrace(
            params=params, times=times[:upto], train_loss=train_loss[:upto],
            test_loss=test_loss[:upto], mean_residual=mean_residual[:upto],
            l2_to_target=l2_to_target[:upto], wall_ms=wall_ms[:upto],
            grid=grid, grid_values=grid_values,
            step_stats=(
                {k: v[:max(upto - 1, 0)] for k, v in stats.items()} if stats else None
            ),
            model=model,
        )

    fill_row(0)
    if params.init_const is None:
        # The default start is the root of the empirical first-order
        # condition, so its residual mean is zero by construction; recording
        # the remeasured value would only report the start's rounding noise.
        mean_residual[0] = 0.0
    if 0 in snap_steps:
        grid_values[snap_steps[0]] = zg.copy()
    model = EnsembleModel(z0, dist.p)

    for k in range(n_steps):
        tic = time.perf_counter()
        g = loss_grad(kind, dist.y, z)
        h = loss_hess(kind, dist.y, z)
        batch = sample_tree_batch(dist, g, h, params.tree, params.seed, key=key + (k,), count=M)
        if not np.all(np.isfinite(batch.leaf_values)):
            err = BlowupError("tree block contains non-finite leaf values", t=times[k])
            err.trace = make_trace(k + 1, model)
            raise err
        if stats is not None:
            _record_step_stats(stats, k, dist, X_test, g, y_test, zt, kind, batch)
        z = z + lam * batch.mean_at(dist.X)
        if zt is not None:
            zt = zt + lam * batch.mean_at(X_test)
        if zg is not None:
            zg = zg + lam * batch.mean_at(grid)
        model.add_increment(lam, batch)
        if not np.all(np.isfinite(z)):
            err = BlowupError("predictor values are non-finite", t=times[k + 1])
            err.trace = make_trace(k + 1, model)
            raise err
        fill_row(k + 1)
        if (k + 1) in snap_steps:
            grid_values[snap_steps[k + 1]] = zg.copy()
        wall_ms[k + 1] = (time.perf_counter() - tic) * 1000.0

    return make_trace(rows, model)


def _record_step_stats(stats, k, dist, X_test, g_train, y_test, zt, kind, batch):
    d_train = _tree_loss_derivatives(batch, dist.X, g_train, dist)
    stats["train_d_mean"][k] = float(np.mean(d_train))
    stats["train_d_std"][k] = float(np.std(d_train, ddof=1)) if batch.n_trees > 1 else 0.0
    if X_test is not None and y_test is not None:
        g_test = loss_grad(kind, y_test, zt)
        d_test = _tree_loss_derivatives(batch, X_test, g_test, None)
        stats["test_d_mean"][k] = float(np.mean(d_test))
        stats["test_d_std"][k] = float(np.std(d_test, ddof=1)) if batch.n_trees > 1 else 0.0


def _tree_loss_derivatives(batch, X, gvec, dist):
    """mean[g * T_m] for every tree m of the block, shape (m,).

    Depth-1 blocks use per-coordinate prefix sums of g; deeper blocks fall
    back to chunked per-tree evaluation.
    """
    n = X.shape[0]
    m = batch.n_trees
    if batch.depth == 1:
        D = np.empty(m)
        j_star = batch.coords[:, 0]
        cuts = batch.cuts[:, 0]
        lv = batch.leaf_values
        for j in np.unique(j_star):
            mask = j_star == j
            order = dist.order(int(j)) if dist is not None else np.argsort(X[:, int(j)], kind="stable")
            xs = X[order, int(j)]
            cg = np.cumsum(gvec[order])
            tot = float(cg[-1])
            pos = np.searchsorted(xs, cuts[mask], side="right")
            s0 = np.where(pos > 0, cg[pos - 1], 0.0)
            D[mask] = (lv[mask, 0] * s0 + lv[mask, 1] * (tot - s0)) / n
        return D
    D = np.zeros(m)
    step = max(1, batch._CHUNK_ELEMS // max(m, 1))
    for start in range(0, n, step):
        v = batch.values_at(X[start:start + step])
        D += gvec[start:start + step] @ v
    return D / n


def accumulated_stderr(trace: FlowTrace, t0: float, t1: float, side: str = "test") -> float:
    """Monte Carlo standard error of the loss decrement between two times.

    Each step contributes step * std_over_trees / sqrt(mc_trees) to the
    decrement's noise; contributions add in quadrature.  Requires the trace
    to have been recorded with step statistics.
    """
    if trace.step_stats is None:
        raise ConfigError("trace was recorded without step statistics")
    key = {"test": "test_d_std", "train": "train_d_std"}.get(side)
    if key is None:
        raise ConfigError(f"side must be 'train' or 'test', got {side!r}")
    lam = trace.params.step
    k0, k1 = round(t0 / lam), round(t1 / lam)
    if not 0 <= k0 <= k1 <= len(trace.step_stats[key]):
        raise ConfigError(f"times [{t0}, {t1}] outside the recorded trajectory")
    stds = trace.step_stats[key][k0:k1]
    if np.any(np.isnan(stds)):
        raise ConfigError(f"{side} statistics were not recorded")
    var = float(np.sum((lam * stds) ** 2)) / trace.params.mc_trees
    return float(np.sqrt(var))


def trajectory_discrepancy(trace_a: FlowTrace, trace_b: FlowTrace) -> dict:
    """Largest grid L2 gap between two flows' snapshots at common times.

    Both traces must have snapshots on identical grids at the same times;
    anything else is a configuration error, not a zero.
    """
    if trace_a.grid is None or trace_b.grid is None:
        raise ConfigError("both traces need snapshot grids")
    if trace_a.grid.shape != trace_b.grid.shape or not np.array_equal(trace_a.grid, trace_b.grid):
        raise ConfigError("snapshot grids differ")
    ta = sorted(trace_a.grid_values)
    tb = sorted(trace_b.grid_values)
    if ta != tb or not ta:
        raise ConfigError("snapshot schedules differ or are empty")
    per_time = {}
    for t in ta:
        gap = trace_a.grid_values[t] - trace_b.grid_values[t]
        per_time[t] = float(np.sqrt(np.mean(gap * gap)))
    return {"per_time": per_time, "sup": max(per_time.values())}
