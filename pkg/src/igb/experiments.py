"""Config-driven experiment runner.

Every experiment kind reads one ExperimentConfig, derives all of its
randomness from the single master seed, and writes its artifacts (CSV
tables, model dumps, a manifest) into its own output directory.  Sweeping
kinds fan tasks out over a process pool sized by the IGB_WORKERS environment
variable; tasks are seeded by their position in the task list and results
are reduced in task order, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import functools
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .domain import TreeParams, write_csv
from .errors import BlowupError, ConfigError
from .flow import FlowParams, integrate_flow
from .generators import GeneratorSpec, bayes_target, generate_dataset, relabel_pm1, truth
from .losses import LOSS_KINDS
from .operator import operator_discrepancy
from .population import (
    GridFunction,
    RectangleFamily,
    anova_projection,
    beta0_operator_matrix,
    critical_point_residual,
    estimate_pi0,
    gc_sup_discrepancy,
    lattice_points,
    pi0_envelope_fit,
    uniform_product_tail,
)
from .trees import derive_rng

KINDS = (
    "flow", "operator-convergence", "trajectory-convergence", "pi0",
    "project", "critical", "gc", "beta0-operator",
)

# Spawn-key namespaces for harness-level randomness.  Module-level samplers
# key their streams by small indices (step, tree, predictor), so harness
# keys start far above anything they generate.
_DATA_KEY = 1_000_000
_REF_KEY = 1_000_001
_SWEEP_KEY = 1_000_002
_MC_KEY = 1_000_003

_TAIL_EPS = (0.5, 0.1, 0.01)
_TAIL_DRAWS = 1_000_000
_ENVELOPE_WIDTHS = tuple(2.0 ** -k for k in range(2, 8))


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of one experiment run."""

    kind: str
    seed: int
    loss: str
    tree: TreeParams
    data: GeneratorSpec
    n: int
    out_dir: str
    test_n: int = 0
    ref_n: int = 100_000
    sweep_n: tuple = (100, 1_000, 10_000)
    sweep_seeds: int = 10
    step: float = 0.02
    horizon: float = 5.0
    mc_trees: int = 1000
    init_const: float | None = None
    grid_resolution: int = 32
    schemes: int = 4000
    order: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.test_n < 0 or self.ref_n < 1 or self.sweep_seeds < 1 or self.schemes < 1:
            raise ConfigError("test_n/ref_n/sweep_seeds/schemes out of range")
        if not self.out_dir:
            raise ConfigError("output directory is empty")
        if self.tree.dim != self.data.dim:
            raise ConfigError("tree dim does not match data dim")
        if any(int(v) < 1 for v in self.sweep_n):
            raise ConfigError(f"sweep_n entries must be >= 1, got {self.sweep_n}")


_TREE_DEFAULTS = {"depth": 1, "proposals": 10, "beta": 2.0}
_FLOW_DEFAULTS = {"loss": "l2", "step": 0.02, "horizon": 5.0, "mc_trees": 1000,
                  "init_const": None}
_DATA_DEFAULTS = {"generator": "linear", "dim": 1, "n": 1000, "noise": 0.0,
                  "test_n": 0, "ref_n": 100_000, "sweep_n": [100, 1_000, 10_000],
                  "sweep_seeds": 10}
_TOP_DEFAULTS = {"seed": 0, "grid_resolution": 32, "schemes": 4000, "order": None}


def config_from_mapping(kind: str, mapping: dict) -> ExperimentConfig:
    """Build a config from a TOML-shaped mapping with defaults filled in.

    Recognized sections: [tree], [flow], [data], [output]; top-level keys:
    seed, grid_resolution, schemes, order.  Unknown keys are rejected so
    typos fail loudly instead of silently using a default.
    """
    mapping = dict(mapping or {})
    tree_map = _section(mapping, "tree", _TREE_DEFAULTS)
    flow_map = _section(mapping, "flow", _FLOW_DEFAULTS)
    data_map = _section(mapping, "data", _DATA_DEFAULTS)
    out_map = _section(mapping, "output", {"dir": "igb-out"})
    top = dict(_TOP_DEFAULTS)
    for k, v in mapping.items():
        if k not in top:
            raise ConfigError(f"unknown config key {k!r}")
        top[k] = v
    spec = GeneratorSpec(name=data_map["generator"], dim=int(data_map["dim"]),
                         noise=float(data_map["noise"]))
    tree = TreeParams(depth=int(tree_map["depth"]), proposals=int(tree_map["proposals"]),
                      temperature=float(tree_map["beta"]), dim=spec.dim)
    return ExperimentConfig(
        kind=kind,
        seed=int(top["seed"]),
        loss=str(flow_map["loss"]),
        tree=tree,
        data=spec,
        n=int(data_map["n"]),
        out_dir=str(out_map["dir"]),
        test_n=int(data_map["test_n"]),
        ref_n=int(data_map["ref_n"]),
        sweep_n=tuple(int(v) for v in data_map["sweep_n"]),
        sweep_seeds=int(data_map["sweep_seeds"]),
        step=float(flow_map["step"]),
        horizon=float(flow_map["horizon"]),
        mc_trees=int(flow_map["mc_trees"]),
        init_const=None if flow_map["init_const"] is None else float(flow_map["init_const"]),
        grid_resolution=int(top["grid_resolution"]),
        schemes=int(top["schemes"]),
        order=None if top["order"] is None else int(top["order"]),
    )


def _section(mapping: dict, name: str, defaults: dict) -> dict:
    got = mapping.pop(name, {})
    if not isinstance(got, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    merged = dict(defaults)
    for k, v in got.items():
        if k not in defaults:
            raise ConfigError(f"unknown key {k!r} in config section [{name}]")
        merged[k] = v
    return merged


def run_experiment(config: ExperimentConfig) -> dict:
    """Run one experiment, writing artifacts into config.out_dir.

    The manifest (full config plus package version) is written before the
    run starts, so even aborted runs record what was attempted.  Returns
    the summary dict, which is also saved as summary.json.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    _write_json(os.path.join(config.out_dir, "manifest.json"), {
        "kind": config.kind,
        "version": _package_version(),
        "config": _config_dict(config),
    })
    summary = _jsonable(_RUNNERS[config.kind](config))
    _write_json(os.path.join(config.out_dir, "summary.json"), summary)
    return summary


def _config_dict(config: ExperimentConfig) -> dict:
    return {
        "kind": config.kind,
        "seed": config.seed,
        "loss": config.loss,
        "tree": {"depth": config.tree.depth, "proposals": config.tree.proposals,
                 "beta": config.tree.temperature, "dim": config.tree.dim},
        "data": {"generator": config.data.name, "dim": config.data.dim,
                 "noise": config.data.noise, "n": config.n, "test_n": config.test_n,
                 "ref_n": config.ref_n, "sweep_n": list(config.sweep_n),
                 "sweep_seeds": config.sweep_seeds},
        "flow": {"step": config.step, "horizon": config.horizon,
                 "mc_trees": config.mc_trees, "init_const": config.init_const},
        "output": {"dir": config.out_dir},
        "grid_resolution": config.grid_resolution,
        "schemes": config.schemes,
        "order": config.order,
    }


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("igb")
    except Exception:
        return "unknown"


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not np.isfinite(x) else x
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _worker_count() -> int:
    raw = os.environ.get("IGB_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ConfigError(f"IGB_WORKERS must be an integer, got {raw!r}") from None


def _map_tasks(fn, tasks: list) -> list:
    """Run fn over tasks, in order, optionally on a process pool.

    Results are collected by task index, so the reduction is identical for
    any worker count.
    """
    workers = _worker_count()
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _load_train(config: ExperimentConfig, n: int, key: tuple):
    dist = generate_dataset(config.data, n, config.seed, key=key)
    if config.loss == "exp" and config.data.classification:
        dist = relabel_pm1(dist)
    return dist


def _eval_grid(config: ExperimentConfig) -> np.ndarray:
    """Grid the run's function-space metrics are computed on.

    Low dimensions get the full lattice; higher dimensions fall back to a
    deterministic uniform scatter (a lattice would be astronomically big).
    """
    if config.data.dim <= 2:
        return lattice_points(config.data.dim, config.grid_resolution)
    rng = derive_rng(config.seed, _MC_KEY, 1)
    return rng.random((config.grid_resolution ** 2, config.data.dim))


def _snapshot_times(config: ExperimentConfig, quarters: bool = True) -> list:
    flow = _flow_params(config)
    ks = {flow.n_steps}
    if quarters:
        ks.update({0, flow.n_steps // 4, flow.n_steps // 2, (3 * flow.n_steps) // 4})
    return [k * config.step for k in sorted(ks)]


def _flow_params(config: ExperimentConfig) -> FlowParams:
    return FlowParams(
        kind=config.loss, tree=config.tree, step=config.step,
        horizon=config.horizon, mc_trees=config.mc_trees, seed=config.seed,
        init_const=config.init_const,
    )


def _convergence_predictors(config: ExperimentConfig) -> list:
    """Fixed three-model set the convergence sweeps evaluate the operator on."""
    target = bayes_target(config.data, config.loss)

    def halfway(X):
        return 0.5 * target(X)

    return [target, 0.0, halfway]


# ---------------------------------------------------------------------------
# flow


def _run_flow(config: ExperimentConfig) -> dict:
    dist = _load_train(config, config.n, (_DATA_KEY, 0))
    X_test = y_test = None
    if config.test_n > 0:
        tdist = _load_train(config, config.test_n, (_DATA_KEY, 1))
        X_test, y_test = tdist.X, tdist.y
    target = bayes_target(config.data, config.loss)
    grid = _eval_grid(config)
    times = _snapshot_times(config)
    flow = _flow_params(config)
    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    try:
        trace = integrate_flow(dist, flow, X_test=X_test, y_test=y_test,
                               target=target, grid=grid, grid_times=times)
    except BlowupError as err:
        partial = getattr(err, "trace", None)
        if partial is not None:
            partial.to_csv(metrics_path)
        raise
    trace.to_csv(metrics_path)
    with open(os.path.join(config.out_dir, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(trace.model.to_json())
    rows = []
    for t in sorted(trace.grid_values):
        vals = trace.grid_values[t]
        rows.extend([t, *grid[i], vals[i]] for i in range(grid.shape[0]))
    cols = ["t"] + [f"x{k + 1}" for k in range(grid.shape[1])] + ["value"]
    write_csv(os.path.join(config.out_dir, "flow_grid.csv"), cols, np.array(rows))
    return {
        "kind": "flow",
        "n_steps": flow.n_steps,
        "final_train_loss": trace.train_loss[-1],
        "final_test_loss": trace.test_loss[-1],
        "final_mean_residual": trace.mean_residual[-1],
        "final_l2_to_target": trace.l2_to_target[-1],
    }


# ---------------------------------------------------------------------------
# operator-convergence / trajectory-convergence / gc sweeps


def _operator_task(config: ExperimentConfig, task: tuple) -> dict:
    ni, si = task
    n = config.sweep_n[ni]
    dist_n = _load_train(config, n, (_SWEEP_KEY, ni, si))
    ref = _load_train(config, config.ref_n, (_REF_KEY,))
    res = operator_discrepancy(
        dist_n, ref, config.loss, _convergence_predictors(config), config.tree,
        config.mc_trees, _eval_grid(config), config.seed, key=(ni, si),
    )
    return {"n": n, "seed": si, "sup": res["max"], "stderr": res["stderr"]}


def _run_operator_convergence(config: ExperimentConfig) -> dict:
    tasks = list(itertools.product(range(len(config.sweep_n)), range(config.sweep_seeds)))
    rows = _map_tasks(functools.partial(_operator_task, config), tasks)
    return _convergence_report(config, rows, "operator_convergence.csv")


def _trajectory_task(config: ExperimentConfig, ref_values: dict, task: tuple) -> dict:
    ni, si = task
    n = config.sweep_n[ni]
    dist_n = _load_train(config, n, (_SWEEP_KEY, ni, si))
    trace = integrate_flow(dist_n, _flow_params(config), grid=_eval_grid(config),
                           grid_times=sorted(ref_values), key=(_SWEEP_KEY, ni, si))
    sup = max(
        float(np.sqrt(np.mean((trace.grid_values[t] - ref_values[t]) ** 2)))
        for t in ref_values
    )
    return {"n": n, "seed": si, "sup": sup}


def _run_trajectory_convergence(config: ExperimentConfig) -> dict:
    ref = _load_train(config, config.ref_n, (_REF_KEY,))
    times = _snapshot_times(config, quarters=False)
    ref_trace = integrate_flow(ref, _flow_params(config), grid=_eval_grid(config),
                               grid_times=times, key=(_REF_KEY,))
    tasks = list(itertools.product(range(len(config.sweep_n)), range(config.sweep_seeds)))
    rows = _map_tasks(
        functools.partial(_trajectory_task, config, ref_trace.grid_values), tasks
    )
    return _convergence_report(config, rows, "trajectory_convergence.csv")


def _gc_task(config: ExperimentConfig, task: tuple) -> dict:
    ni, si = task
    n = config.sweep_n[ni]
    dist_n = _load_train(config, n, (_SWEEP_KEY, ni, si))
    ref = _load_train(config, config.ref_n, (_REF_KEY,))
    family = RectangleFamily(config.data.dim, max_active=min(config.tree.depth, config.data.dim))
    sup = gc_sup_discrepancy(dist_n, ref, config.loss,
                             _convergence_predictors(config), family)
    return {"n": n, "seed": si, "sup": sup}


def _run_gc(config: ExperimentConfig) -> dict:
    tasks = list(itertools.product(range(len(config.sweep_n)), range(config.sweep_seeds)))
    rows = _map_tasks(functools.partial(_gc_task, config), tasks)
    return _convergence_report(config, rows, "gc.csv")


def _convergence_report(config: ExperimentConfig, rows: list, csv_name: str) -> dict:
    cols = list(rows[0].keys())
    table = np.array([[row[c] for c in cols] for row in rows], dtype=np.float64)
    write_csv(os.path.join(config.out_dir, csv_name), cols, table)
    medians = {}
    for n in config.sweep_n:
        sups = [row["sup"] for row in rows if row["n"] == n]
        medians[int(n)] = float(np.median(sups))
    write_csv(
        os.path.join(config.out_dir, "medians.csv"), ["n", "median_sup"],
        np.array([[float(n), medians[n]] for n in sorted(medians)]),
    )
    ordered = [medians[n] for n in sorted(medians)]
    return {
        "kind": config.kind,
        "medians": {str(n): medians[n] for n in sorted(medians)},
        "strictly_decreasing": bool(all(a > b for a, b in zip(ordered, ordered[1:]))),
    }


# ---------------------------------------------------------------------------
# pi0


def _run_pi0(config: ExperimentConfig) -> dict:
    est = estimate_pi0(config.tree, config.schemes, config.seed)
    est.to_csv(os.path.join(config.out_dir, "atoms.csv"))
    d = config.tree.depth
    rng = derive_rng(config.seed, _MC_KEY, 0)
    draws = rng.random((_TAIL_DRAWS, d)).prod(axis=1)
    tail_rows = []
    for eps in _TAIL_EPS:
        closed = uniform_product_tail(d, eps)
        mc = float(np.mean(draws <= eps))
        z = (mc - closed) / np.sqrt(closed * (1 - closed) / _TAIL_DRAWS)
        tail_rows.append([eps, closed, mc, z])
    write_csv(os.path.join(config.out_dir, "tail.csv"),
              ["eps", "closed_form", "monte_carlo", "z_score"], np.array(tail_rows))
    fit = pi0_envelope_fit(est, d, _ENVELOPE_WIDTHS)
    write_csv(
        os.path.join(config.out_dir, "envelope.csv"), ["width", "mass", "ratio"],
        np.column_stack([fit["widths"], fit["masses"], fit["ratios"]]),
    )
    return {
        "kind": "pi0",
        "atoms": int(est.points.shape[0]),
        "max_tail_z": max(abs(r[3]) for r in tail_rows),
        "envelope_constant": fit["constant"],
        "envelope_max_log_residual": fit["max_log_residual"],
    }


# ---------------------------------------------------------------------------
# project


def _run_project(config: ExperimentConfig) -> dict:
    p = config.data.dim
    q = config.grid_resolution
    order = config.order if config.order is not None else min(config.tree.depth, p)
    gf = GridFunction.from_callable(truth(config.data), p, q)
    proj = anova_projection(gf, order)
    twice = anova_projection(proj, order)
    cols = [f"x{k + 1}" for k in range(p)] + ["f", "projection"]
    write_csv(
        os.path.join(config.out_dir, "projection.csv"), cols,
        np.column_stack([gf.points(), gf.values.reshape(-1), proj.values.reshape(-1)]),
    )
    return {
        "kind": "project",
        "order": order,
        "l2_distance": gf.l2_distance(proj),
        "idempotence_residual": proj.l2_distance(twice),
    }


# ---------------------------------------------------------------------------
# critical


def _run_critical(config: ExperimentConfig) -> dict:
    dist = _load_train(config, config.n, (_DATA_KEY, 0))
    family = RectangleFamily(config.data.dim, max_active=min(config.tree.depth, config.data.dim))
    target = bayes_target(config.data, config.loss)
    r_bayes = critical_point_residual(dist, config.loss, target, family)
    trace = integrate_flow(dist, _flow_params(config))
    r_flow = critical_point_residual(dist, config.loss, trace.model, family)
    write_csv(
        os.path.join(config.out_dir, "critical.csv"), ["bayes_residual", "flow_residual"],
        np.array([[r_bayes, r_flow]]),
    )
    return {
        "kind": "critical",
        "family_size": len(family),
        "bayes_residual": r_bayes,
        "flow_residual": r_flow,
    }


# ---------------------------------------------------------------------------
# beta0-operator


def _run_beta0(config: ExperimentConfig) -> dict:
    if config.tree.temperature != 0.0:
        raise ConfigError("beta0-operator experiments need beta = 0")
    if config.loss != "l2":
        raise ConfigError("the cell-basis operator comparison is defined for squared loss")
    q = config.grid_resolution
    op = beta0_operator_matrix(config.tree, q, config.schemes, config.seed)
    op.to_csv(os.path.join(config.out_dir, "matrix.csv"))
    eigs = op.eigenvalues()
    write_csv(os.path.join(config.out_dir, "spectrum.csv"), ["eigenvalue"], eigs[:, None])

    dist = _load_train(config, config.n, (_DATA_KEY, 0))
    grid = lattice_points(config.data.dim, q)
    times = _snapshot_times(config)
    trace = integrate_flow(dist, _flow_params(config), grid=grid, grid_times=times)
    target_cells = truth(config.data)(grid)
    g0 = trace.model.base - target_cells
    rows = []
    for t in sorted(trace.grid_values):
        predicted = target_cells + op.semigroup_values(g0, t)
        gap = float(np.sqrt(np.mean((trace.grid_values[t] - predicted) ** 2)))
        rows.append([t, gap])
    write_csv(os.path.join(config.out_dir, "semigroup.csv"),
              ["t", "flow_vs_semigroup_l2"], np.array(rows))
    ones = np.ones(op.matrix.shape[0])
    return {
        "kind": "beta0-operator",
        "schemes": config.schemes,
        "min_eigenvalue": float(eigs[0]),
        "max_eigenvalue": float(eigs[-1]),
        "constant_eigen_residual": float(np.max(np.abs(op.matrix @ ones - ones))),
        "mc_stderr": op.stderr,
        "max_semigroup_gap": max(r[1] for r in rows),
    }


_RUNNERS = {
    "flow": _run_flow,
    "operator-convergence": _run_operator_convergence,
    "trajectory-convergence": _run_trajectory_convergence,
    "pi0": _run_pi0,
    "project": _run_project,
    "critical": _run_critical,
    "gc": _run_gc,
    "beta0-operator": _run_beta0,
}
