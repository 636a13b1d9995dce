"""Data generators, config parsing, the experiment runner, and the CLI."""

import json
import os

import numpy as np
import pytest

from igb.cli import main
from igb.errors import ConfigError
from igb.experiments import ExperimentConfig, config_from_mapping, run_experiment
from igb.generators import GeneratorSpec, bayes_target, generate_dataset, relabel_pm1, truth


class TestGenerators:
    def test_noiseless_regression_labels_equal_the_truth(self):
        spec = GeneratorSpec("linear", dim=2, noise=0.0)
        dist = generate_dataset(spec, 200, seed=1)
        np.testing.assert_array_equal(dist.y, truth(spec)(dist.X))

    def test_truth_frozen_values(self):
        X2 = np.array([[0.25, 0.5]])
        assert truth(GeneratorSpec("linear", 2))(X2)[0] == 0.25
        assert truth(GeneratorSpec("product", 2))(X2)[0] == 0.125
        assert truth(GeneratorSpec("step", 2))(X2)[0] == 0.0
        assert truth(GeneratorSpec("step", 2))(np.array([[0.7, 0.1]]))[0] == 1.0
        # sin(pi/2)/2 + 1/4 on the first axis, sin(pi)/2 + 1/2 on the second
        got = truth(GeneratorSpec("additive-sine", 2))(X2)[0]
        assert got == pytest.approx(0.75 + 0.5, rel=1e-12)
        p = truth(GeneratorSpec("bernoulli-logit", 1))(np.array([[0.25]]))[0]
        assert p == pytest.approx(1 / (1 + np.e), rel=1e-12)

    def test_covariates_shared_across_noise_levels(self):
        quiet = generate_dataset(GeneratorSpec("linear", 1, 0.0), 50, seed=2)
        noisy = generate_dataset(GeneratorSpec("linear", 1, 0.5), 50, seed=2)
        np.testing.assert_array_equal(quiet.X, noisy.X)
        assert not np.array_equal(quiet.y, noisy.y)

    def test_same_seed_reproduces_the_draw(self):
        spec = GeneratorSpec("product", dim=3, noise=0.1)
        a = generate_dataset(spec, 100, seed=3, key=(7,))
        b = generate_dataset(spec, 100, seed=3, key=(7,))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_classification_labels_are_binary_and_centered(self):
        # the logit is odd around x1 = 1/2, so labels average to 1/2
        spec = GeneratorSpec("bernoulli-logit", dim=1)
        dist = generate_dataset(spec, 100_000, seed=4)
        assert set(np.unique(dist.y)) <= {0.0, 1.0}
        assert abs(dist.y.mean() - 0.5) <= 4 * 0.5 / np.sqrt(100_000)

    def test_product_label_mean(self):
        spec = GeneratorSpec("product", dim=2, noise=0.0)
        dist = generate_dataset(spec, 100_000, seed=5)
        sigma = np.sqrt((1 / 3) ** 2 - (1 / 4) ** 2)
        assert abs(dist.y.mean() - 0.25) <= 5 * sigma / np.sqrt(100_000)

    def test_relabel_to_sign_labels(self):
        dist = generate_dataset(GeneratorSpec("bernoulli-logit", 1), 500, seed=6)
        pm = relabel_pm1(dist)
        np.testing.assert_array_equal(pm.y, 2.0 * dist.y - 1.0)
        assert set(np.unique(pm.y)) <= {-1.0, 1.0}
        with pytest.raises(ConfigError):
            relabel_pm1(generate_dataset(GeneratorSpec("linear", 1, 0.1), 50, seed=7))

    def test_classification_optimum_uses_the_loss_link(self):
        spec = GeneratorSpec("bernoulli-logit", dim=1)
        X = np.linspace(0.05, 0.95, 7)[:, None]
        p = truth(spec)(X)
        np.testing.assert_allclose(bayes_target(spec, "l2")(X), p, rtol=1e-12)
        np.testing.assert_allclose(
            bayes_target(spec, "logloss")(X), np.log(p / (1 - p)), rtol=1e-10
        )
        np.testing.assert_allclose(
            bayes_target(spec, "exp")(X), 0.5 * np.log(p / (1 - p)), rtol=1e-10
        )

    def test_regression_law_rejects_label_losses(self):
        with pytest.raises(ConfigError):
            bayes_target(GeneratorSpec("linear", 1), "logloss")

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            GeneratorSpec("cubic", 1)
        with pytest.raises(ConfigError):
            GeneratorSpec("linear", 0)
        with pytest.raises(ConfigError):
            GeneratorSpec("linear", 1, noise=-0.5)
        with pytest.raises(ConfigError):
            generate_dataset(GeneratorSpec("linear", 1), 0, seed=8)


class TestConfigMapping:
    def test_defaults(self):
        config = config_from_mapping("flow", {})
        assert config.kind == "flow"
        assert config.seed == 0
        assert config.loss == "l2"
        assert (config.tree.depth, config.tree.proposals, config.tree.temperature) == (1, 10, 2.0)
        assert (config.data.name, config.data.dim, config.data.noise) == ("linear", 1, 0.0)
        assert (config.n, config.test_n, config.ref_n) == (1000, 0, 100_000)
        assert config.sweep_n == (100, 1_000, 10_000)
        assert (config.step, config.horizon, config.mc_trees) == (0.02, 5.0, 1000)
        assert config.init_const is None
        assert config.out_dir == "igb-out"
        assert (config.grid_resolution, config.schemes, config.order) == (32, 4000, None)

    def test_sections_override_defaults(self):
        config = config_from_mapping("pi0", {
            "seed": 11,
            "order": 2,
            "tree": {"depth": 3, "beta": 0.0},
            "flow": {"loss": "exp", "init_const": 0.25},
            "data": {"generator": "bernoulli-logit", "dim": 2, "n": 64},
            "output": {"dir": "elsewhere"},
        })
        assert config.seed == 11 and config.order == 2
        assert config.tree.depth == 3 and config.tree.temperature == 0.0
        assert config.tree.proposals == 10  # untouched default
        assert config.loss == "exp" and config.init_const == 0.25
        assert config.data.name == "bernoulli-logit" and config.n == 64
        assert config.out_dir == "elsewhere"

    def test_tree_dimension_follows_the_data(self):
        config = config_from_mapping("flow", {"data": {"dim": 3}})
        assert config.tree.dim == 3

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"sede": 1})

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"tree": {"depht": 2}})

    def test_section_must_be_a_table(self):
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"tree": 3})

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping("warp", {})

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"data": {"n": 0}})
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"data": {"sweep_n": [100, 0]}})
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"flow": {"loss": "huber"}})
        with pytest.raises(ConfigError):
            config_from_mapping("flow", {"output": {"dir": ""}})


def _project_config(out_dir, **overrides) -> ExperimentConfig:
    mapping = {
        "grid_resolution": 8,
        "data": {"generator": "product", "dim": 2, "n": 10},
        "output": {"dir": str(out_dir)},
    }
    for key, value in overrides.items():
        mapping[key] = value
    return config_from_mapping("project", mapping)


class TestRunExperiment:
    def test_manifest_records_the_full_config(self, tmp_path):
        config = _project_config(tmp_path / "run", seed=21, order=1)
        run_experiment(config)
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["kind"] == "project"
        assert "version" in manifest
        saved = manifest["config"]
        assert saved["seed"] == 21 and saved["order"] == 1
        assert saved["grid_resolution"] == 8
        assert saved["data"]["generator"] == "product" and saved["data"]["dim"] == 2
        assert saved["tree"] == {"depth": 1, "proposals": 10, "beta": 2.0, "dim": 2}
        assert saved["flow"]["step"] == 0.02 and saved["flow"]["init_const"] is None
        assert saved["output"]["dir"] == str(tmp_path / "run")

    def test_summary_round_trips_through_disk(self, tmp_path):
        summary = run_experiment(_project_config(tmp_path / "run", order=1))
        on_disk = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert on_disk == summary

    def test_projection_artifacts(self, tmp_path):
        summary = run_experiment(_project_config(tmp_path / "run", order=1))
        assert (tmp_path / "run" / "projection.csv").exists()
        # the product has a genuine interaction, so order one loses mass
        assert summary["l2_distance"] > 0.01
        assert summary["idempotence_residual"] <= 1e-12

    def test_pi0_artifacts(self, tmp_path):
        config = config_from_mapping("pi0", {
            "schemes": 200,
            "output": {"dir": str(tmp_path / "run")},
        })
        summary = run_experiment(config)
        for name in ("atoms.csv", "tail.csv", "envelope.csv"):
            assert (tmp_path / "run" / name).exists()
        # depth-one interval schemes keep 3 of their 4 leaf corners
        assert summary["atoms"] == 3 * 200
        assert summary["max_tail_z"] <= 4.0


class TestCli:
    def test_success_prints_summary_and_exits_zero(self, tmp_path, capsys):
        code = main([
            "project", "--generator", "product", "--dim", "2",
            "--grid-resolution", "8", "--order", "1", "--out", str(tmp_path / "run"),
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["kind"] == "project"

    def test_config_error_exits_two_with_structured_stderr(self, tmp_path, capsys):
        code = main(["flow", "--n", "0", "--out", str(tmp_path / "run")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"
        assert err["type"] == "ConfigError"

    def test_missing_config_file_exits_two(self, tmp_path, capsys):
        code = main(["flow", "--config", str(tmp_path / "nope.toml")])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["error"] == "config"

    def test_malformed_config_file_exits_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[tree\ndepth = 2\n")
        assert main(["flow", "--config", str(bad)]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "config"

    def test_unknown_key_in_config_file_exits_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[tree]\ndepht = 2\n")
        assert main(["flow", "--config", str(bad)]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "config"

    def test_blowup_exits_one_and_keeps_the_partial_trace(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main([
            "flow", "--loss", "logloss", "--generator", "bernoulli-logit",
            "--n", "40", "--step", "4.0", "--horizon", "2000",
            "--mc-trees", "2", "--depth", "1", "--proposals", "5",
            "--beta", "2.0", "--seed", "3", "--grid-resolution", "4",
            "--out", str(out),
        ])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "numerical"
        assert err["type"] == "BlowupError"
        assert err["t"] == 12.0
        # steps that completed before the failure are preserved on disk
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("t,") and len(lines) == 5

    def test_command_line_flags_override_the_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            '[flow]\nstep = 0.5\nhorizon = 1.0\nmc_trees = 20\n'
            '[data]\nn = 30\n[output]\ndir = "%s"\n' % (tmp_path / "a")
        )
        code = main(["flow", "--config", str(cfg), "--step", "0.25",
                     "--out", str(tmp_path / "b")])
        capsys.readouterr()
        assert code == 0
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert manifest["config"]["flow"]["step"] == 0.25
        assert manifest["config"]["flow"]["mc_trees"] == 20
        assert not (tmp_path / "a").exists()

    def test_sweep_sizes_parse_from_a_comma_list(self, tmp_path, capsys):
        code = main([
            "gc", "--sweep-n", "50,100", "--sweep-seeds", "2", "--ref-n", "400",
            "--noise", "0.1", "--out", str(tmp_path / "run"),
        ])
        capsys.readouterr()
        assert code == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["config"]["data"]["sweep_n"] == [50, 100]


def _sweep_args(out_dir) -> list:
    return [
        "operator-convergence", "--sweep-n", "50,100", "--sweep-seeds", "2",
        "--ref-n", "400", "--mc-trees", "40", "--noise", "0.1",
        "--grid-resolution", "4", "--seed", "9", "--out", str(out_dir),
    ]


def _strip_last_column(text: str) -> list:
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


class TestDeterminism:
    def test_worker_count_does_not_change_sweep_output(self, tmp_path, capsys, monkeypatch):
        outputs = []
        for workers, name in (("1", "serial"), ("3", "pool")):
            monkeypatch.setenv("IGB_WORKERS", workers)
            assert main(_sweep_args(tmp_path / name)) == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]
        for name in ("operator_convergence.csv", "medians.csv"):
            a = (tmp_path / "serial" / name).read_bytes()
            b = (tmp_path / "pool" / name).read_bytes()
            assert a == b

    def test_bad_worker_count_exits_two(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("IGB_WORKERS", "many")
        assert main(_sweep_args(tmp_path / "run")) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "config"

    def test_flow_rerun_is_bitwise_identical(self, tmp_path, capsys):
        args = lambda name: [
            "flow", "--n", "200", "--noise", "0.1", "--step", "0.05",
            "--horizon", "1.0", "--mc-trees", "50", "--test-n", "100",
            "--grid-resolution", "4", "--seed", "12", "--out", str(tmp_path / name),
        ]
        assert main(args("a")) == 0
        assert main(args("b")) == 0
        capsys.readouterr()
        for name in ("model.json", "flow_grid.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        # metrics agree except for the wall-clock column
        a = _strip_last_column((tmp_path / "a" / "metrics.csv").read_text())
        b = _strip_last_column((tmp_path / "b" / "metrics.csv").read_text())
        assert a == b
