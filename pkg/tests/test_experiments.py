import json
import math

import numpy as np
import pytest

from mrgpr import cli
from mrgpr import experiments as ex
from mrgpr.controller import oracle_inverse
from mrgpr.gp_core import Hyperparameters, TrainingPair, fit
from mrgpr.plant import PlantState, ReferenceModel, example_plant, rollout

PLANT = example_plant()
SMALL = ex.ExperimentConfig(T=20, hp_budget=30, horizon=30, grid_resolution=9)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return out, ex.run_pipeline(SMALL, out)


class TestConfig:
    def test_defaults(self):
        cfg = ex.ExperimentConfig()
        assert (cfg.T, cfg.episode_length, cfg.n, cfg.horizon) == (2000, 5, 2, 50)
        assert cfg.input_box == cfg.init_box == (-1.2, 1.2)
        assert cfg.initial_conditions == ex.DEFAULT_INITIAL_CONDITIONS
        assert (cfg.grid_resolution, cfg.fixed_u_prev, cfg.ref_gain) == (49, 0.2, -0.4)

    @pytest.mark.parametrize(
        "bad",
        [dict(T=0), dict(n=3), dict(episode_length=2), dict(horizon=0), dict(ref_gain=1.0),
         dict(input_box=(1.0, -1.0)), dict(grid_resolution=1), dict(tail_fraction=0.0)],
    )
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            ex.ExperimentConfig(**bad)

    def test_json_round_trip(self, tmp_path):
        cfg = SMALL.replace(base_seed=7, initial_conditions=((0.5, -0.5),))
        cfg.save(tmp_path / "c.json")
        assert ex.ExperimentConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ex.ExperimentConfig.from_dict({"T": 3, "bogus": 1})


class TestGrid:
    def test_queries_layout(self):
        Q = ex.grid_queries(np.array([0.5, 1.0]), np.array([0.3]), 0.2, -0.4)
        assert Q.tolist() == [[0.5, 0.2, 0.3, -0.4 * 0.3], [1.0, 0.2, 0.3, -0.4 * 0.3]]

    def test_oracle_surface(self):
        pairs = [TrainingPair((0.0, 0.0, 0.0, 0.0), 0.0)]
        model = fit(pairs, Hyperparameters(1.0, (1.0,) * 4, 1e-8))
        res = ex.grid_eval(model, oracle_inverse(PLANT), ex.GridSpec(-0.5, 0.5, 3), 0.2, -0.4)
        assert res.mu.shape == res.c.shape == (3, 3)
        assert res.c[1, 1] == 0.0  # (y_prev, y) = (0, 0)
        q = ex.grid_queries([0.5], [0.3], 0.2, -0.4)[0]
        assert oracle_inverse(PLANT)(q) == pytest.approx(-0.174043, abs=1e-6)
        assert np.all(res.var >= 0)

    def test_round_trip(self, small_run, tmp_path):
        _, art = small_run
        ex.write_grid(art.grid, tmp_path / "g.csv")
        back = ex.read_grid(tmp_path / "g.csv")
        for name in ("mu", "c", "var"):
            assert np.array_equal(getattr(back, name), getattr(art.grid, name))


class TestStages:
    def test_pair_counts(self):
        assert len(ex.collect(SMALL)[1]) == 60
        eps, ds = ex.collect(ex.ExperimentConfig(T=2000))
        assert len(eps) == 2000 and len(ds) == 6000

    def test_train_escalates_jitter(self, caplog):
        _, ds = ex.collect(SMALL)
        dup = ds.from_pairs(2, list(ds.pairs) + [TrainingPair(tuple(ds.regressors[0] + 1e-9), ds.targets[0])])
        hp = Hyperparameters(1.0, (50.0,) * 4, 0.0)
        model = ex.train(dup, hp)
        assert model.hyperparameters.jitter > 0
        assert "retrying" in caplog.text

    def test_divergent_rollout_is_recorded(self):
        pairs = [TrainingPair((0.0, 0.0, 0.0, 0.0), 0.0)]
        model = fit(pairs, Hyperparameters(1.0, (1.0,) * 4, 1e-8))
        cfg = SMALL.replace(initial_conditions=((2.0, 1.0),))
        (rec,) = ex.run_rollouts(cfg, model)
        assert rec.mrgpr_diverged and rec.mrgpr.horizon < cfg.horizon
        summary = ex.summarize(ex.Artifacts(cfg, [rec]))
        assert summary["rollouts"][0]["mrgpr_limsup"] == math.inf
        assert not summary["passed"]


class TestSummary:
    def test_content(self, small_run):
        _, art = small_run
        s = art.summary
        assert s["T"] == 20 and s["raw_pairs"] == 60 and s["training_pairs"] == 60
        assert len(s["rollouts"]) == 4
        assert all(r["ideal_limsup"] <= ex.IDEAL_LIMSUP_TOL for r in s["rollouts"])
        assert s["checks"]["ideal_converged"]
        assert s["grid_abs_error"]["max"] >= s["grid_abs_error"]["mean"] >= 0

    def test_without_grid_or_rollouts(self):
        s = ex.summarize(ex.Artifacts(SMALL))
        assert s["grid_abs_error"] is None and s["rollouts"] == []

    def test_reloaded_summary_matches(self, small_run):
        out, art = small_run
        again = ex.summarize(ex.load_artifacts(out))
        assert again == art.summary
        assert json.loads((out / "summary.json").read_text()) == json.loads(json.dumps(art.summary))

    def test_trajectories_replay(self, small_run):
        out, _ = small_run
        for k, (y0, z0) in enumerate(SMALL.initial_conditions):
            traj = ex.read_trajectory(out / "trajectories" / f"mrgpr_ic{k}.csv")
            again = rollout(PLANT, list(traj.u), PlantState([z0], y0), traj.horizon)
            assert np.array_equal(again.y, traj.y) and np.array_equal(again.z, traj.z)

    def test_visited_errors_zero_for_ideal(self, small_run):
        _, art = small_run
        errs = ex.visited_errors(art.rollouts[0].ideal, ReferenceModel.linear(-0.4))
        assert errs.max() <= 1e-10


def test_layout(small_run):
    out, _ = small_run
    names = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    expected = {"config.json", "episodes.csv", "dataset.csv", "hyperparameters.json", "model.json",
                "grid.csv", "summary.json"}
    expected |= {f"trajectories/{k}_ic{i}.csv" for k in ("mrgpr", "ideal", "reference") for i in range(4)}
    assert names == expected


def _csvs(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_repeat_run_is_byte_identical(small_run, tmp_path):
    out, _ = small_run
    ex.run_pipeline(SMALL, tmp_path)
    assert _csvs(tmp_path) == _csvs(out)


class TestCli:
    FLAGS = ["--T", "20", "--hp-budget", "30", "--horizon", "30", "--grid-resolution", "9"]

    def test_staged_equals_run(self, small_run, tmp_path, capsys):
        out, _ = small_run
        assert cli.main(["collect", "--out", str(tmp_path), *self.FLAGS]) == 0
        for cmd in ("fit", "train", "rollout", "grid"):
            assert cli.main([cmd, "--out", str(tmp_path)]) == 0
        code = cli.main(["summarize", "--out", str(tmp_path)])
        assert code == (0 if json.loads((out / "summary.json").read_text())["passed"] else 1)
        assert _csvs(tmp_path) == _csvs(out)
        assert (tmp_path / "model.json").read_bytes() == (out / "model.json").read_bytes()

    def test_run_pass(self, tmp_path, capsys):
        code = cli.main(["run", "--out", str(tmp_path), *self.FLAGS])
        text = capsys.readouterr().out
        assert code == (0 if "PASS" in text else 1)
        assert json.loads((tmp_path / "config.json").read_text())["T"] == 20

    def test_failed_checks_exit_1(self, tmp_path, capsys):
        assert cli.main(["run", "--out", str(tmp_path), *self.FLAGS, "--limsup-threshold", "-1"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_stage_error_exit_2(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path)]) == 2
        assert "stage train" in capsys.readouterr().err

    def test_bad_override_exit_2(self, tmp_path, capsys):
        assert cli.main(["collect", "--out", str(tmp_path), "--T", "0"]) == 2
        assert "stage config" in capsys.readouterr().err

    def test_seed_and_tuple_overrides(self, tmp_path):
        args = ["collect", "--out", str(tmp_path), "--seed", "5", "--T", "3", "--input-box", "[-0.5, 0.5]"]
        assert cli.main(args) == 0
        cfg = ex.ExperimentConfig.load(tmp_path / "config.json")
        assert cfg.base_seed == 5 and cfg.input_box == (-0.5, 0.5)

    def test_budget_comparison_mode(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(cli, "DATA_BUDGETS", (5, 40))
        code = cli.main(["run", "--paper", "--out", str(tmp_path), "--hp-budget", "20", "--horizon", "10",
                         "--grid-resolution", "5"])
        comp = json.loads((tmp_path / "comparison.json").read_text())
        assert set(comp["max_grid_abs_error"]) == {"5", "40"}
        assert (tmp_path / "T5" / "summary.json").exists() and (tmp_path / "T40" / "summary.json").exists()
        assert code == (0 if comp["more_data_is_better"] and comp["large_budget_passed"] else 1)
