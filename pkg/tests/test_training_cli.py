import json

import numpy as np
import pytest

from promptdt import cli, envs
from promptdt import data as dp
from promptdt import training as tr
from promptdt.errors import ConfigError, DataError
from promptdt.model import PromptDTModel


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "point_dir"
    envs.generate_dataset("point_dir", out, n_traj_per_noise=2, seed=0)
    return out


def tiny_config(dataset_dir, out_dir, **kw):
    base = dict(
        dataset=str(dataset_dir), out_dir=str(out_dir),
        n_layers=1, n_heads=1, d_model=16, max_seq_len=64, dropout=0.0,
        k_star=2, context_len=4, mlp_dim=8,
        warmup_steps=2, train_steps=3, eval_episodes=1, batch_per_task=2, seeds=[0],
    )
    base.update(kw)
    return tr.ExperimentConfig.from_dict(base)


class TestExperimentConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            tr.ExperimentConfig.from_dict({"dataset": "d", "learning_rate": 1e-4})

    def test_bad_ratio_and_empty_seeds(self):
        with pytest.raises(ConfigError):
            tr.ExperimentConfig(dataset="d", ratio=0.0)
        with pytest.raises(ConfigError):
            tr.ExperimentConfig(dataset="d", seeds=[])

    def test_from_json_with_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"dataset": "d", "train_steps": 50}))
        cfg = tr.ExperimentConfig.from_json(p, {"train_steps": 7, "lr": 0.5})
        assert cfg.train_steps == 7 and cfg.lr == 0.5 and cfg.dataset == "d"

    def test_config_hash_sensitivity(self):
        a = tr.ExperimentConfig(dataset="d")
        b = tr.ExperimentConfig(dataset="d", lr=2e-4)
        assert a.config_hash() == tr.ExperimentConfig(dataset="d").config_hash()
        assert a.config_hash() != b.config_hash()


class TestPolicies:
    def test_scripted_episodes_reproducible(self):
        task = envs.make_tasks("point_dir")[0]
        make = lambda rng: tr.ScriptedWrapper(task, 0.1, rng)
        a = tr.run_episodes(task, make, episodes=3, seed=5)
        b = tr.run_episodes(task, make, episodes=3, seed=5)
        assert np.array_equal(a, b)

    def test_rtg_decrement_and_clamp(self, dataset_dir):
        dataset, _ = dp.normalize(dp.load_dataset(dataset_dir))
        cfg = tiny_config(dataset_dir, "unused")
        mconfig = cfg.model_config(dataset.ds, dataset.da, len(dataset.train_task_ids))
        model = PromptDTModel.create(mconfig, seed=0)
        model.stats = dataset.stats
        task = envs.make_tasks("point_dir")[0]
        pol = tr.ModelPolicy(model, dataset, task, 1.0, np.random.default_rng(0))
        pol.observe(None, 0.4)
        assert pol.rtg == pytest.approx(0.6)
        pol.observe(None, 2.0)
        assert pol.rtg == 0.0  # nonnegative targets are floored
        neg = tr.ModelPolicy(model, dataset, task, -5.0, np.random.default_rng(0))
        neg.observe(None, 1.0)
        assert neg.rtg == pytest.approx(-6.0)  # negative targets keep decrementing

    def test_evaluate_unknown_task(self, dataset_dir):
        dataset, _ = dp.normalize(dp.load_dataset(dataset_dir))
        cfg = tiny_config(dataset_dir, "unused")
        model = PromptDTModel.create(cfg.model_config(dataset.ds, dataset.da, 6), seed=0)
        model.stats = dataset.stats
        with pytest.raises(DataError):
            tr.evaluate(model, dataset, [99], episodes=1)


class TestTrain:
    def test_train_one_smoke(self, dataset_dir):
        cfg = tiny_config(dataset_dir, "unused", reg_mode="classifier")
        model, rows = tr.train_one(cfg, seed=0)
        assert model.target_return > 0
        assert {int(r["task"]) for r in rows} == set([6, 7])
        assert all(np.isfinite(float(r["l_total"])) for r in rows)
        assert all(r["cls_acc"] != "" for r in rows)

    def test_train_writes_artifacts(self, dataset_dir, tmp_path):
        cfg = tiny_config(dataset_dir, tmp_path / "run")
        summary = tr.train(cfg)
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "summary.json").exists()
        assert (tmp_path / "run" / "seed_0" / "checkpoint.nt").exists()
        assert summary["config_hash"] == cfg.config_hash()
        loaded = PromptDTModel.load(tmp_path / "run" / "seed_0")
        assert loaded.train_task_ids == [0, 1, 2, 3, 4, 5]

    def test_metrics_byte_identical_across_runs(self, dataset_dir, tmp_path):
        a = tr.train(tiny_config(dataset_dir, tmp_path / "a", deterministic=True))
        b = tr.train(tiny_config(dataset_dir, tmp_path / "b", deterministic=True))
        ca = (tmp_path / "a" / "metrics.csv").read_bytes()
        cb = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert ca == cb
        assert a["heldout_return_mean"] == b["heldout_return_mean"]

    def test_max_training_return(self, dataset_dir):
        dataset = dp.load_dataset(dataset_dir)
        best = max(tr.max_training_return(dataset) for _ in range(1))
        manual = max(t.rewards.sum() for tid in dataset.train_task_ids for t in dataset.trajectories[tid])
        assert best == pytest.approx(manual)


class TestCli:
    def test_usage_error_exit_1(self):
        assert cli.main(["train"]) == 1  # no dataset and no config
        assert cli.main(["no-such-command"]) == 1

    def test_missing_dataset_path_named(self, capsys):
        rc = cli.main(["train", "--dataset", "/nope/never"])
        assert rc == 1
        assert "/nope/never" in capsys.readouterr().err

    def test_gen_data_rerun_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            rc = cli.main(["--seed", "4", "--out", str(out), "gen-data",
                           "--family", "point_vel", "--n-traj-per-noise", "2"])
            assert rc == 0
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_pretrain_lm(self, tmp_path, capsys):
        corpus = tmp_path / "c.txt"
        corpus.write_text(("the quick brown fox jumps over the lazy dog. " * 300))
        out = tmp_path / "body.nt"
        rc = cli.main(["--out", str(out), "pretrain-lm", "--corpus", str(corpus),
                       "--steps", "2", "--n-layers", "1", "--d-model", "16", "--max-seq-len", "64"])
        assert rc == 0
        assert out.exists()
        assert "val loss" in capsys.readouterr().out

    def test_train_and_eval_round_trip(self, dataset_dir, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config(dataset_dir, tmp_path / "run").to_dict()))
        rc = cli.main(["train", "--config", str(cfg_path)])
        assert rc == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert "heldout_return_mean" in summary
        capsys.readouterr()
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "seed_0"),
                       "--dataset", str(dataset_dir), "--episodes", "1", "--tasks", "6"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert "6" in out and "mean" in out["6"]

    def test_runtime_failure_exit_2(self, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing"),
                         "--dataset", str(tmp_path / "missing")]) == 2
