"""CLI tests: subcommand wiring, bundled reward-check scenes, deterministic
SVG output, config diagnostics, and smoke train/eval/demo runs."""

import json
import math

import numpy as np
import pytest

from teamhoi.cli import build_parser, main

SMALL_POLICY = dict(obs=dict(proprio_dim=14, object_dim=201, target_dim=3,
                             teammate_dim=9),
                    action_dim=9, d_model=16, n_heads=2, n_blocks=1, ff_dim=32,
                    tokenizer_hidden=[32, 24], head_hidden=[64, 32])


def write_config(path, out_dir, iters=2):
    doc = {
        "seed": 0,
        "iters": iters,
        "stage": "formation-only",
        "out_dir": str(out_dir),
        "checkpoint_every": 1,
        "env": {"team_size": 2, "episode_len": 30,
                "table": {"shape": "square", "dimensions": 1.6}},
        "ppo": {"horizon": 6, "n_envs": 2, "minibatch_size": 64, "epochs": 1,
                "lr": 1e-4, "team_size_mix": [[2, 1.0]]},
        "policy": SMALL_POLICY,
    }
    path.write_text(json.dumps(doc))
    return doc


class TestRewardCheck:
    def run_json(self, capsys, *argv):
        rc = main(["reward-check", *argv])
        out = capsys.readouterr().out
        assert rc == 0
        return json.loads(out)

    def test_square_4_midpoints(self, capsys):
        doc = self.run_json(capsys, "square-4-midpoints")
        assert doc["agents"][0]["r_cov"] == pytest.approx(1.0, abs=1e-9)

    def test_two_same_edge(self, capsys):
        doc = self.run_json(capsys, "two-same-edge")
        assert doc["agents"][0]["r_cov"] == pytest.approx(0.375, abs=1e-9)

    def test_ideal_grip(self, capsys):
        doc = self.run_json(capsys, "ideal-grip")
        for agent in doc["agents"]:
            assert agent["r_contact"] == pytest.approx(1.0, abs=1e-12)
            assert agent["r_hand"] == pytest.approx(1.0, abs=1e-9)

    def test_verbose_geometry(self, capsys):
        doc = self.run_json(capsys, "square-4-midpoints", "--verbose")
        geo = doc["geometry"]
        assert geo["u1"] == [1.0, 0.0]
        assert geo["g1"] == pytest.approx(1.0)
        assert len(geo["support_hull"]) == 8

    def test_custom_scene_task_total(self, tmp_path, capsys):
        scene = {"table": {"shape": "round", "dimensions": 2.0},
                 "target": [4.0, 0.0],
                 "agents": [{"root": [1.3, 0.0], "heading": math.pi}]}
        p = tmp_path / "scene.json"
        p.write_text(json.dumps(scene))
        doc = self.run_json(capsys, str(p))
        agent = doc["agents"][0]
        assert agent["r_walk_pos"] == pytest.approx(1.0)  # 0.3 m gap exactly
        assert agent["r_ang"] == 1.0  # single agent

    def test_missing_scene_errors(self, capsys):
        rc = main(["reward-check", "no-such-scene.json"])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_malformed_scene_names_field(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"table": {"shape": "square", "dimensions": 1.6},
                                 "target": [1, 0],
                                 "agents": [{"root": [0, 0]}]}))
        rc = main(["reward-check", str(p)])
        assert rc == 1
        assert "agents[0]" in capsys.readouterr().err


class TestPlot:
    def test_trajectory_plot_deterministic(self, tmp_path, capsys):
        assert main(["demo", "--team-size", "2", "--shape", "square",
                     "--episode-len", "80", "--seed", "4",
                     "--out", str(tmp_path / "traj.jsonl")]) == 0
        out1 = tmp_path / "a.svg"
        out2 = tmp_path / "b.svg"
        assert main(["plot", str(tmp_path / "traj.jsonl"), "--out", str(out1)]) == 0
        assert main(["plot", str(tmp_path / "traj.jsonl"), "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_metrics_plot(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        write_config(cfg, tmp_path / "run")
        assert main(["train", "--config", str(cfg)]) == 0
        svg = tmp_path / "curves.svg"
        assert main(["plot", str(tmp_path / "run" / "metrics.csv"),
                     "--out", str(svg)]) == 0
        assert svg.read_bytes().startswith(b"<?xml")

    def test_unreadable_input_errors(self, tmp_path, capsys):
        rc = main(["plot", str(tmp_path / "missing.jsonl"),
                   "--out", str(tmp_path / "x.svg")])
        assert rc == 1


class TestTrainEval:
    def test_train_smoke_and_resume(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        write_config(cfg, tmp_path / "run", iters=2)
        assert main(["train", "--config", str(cfg)]) == 0
        metrics = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert len(metrics) == 3  # header + one row per iteration
        assert (tmp_path / "run" / "checkpoint.pt").exists()
        # resume two more iterations
        assert main(["train", "--config", str(cfg), "--iters", "4",
                     "--resume", str(tmp_path / "run" / "checkpoint.pt")]) == 0
        metrics = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert len(metrics) == 5

    def test_invalid_config_diagnostics(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"iters": 2, "unknown_field": 1}))
        with pytest.raises(SystemExit) as err:
            main(["train", "--config", str(cfg)])
        assert "unknown_field" in str(err.value)

    def test_eval_oracle_grid(self, tmp_path, capsys):
        assert main(["eval", "--policy", "oracle", "--team-sizes", "2",
                     "--shapes", "square,round", "--episodes", "2",
                     "--episode-len", "600", "--seed", "0",
                     "--out", str(tmp_path / "ev"), "--per-episode"]) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert len(report["rows"]) == 2
        assert all(r["sr_percent"] == 100.0 for r in report["rows"])
        assert (tmp_path / "ev" / "report.csv").exists()
        assert (tmp_path / "ev" / "report.svg").exists()
        assert (tmp_path / "ev" / "episodes.jsonl").exists()

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        rc = main(["eval", "--policy", str(tmp_path / "none.pt"),
                   "--out", str(tmp_path / "ev")])
        assert rc == 1

    def test_eval_trained_checkpoint_runs(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        write_config(cfg, tmp_path / "run", iters=1)
        assert main(["train", "--config", str(cfg)]) == 0
        # trainer checkpoints carry actor+critic in policy-checkpoint format
        assert main(["eval", "--policy", str(tmp_path / "run" / "policy.pt"),
                     "--team-sizes", "2", "--shapes", "square",
                     "--episodes", "1", "--episode-len", "30",
                     "--out", str(tmp_path / "ev2")]) == 0

    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval", "--help"])
        out = capsys.readouterr().out
        for flag in ("--policy", "--team-sizes", "--shapes", "--episodes",
                     "--seed", "--out"):
            assert flag in out


class TestDemo:
    def test_demo_metrics_json(self, tmp_path, capsys):
        assert main(["demo", "--team-size", "2", "--shape", "rectangle",
                     "--seed", "9", "--out", str(tmp_path / "t.jsonl")]) == 0
        first_line = capsys.readouterr().out.splitlines()[0]
        m = json.loads(first_line)
        assert m["success"] is True and m["d_final"] == 0.03

    def test_demo_trajectory_loadable(self, tmp_path, capsys):
        from teamhoi.world import load_trajectory

        assert main(["demo", "--team-size", "2", "--shape", "square",
                     "--episode-len", "50", "--seed", "1",
                     "--out", str(tmp_path / "t.jsonl")]) == 0
        states = load_trajectory(tmp_path / "t.jsonl")
        assert len(states) == 51
        assert states[0].n_agents == 2
