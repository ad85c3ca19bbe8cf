import json

import pytest

from hbcidrive import cli

TINY_CFG = """\
seed = 3
[dqn]
total_steps = 600
warmup = 200
qtrace_every = 5
probe_size = 8
[metrics]
eval_episodes = 3
"""

OUTPUTS = ("objects.csv", "calibration_trials.csv", "viewed_trials.csv", "hdca_scores.csv",
           "tag_labels.csv", "tag_graph.csv", "train_episodes.csv", "train_dwell.csv",
           "qtrace.csv", "eval_episodes.csv", "eval_dwell.csv", "report.csv")


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def test_unknown_key_cites_file_and_line(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("seed = 1\n[dqn]\ngama = 0.9\n")
    assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert f"{path}:3" in err and "gama" in err


def test_bad_values_are_config_errors(tmp_path, capsys):
    cases = ["seed = x\n", "[nosuch]\na = 1\n", "[dqn]\ngamma = 1.5\n"]
    for k, text in enumerate(cases):
        path = tmp_path / f"bad{k}.cfg"
        path.write_text(text)
        assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "absent.cfg")]) == 2
    assert cli.main(["synth", "--subject", "11", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


def test_missing_inputs_exit_one(tmp_path, capsys):
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(["tag", "--out", str(tmp_path)]) == 1
    assert "missing input" in capsys.readouterr().err


def test_strict_repro_needs_seed(tmp_path, capsys):
    assert cli.main(["synth", "--strict-repro", "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_config_file_overrides_preset(tiny_cfg):
    cfg = cli.load_config(tiny_cfg)
    assert cfg.seed == 3 and cfg.dqn.total_steps == 600 and cfg.metrics.eval_episodes == 3
    assert cfg.dqn.gamma == cli.DESK_TRAIN.gamma
    assert cli.load_config(tiny_cfg, preset="paper").env.frame_size == 64
    assert cli.load_config().arch.input_shape == (3, 32, 32)


def test_stage_seeds_are_distinct_and_stable():
    seeds = {cli.stage_seed(0, s) for s in cli.STAGES}
    assert len(seeds) == len(cli.STAGES)
    assert cli.stage_seed(5, "train") == cli.stage_seed(5, "train")


def test_pipeline_is_byte_reproducible(tmp_path, tiny_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["pipeline", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    for name in OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "qnet.bin").read_bytes() == (b / "qnet.bin").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "pipeline"
    assert set(manifest["results"]) == set(cli.STAGES)
    assert manifest["config_sha256"] == cli.load_config(tiny_cfg).digest()
    assert "numpy" in manifest["versions"]
    assert "report:" in capsys.readouterr().out


def test_stages_run_one_at_a_time(tmp_path, tiny_cfg):
    out = tmp_path / "s"
    for stage in cli.STAGES:
        assert cli.main([stage, "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["command"] == "report"
    assert (out / "report.csv").is_file()
    # evaluating an explicit checkpoint
    assert cli.main(["eval", "--config", str(tiny_cfg), "--out", str(out),
                     "--checkpoint", str(out / "qnet.bin")]) == 0
