import pytest

from relmimic import cli
from relmimic.env import load_demos
from relmimic.metrics import read_csv


def test_invalid_variant_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--out", "x", "--variant", "attention"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_override_reports_error(tmp_path, capsys):
    rc = cli.main(["train", "--out", str(tmp_path), "--set", "k=four"])
    assert rc == 2
    assert "invalid value for k" in capsys.readouterr().err


def test_non_positive_count_rejected():
    with pytest.raises(SystemExit):
        cli.main(["train", "--out", "x", "--iters", "0"])


def test_demo_record_then_train_eval_report(tmp_path, capsys):
    demo = tmp_path / "d.rmd"
    assert cli.main(["demo-record", "--n", "1", "--horizon", "10", "--out", str(demo)]) == 0
    assert len(load_demos(demo)) == 1
    run = tmp_path / "run"
    args = ["train", "--out", str(run), "--variant", "non-local-value", "--seeds", "0",
            "--learners", "1", "--iters", "1", "--k", "2",
            "--set", f"demo_path={demo}", "--set", "n_demos=1", "--set", "c_max=8",
            "--set", "n_envs=4", "--set", "minibatch=4", "--set", "disc_batch=4",
            "--set", "eval_episodes=1", "--set", "horizon=10"]
    assert cli.main(args) == 0
    assert (run / "config.txt").read_text().count("variant = non-local-value") == 1
    assert cli.main(["eval", str(run / "seed_0" / "policy.ckpt"), "--episodes", "2"]) == 0
    out = capsys.readouterr().out
    assert "episode 1:" in out and "mean" in out
    (run / "ccdf.csv").unlink()
    assert cli.main(["report", str(run), "--no-plot"]) == 0
    assert read_csv(run / "ccdf.csv")


def test_missing_config_file(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "nope.txt")]) == 2
