import json
import subprocess
import sys


from prefdistill import cli, pipeline
from prefdistill.errors import ResumableAbort

from conftest import tiny_world


def run(*args):
    return subprocess.run([sys.executable, "-m", "prefdistill", *map(str, args)],
                          capture_output=True, text=True)


def test_help_lists_defaults():
    out = run("--help")
    assert out.returncode == 0
    for key in ('"lr0": 1e-06', '"groups_per_step": 1000', '"patience": 5', '"max_parallel": 8'):
        assert key in out.stdout


def test_full_cycle(tmp_path, capsys):
    _, path = tiny_world(tmp_path)
    assert cli.main(["label", "--config", str(path), "--log-level", "WARNING"]) == 0
    labels = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert {l["split"] for l in labels} == {"val", "test"}

    assert cli.main(["train", "--config", str(path), "--dry-run"]) == 0
    assert json.loads(capsys.readouterr().out)["teacher_calls_per_step"] == 20

    assert cli.main(["train", "--config", str(path), "--log-level", "WARNING"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["teacher_calls"] == 80 and summary["steps"] == 4

    assert cli.main(["eval", "--config", str(path)]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["mean_percentile"] <= 100

    assert cli.main(["retrieve", "--config", str(path), "--persona", "val-0001", "--k", "3"]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["rank"] for r in rows] == [1, 2, 3]
    assert rows[0]["score"] >= rows[1]["score"] >= rows[2]["score"]


def test_seed_override(tmp_path, capsys):
    _, path = tiny_world(tmp_path)
    cli.main(["label", "--config", str(path)])
    cli.main(["train", "--config", str(path), "--seed", "3"])
    state = json.loads((tmp_path / "run/checkpoints/last/train_state.json").read_text())
    assert state["seed"] == 3


def test_config_error_exit_code(tmp_path):
    (tmp_path / "bad.json").write_text('{"optimizer": {"nope": 1}}')
    out = run("train", "--config", tmp_path / "bad.json")
    assert out.returncode == 2 and "config error" in out.stderr
    assert run("eval", "--config", tmp_path / "missing.json").returncode == 2


def test_missing_labels_is_config_error(tmp_path):
    _, path = tiny_world(tmp_path)
    assert cli.main(["train", "--config", str(path)]) == 2


def test_teacher_failure_exit_code(tmp_path):
    # nothing listens on port 9; every attempt fails fast
    _, path = tiny_world(tmp_path, teacher={"kind": "http", "cache": None,
                                            "http": {"url": "http://127.0.0.1:9/", "max_retries": 0}})
    assert cli.main(["label", "--config", str(path), "--log-level", "ERROR"]) == 3


def test_resumable_abort_exit_code(tmp_path, monkeypatch):
    _, path = tiny_world(tmp_path)

    def boom(*a, **k):
        raise ResumableAbort("stopped")

    monkeypatch.setattr(pipeline, "train", boom)
    assert cli.main(["train", "--config", str(path)]) == 4


def test_retrieve_errors(tmp_path, capsys):
    _, path = tiny_world(tmp_path)
    cli.main(["label", "--config", str(path)])
    cli.main(["train", "--config", str(path)])
    capsys.readouterr()
    assert cli.main(["retrieve", "--config", str(path), "--persona", "ghost"]) == 1
    assert "ghost" in capsys.readouterr().err
    assert cli.main(["retrieve", "--config", str(path), "--persona", "val-0000", "--k", "999"]) == 1


def test_synth_command(tmp_path):
    out = run("synth", "--out", tmp_path / "w", "--images", 32, "--train", 5, "--val", 2, "--test", 2, "--dim", 4)
    assert out.returncode == 0
    cfg = json.loads((tmp_path / "w" / "config.json").read_text())
    assert cfg["student"]["dim"] == 4
