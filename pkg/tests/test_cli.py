import json

import pytest

from rewardgaze import checkpoint, cli

SMALL = {"train": {"teacher_epochs": 2, "ssl_epochs": 2, "batch_size": 16, "reward_width": 8},
         "cues": {"n_patches": 2, "d_visual": 4, "n_text": 2, "d_text": 4}}


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["datagen", "--out", str(out), "--n-labeled", "40", "--n-unlabeled", "50",
                     "--n-test", "20", "--seed", "3"]) == 0
    return out


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_datagen_counts_and_determinism(tmp_path, data_dir, capsys):
    capsys.readouterr()
    assert cli.main(["datagen", "--out", str(tmp_path / "again"), "--n-labeled", "40", "--n-unlabeled", "50",
                     "--n-test", "20", "--seed", "3"]) == 0
    assert capsys.readouterr().out.splitlines() == ["labeled 40", "unlabeled 50", "test 20"]
    for name in ("labeled.jsonl", "unlabeled.jsonl", "unlabeled.oracle.jsonl", "test.jsonl", "descriptions.jsonl"):
        assert (data_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    first = json.loads((data_dir / "unlabeled.jsonl").read_text().splitlines()[0])
    assert "yaw" not in first and "pitch" not in first


def test_seed_from_environment(tmp_path, monkeypatch, data_dir):
    monkeypatch.setenv(cli.ENV_SEED, "3")
    assert cli.main(["datagen", "--out", str(tmp_path / "env"), "--n-labeled", "40", "--n-unlabeled", "50",
                     "--n-test", "20"]) == 0
    assert (tmp_path / "env" / "labeled.jsonl").read_bytes() == (data_dir / "labeled.jsonl").read_bytes()
    monkeypatch.setenv(cli.ENV_SEED, "nope")
    assert cli.main(["datagen", "--out", str(tmp_path / "bad"), "--n-labeled", "4", "--n-unlabeled", "5"]) == 2


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"seed": 1, "tau": 0.3}}))
    assert cli.load_run_config(str(path)).train.seed == 1
    monkeypatch.setenv(cli.ENV_SEED, "2")
    assert cli.load_run_config(str(path)).train.seed == 2
    rc = cli.load_run_config(str(path), {"seed": 5, "tau": None})
    assert rc.train.seed == 5 and rc.train.tau == 0.3


@pytest.mark.parametrize("content", [
    {"train": {"tau": 2.0}},
    {"train": {"taux": 0.5}},
    {"trian": {}},
    {"cues": {"mode": "carrier-pigeon"}},
])
def test_bad_configs_exit_2(tmp_path, data_dir, content):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(content))
    assert cli.main(["train-teacher", "--data", str(data_dir), "--out", str(tmp_path / "t.ckpt"),
                     "--config", str(path)]) == 2


def test_io_failures_exit_3(tmp_path, data_dir):
    assert cli.main(["train-teacher", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t.ckpt")]) == 3
    assert cli.main(["train-teacher", "--data", str(data_dir), "--out", str(tmp_path / "t.ckpt"),
                     "--config", str(tmp_path / "nope.json")]) == 3
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--model", str(tmp_path / "junk.ckpt"), "--data", str(data_dir / "test.jsonl"),
                     "--out", str(tmp_path / "e.json")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(tmp_path, data_dir):
    path = tmp_path / "hot.json"
    path.write_text(json.dumps({"train": {"lr_teacher": 1e30, "weight_decay": 0.0, "teacher_epochs": 3}}))
    assert cli.main(["train-teacher", "--data", str(data_dir), "--out", str(tmp_path / "t.ckpt"),
                     "--config", str(path)]) == 4


def test_full_flow(tmp_path, data_dir, config, capsys):
    teacher = tmp_path / "teacher.ckpt"
    assert cli.main(["train-teacher", "--data", str(data_dir), "--out", str(teacher), "--config", config]) == 0
    assert json.loads((tmp_path / "teacher.ckpt.history.json").read_text())[0]["phase"] == "teacher"

    pseudo = tmp_path / "pseudo.jsonl"
    assert cli.main(["pseudo-label", "--teacher", str(teacher), "--unlabeled", str(data_dir / "unlabeled.jsonl"),
                     "--out", str(pseudo)]) == 0
    assert len(pseudo.read_text().splitlines()) == 50

    run = tmp_path / "run"
    assert cli.main(["train-ssl", "--data", str(data_dir), "--teacher", str(teacher), "--out", str(run),
                     "--config", config, "--refresh-interval", "0"]) == 0
    history = json.loads((run / "history.json").read_text())
    assert [r["phase"] for r in history] == ["ssl", "ssl"]
    assert not any(r["refreshed"] for r in history)
    ev = json.loads((run / "eval.json").read_text())
    assert ev["dataset"] == "test" and ev["n"] == 20

    out = tmp_path / "eval.json"
    assert cli.main(["eval", "--model", str(run / "student.ckpt"), "--data", str(data_dir / "test.jsonl"),
                     "--out", str(out)]) == 0
    assert json.loads(out.read_text())["mean_deg"] == pytest.approx(ev["mean_deg"])
    assert cli.main(["eval", "--model", str(run / "student.ckpt"), "--data", str(data_dir / "unlabeled.jsonl"),
                     "--oracle", str(data_dir / "unlabeled.oracle.jsonl"), "--out", str(out)]) == 0
    assert cli.main(["eval", "--model", str(run / "student.ckpt"), "--data", str(data_dir / "unlabeled.jsonl"),
                     "--out", str(out)]) == 2

    scores = tmp_path / "scores.json"
    assert cli.main(["score", "--reward", str(run / "reward.ckpt"), "--student", str(run / "student.ckpt"),
                     "--data", str(data_dir / "unlabeled.jsonl"), "--labels", str(pseudo),
                     "--out", str(scores), "--config", config]) == 0
    rows = json.loads(scores.read_text())
    assert len(rows) == 50 and all(0 < r["initial"] < 1 and 0 < r["final"] < 1 for r in rows)
    assert checkpoint.load_model(run / "reward.ckpt", "reward") is not None


def test_ablate_with_custom_grid(tmp_path, data_dir, config, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"baseline": {"objective_weights": [1, 0]}, "full": {}}))
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--data", str(data_dir), "--grid", str(grid), "--seeds", "0",
                     "--out", str(out), "--config", config]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert {r["config"] for r in rows} == {"baseline", "full"}
    assert (out / "ablation.csv").exists() and (out / "ablation.md").exists()
    grid.write_text(json.dumps({"x": {"lr_student": 1.0}}))
    assert cli.main(["ablate", "--data", str(data_dir), "--grid", str(grid), "--out", str(out)]) == 2


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for name in ("datagen", "train-teacher", "pseudo-label", "train-ssl", "eval", "score", "ablate"):
        assert name in text
