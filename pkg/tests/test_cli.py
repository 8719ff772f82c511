import json

import numpy as np
import pytest

from flame import checkpoint, cli
from flame.data import PAPER_PROPORTIONS, class_counts, read_kpjl


def write_config(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def toy(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["generate", "--profile", "toy", "--out", str(out), "--seed", "1"]) == 0
    return out


def test_generate_writes_dataset_and_manifest(toy, capsys):
    data = toy / "data"
    assert sorted(p.name for p in data.iterdir()) == [
        "config.ini", "manifest.json", "test.kpjl", "train.kpjl", "val.kpjl"]
    sizes = [len(read_kpjl(data / f"{s}.kpjl")) for s in ("train", "val", "test")]
    assert sizes == [120, 40, 40]
    manifest = json.loads((data / "manifest.json").read_text())
    assert sorted(manifest) == ["0", "1"]
    assert sum(len(v) for v in manifest.values()) == 120


def test_generate_is_byte_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cli.main(["generate", "--profile", "toy", "--out", str(out)])
        outs.append({p.name: p.read_bytes() for p in (out / "data").iterdir() if p.name != "config.ini"})
    assert outs[0] == outs[1]


def test_paper_profile_partition_and_proportions(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", "[experiment]\nprofile = paper\n\n"
                                           "[data]\nn_samples = 560\nframes_raw = 2\n")
    out = tmp_path / "paper"
    assert cli.main(["generate", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest) == 56
    labels = [s.label for split in ("train", "val", "test")
              for s in read_kpjl(out / "data" / f"{split}.kpjl")]
    assert np.bincount(labels).tolist() == class_counts(PAPER_PROPORTIONS, 560).tolist()
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:2] == ["client", "forward_fall"]
    assert len(table) == 1 + 56


def test_toy_train_evaluate_and_report(toy, capsys):
    for algo in ("centralized", "fedavg", "flame"):
        assert cli.main(["train", "--profile", "toy", "--out", str(toy), "--algo", algo,
                         "--parallel", "1"]) == 0
        run = toy / algo
        for name in ("runlog.jsonl", "final.flam", "metrics.csv", "confusion.csv", "config.ini"):
            assert (run / name).exists(), (algo, name)
    assert cli.main(["evaluate", "--profile", "toy", "--out", str(toy), "--algo", "flame"]) == 0
    for name in ("evaluation.csv", "confusion_test.csv", "keypoint_importance.csv", "time_importance.csv"):
        assert (toy / "flame" / name).exists()
    capsys.readouterr()
    logs = [str(toy / a / "runlog.jsonl") for a in ("centralized", "fedavg", "flame")]
    assert cli.main(["report", *logs, "--out", str(toy / "report")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[:5] == ["method", "accuracy", "precision", "recall", "f1"]
    assert "transmission reduction" in out
    assert (toy / "report" / "report.csv").read_text().count("\n") == 4


def test_policy_all_transmits_like_fedavg(tmp_path):
    cfg = write_config(tmp_path / "c.ini", "[experiment]\nprofile = toy\n\n"
                                           "[train]\nrounds = 2\nselection_policy = all\n")
    out = tmp_path / "x"
    cli.main(["generate", "--config", cfg, "--out", str(out)])
    for algo in ("fedavg", "flame"):
        cli.main(["train", "--config", cfg, "--out", str(out), "--algo", algo])
    cols = [[r["transmitted_params"] for r in map(json.loads, (out / a / "runlog.jsonl").open())]
            for a in ("fedavg", "flame")]
    assert cols[0] == cols[1]
    assert (out / "fedavg" / "final.flam").read_bytes() == (out / "flame" / "final.flam").read_bytes()


def test_training_is_independent_of_parallelism(tmp_path):
    cfg = write_config(tmp_path / "c.ini", "[experiment]\nprofile = toy\n\n"
                                           "[data]\nclients = 4\n\n[train]\nrounds = 2\n")
    blobs = []
    for par in ("1", "3"):
        out = tmp_path / f"p{par}"
        cli.main(["generate", "--config", cfg, "--out", str(out)])
        cli.main(["train", "--config", cfg, "--out", str(out), "--parallel", par])
        blobs.append(((out / "flame" / "runlog.jsonl").read_bytes(),
                      (out / "flame" / "final.flam").read_bytes()))
    assert blobs[0] == blobs[1]


def paper_accounting_run(tmp_path, algo):
    cfg = write_config(tmp_path / "acct.ini",
                       "[experiment]\nprofile = paper\n\n"
                       "[data]\nn_samples = 10\nclients = 2\nframes_raw = 2\n\n"
                       "[train]\nrounds = 2\nwarmup_rounds = 1\nlocal_epochs = 0\n")
    out = tmp_path / "acct"
    if not (out / "data").exists():
        cli.main(["generate", "--config", cfg, "--out", str(out)])
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--algo", algo]) == 0
    return out / algo / "runlog.jsonl"


def test_report_reduction_for_budget_policy(tmp_path, capsys):
    logs = [str(paper_accounting_run(tmp_path, a)) for a in ("fedavg", "flame")]
    rows, reduction, warnings = cli.cmd_report(logs)
    assert 38.0 <= reduction <= 45.0
    assert warnings == 0 and [r["name"] for r in rows] == ["fedavg", "flame"]
    assert "FLAMe vs FedAvg transmission reduction: 41.0%" in capsys.readouterr().out


def test_report_single_log_and_incomplete_rows(tmp_path, capsys):
    log = tmp_path / "r.jsonl"
    log.write_text(json.dumps({"round": 1, "test_accuracy": None, "precision": None, "recall": None,
                               "f1": None, "transmitted_params": 10, "cumulative_params": 10}) + "\n")
    rows, reduction, warnings = cli.cmd_report([str(log)])
    assert len(rows) == 1 and reduction is None
    assert rows[0]["incomplete"] and warnings == 1
    assert "incomplete" in capsys.readouterr().out.splitlines()[1]


def test_report_rejects_malformed_logs(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert cli.main(["report", str(bad)]) == 1
    assert "malformed" in capsys.readouterr().err
    bad.write_text('{"round": 1}\n')
    assert cli.main(["report", str(bad)]) == 1


def test_config_error_exit_code_and_field_path(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", "[train]\nbudget_fraction = 2\n")
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "config error: train" in capsys.readouterr().err


def test_train_without_data_fails_cleanly(tmp_path, capsys):
    assert cli.main(["train", "--profile", "toy", "--out", str(tmp_path / "none")]) == 1
    assert "flame generate" in capsys.readouterr().err


def test_checkpoint_matches_run(toy):
    cli.main(["train", "--profile", "toy", "--out", str(toy), "--algo", "centralized"])
    params = checkpoint.load(toy / "centralized" / "final.flam")
    assert "pos_spatial" in params and params["pos_spatial"].shape == (17, 16)


def test_log_level_from_environment(monkeypatch, toy, capsys):
    monkeypatch.setenv("FLAME_LOG_LEVEL", "error")
    cli.main(["train", "--profile", "toy", "--out", str(toy), "--algo", "flame"])
    assert capsys.readouterr().err == ""
    monkeypatch.setenv("FLAME_LOG_LEVEL", "info")
    cli.main(["train", "--profile", "toy", "--out", str(toy), "--algo", "flame"])
    assert "round 1:" in capsys.readouterr().err
