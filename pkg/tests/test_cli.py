import csv
import json

import pytest

from riveral.cli import main
from riveral.synth import SynthConfig, generate_basin

SMALL = dict(synth={"n_segments": 4, "obs_fraction": [0.2, 0.4]}, period_years=1, hidden=4, mc_samples=2,
             finetune_steps=1, finetune_window=60, passes=1, final_epochs=3, calib_rounds=1, batch_size=16)


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


@pytest.fixture
def exported(tmp_path):
    return generate_basin(SynthConfig(n_segments=3, years=1, seed=0)).to_csv(tmp_path / "csv")


def test_ingest_validate_reports_coverage(exported, capsys):
    rc = main(["ingest-validate", "--features", str(exported["features"]),
               "--observations", str(exported["observations"]), "--edges", str(exported["edges"])])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["segments"] == 3 and set(report["coverage"]) == {"s0", "s1", "s2"}


def test_ingest_validate_data_error_exit_code(exported, capsys):
    with open(exported["observations"], "a") as fh:
        fh.write("1980-10-02,nowhere,1.0\n")
    rc = main(["ingest-validate", "--features", str(exported["features"]),
               "--observations", str(exported["observations"]), "--edges", str(exported["edges"])])
    assert rc == 3 and "nowhere" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"gama": 0.5}))
    assert main(["test", "--config", str(tmp_path / "bad.json"), "--policy", "random"]) == 2
    assert "gama" in capsys.readouterr().err


def test_train_then_test_round_trip(cfg, tmp_path, capsys):
    assert main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "tr")]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["test", "--config", cfg, "--seed", "3", "--pretrained", ckpt, "--out", str(tmp_path / "te")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["policy"] == "grreal" and res["n_labeled"] <= res["budget"]
    with open(tmp_path / "te/labeled.csv") as fh:
        assert next(csv.reader(fh)) == ["day", "segment_id", "granted", "reason"]
    assert main(["report", str(tmp_path / "te")]) == 0
    assert "evaluation RMSE" in capsys.readouterr().out


def test_grreal_test_without_checkpoint_is_a_config_error(cfg, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["test", "--config", cfg]) == 2
    assert [p.name for p in tmp_path.iterdir()] == ["config.json"]


def test_pretrain_writes_a_loadable_checkpoint(cfg, tmp_path, capsys):
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "pre")]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["train", "--config", cfg, "--pretrained", ckpt, "--out", str(tmp_path / "tr")]) == 0


@pytest.mark.parametrize("policy", ["random", "uncertainty", "udc"])
def test_baseline_flags(cfg, tmp_path, capsys, policy):
    rc = main(["test", "--config", cfg, "--policy", policy, "--budget", "7", "--graph-variant", "none",
               "--target", "flow", "--out", str(tmp_path)])
    assert rc == 0
    res = json.loads(capsys.readouterr().out)
    assert (res["policy"], res["budget"], res["graph_variant"], res["target"]) == (policy, 7, "none", "flow")


def test_sweep_and_report(cfg, tmp_path, capsys):
    out = str(tmp_path / "sw")
    assert main(["sweep", "--config", cfg, "--seeds", "0", "1", "--policies", "random", "--out", out]) == 0
    assert "random" in capsys.readouterr().out
    assert main(["report", out]) == 0
    assert "mean" in capsys.readouterr().out
    assert main(["report", str(tmp_path)]) == 2
