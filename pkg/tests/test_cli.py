import json

import numpy as np
import pytest

from renfdi import cli
from renfdi import dataset as ds
from renfdi import training as tr


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for d in ("train", "test", "bank"):
        (root / d).mkdir()
    assert cli.main(["simulate", "--seed", "0", "--out", str(root / "train")]) == 0
    assert cli.main(["simulate", "--seed", "3", "--test", "--count", "2",
                     "--out", str(root / "test")]) == 0
    assert cli.main(["train", "--data", str(root / "train"), "--out", str(root / "bank"),
                     "--epochs", "3"]) == 0
    return root


def test_simulate_default_is_twenty(workspace):
    data = ds.load_set(workspace / "train")
    assert len(data) == 20
    man = json.loads((workspace / "train" / "simulate.manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["seeds"] == {"master_seed": 0}
    assert len(man["config_hash"]) == 64 and man["finished"]


def test_simulate_healthy_only(tmp_path):
    assert cli.main(["simulate", "--healthy-only", "--count", "3", "--out", str(tmp_path)]) == 0
    data = ds.load_set(tmp_path)
    assert len(data) == 3 and all(s.label == () for s in data)


def test_simulate_missing_dir(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path / "missing")]) == cli.EXIT_DATA
    assert "does not exist" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["simulate"]) == cli.EXIT_USAGE
    assert cli.main(["simulate", "--count", "3", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--filter", "9", "--data", "x", "--out", str(tmp_path)]) \
        == cli.EXIT_USAGE


def test_train_outputs(workspace):
    bank = workspace / "bank"
    for i in range(1, 5):
        assert (bank / f"filter_{i}.json").is_file()
        assert len((bank / f"train_log_{i}.csv").read_text().splitlines()) == 4
    man = json.loads((bank / "train.manifest.json").read_text())
    assert man["config"]["training"]["epochs"] == 3


def test_train_single_filter_and_bad_data(workspace, tmp_path):
    assert cli.main(["train", "--filter", "2", "--data", str(workspace / "train"),
                     "--out", str(tmp_path), "--epochs", "1"]) == 0
    assert sorted(p.name for p in tmp_path.glob("filter_*.json")) == ["filter_2.json"]
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) \
        == cli.EXIT_DATA


def test_config_file_and_env(workspace, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"training": {"epochs": 2, "n_z": 3, "n_v": 4}}))
    out = tmp_path / "bank"
    out.mkdir()
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert cli.main(["train", "--filter", "1", "--data", str(workspace / "train"),
                     "--out", str(out)]) == 0
    bank = tr.FilterBank.load(out)
    assert bank.dims.n_z == 3 and bank.dims.n_v == 4
    cfg.write_text(json.dumps({"trainig": {}}))
    assert cli.main(["train", "--data", str(workspace / "train"), "--out", str(out)]) \
        == cli.EXIT_DATA


def test_evaluate(workspace, capsys):
    out = workspace / "table.csv"
    assert cli.main(["evaluate", "--bank", str(workspace / "bank"),
                     "--data", str(workspace / "test"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "Sensor 1 & 2" in text
    assert len(out.read_text().splitlines()) == 4
    assert (workspace / "table.manifest.json").is_file()


def test_infer(workspace):
    out = workspace / "res.csv"
    assert cli.main(["infer", "--bank", str(workspace / "bank"), "--data",
                     str(workspace / "test"), "--scenario", "1", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "k,t,r1,r2,r3,r4" and len(rows) == 81
    assert cli.main(["infer", "--bank", str(workspace / "bank"), "--data",
                     str(workspace / "test"), "--scenario", "99", "--out", str(out)]) \
        == cli.EXIT_DATA


def test_plot(workspace, tmp_path):
    assert cli.main(["plot", "--bank", str(workspace / "bank"), "--data",
                     str(workspace / "test"), "--scenario", "0", "--out", str(tmp_path)]) == 0
    svgs = sorted(p.name for p in tmp_path.glob("*.svg"))
    assert svgs == [f"scenario_0000_filter_{j}.svg" for j in range(1, 5)]
    assert (tmp_path / "scenario_0000_filter_1.svg").read_text().lstrip().startswith("<?xml")


def test_verify_random_bank(tmp_path):
    out = tmp_path / "report.json"
    assert cli.main(["verify", "--seed", "4", "--trials", "5", "--out", str(out)]) == 0
    recs = json.loads(out.read_text())
    assert len(recs) == 24 and all(r["pass"] for r in recs)
    names = {r["name"].split("/")[1] for r in recs}
    assert {"wellposed", "contraction", "iqc"} <= names


def test_verify_failure_exit_code(workspace, tmp_path, monkeypatch):
    def failing_suite(*args, **kwargs):
        return [{"name": "filter_1/iqc", "seed": 0, "pass": False, "worst_margin": -1.0}]
    monkeypatch.setattr(cli.vf, "run_suite", failing_suite)
    out = tmp_path / "report.json"
    code = cli.main(["verify", "--bank", str(workspace / "bank"), "--out", str(out)])
    assert code == cli.EXIT_VERIFY
    assert json.loads(out.read_text())[0]["pass"] is False


def test_infer_healthy_with_trained_bank(trained_bank, tmp_path):
    bank, _ = trained_bank
    (tmp_path / "bank").mkdir()
    (tmp_path / "data").mkdir()
    bank.save(tmp_path / "bank")
    cfg = ds.ScenarioConfig(composition=(((), 3),))
    ds.save_set(ds.build_scenarios(cfg, 11), tmp_path / "data")
    peaks = []
    for sid in range(3):
        out = tmp_path / f"r{sid}.csv"
        assert cli.main(["infer", "--bank", str(tmp_path / "bank"), "--data",
                         str(tmp_path / "data"), "--scenario", str(sid), "--out", str(out)]) == 0
        r = np.loadtxt(out, delimiter=",", skiprows=1)[:, 2:]
        peaks.append(np.abs(r[4:]).max(0))
    peaks = np.max(peaks, 0)
    # warm-up is the k0 = 4 samples excluded from the loss
    assert np.all(peaks < 0.02), f"healthy peak |r_i| per filter: {peaks.round(4)}"
