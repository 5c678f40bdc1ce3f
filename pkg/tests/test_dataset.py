import json

import numpy as np
import pytest

from renfdi import dataset as ds


@pytest.fixture(scope="module")
def default_set():
    return ds.build_scenarios(ds.ScenarioConfig(), master_seed=0)


def test_default_composition(default_set):
    assert len(default_set) == 20
    assert default_set.composition_counts() == {(): 5, (1,): 5, (2,): 5, (1, 2): 5}


def test_healthy_only():
    cfg = ds.ScenarioConfig(composition=(((), 5),))
    data = ds.build_scenarios(cfg, 3)
    assert len(data) == 5
    for s in data:
        assert s.label == () and not s.faults.any()
        np.testing.assert_array_equal(s.measured, s.y)


def test_shapes_and_grid(default_set):
    s = default_set.scenarios[0]
    assert s.u.shape == (2001, 2) and s.y.shape == (80, 4)
    assert s.faults.shape == (80, 4) and s.u_filter.shape == (80, 2)
    np.testing.assert_array_equal(s.u_filter, s.u[0:2000:25])


def test_faults_follow_labels(default_set):
    for s in default_set:
        for j in range(4):
            col = s.faults[:, j]
            if j + 1 in s.label:
                assert not col[:40].any() and col[40:].any()
            else:
                assert not col.any()


def test_same_seed_same_manifest(tmp_path, default_set):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ds.save_set(default_set, a)
    ds.save_set(ds.build_scenarios(ds.ScenarioConfig(), 0), b)
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_zero_scenario_gives_zero_input():
    cfg = ds.ScenarioConfig(composition=(((), 1),))
    s = ds.build_scenarios(cfg, 0).scenarios[0]
    zero = ds.Scenario(id=0, seed=0, label=(), u=np.zeros_like(s.u), y=np.zeros_like(s.y),
                       faults=np.zeros_like(s.faults), measured=np.zeros_like(s.y),
                       onset_sample=40, road_draws=[], fault_draws={})
    x = ds.filter_input(zero)
    assert x.shape == (80, 6) and not x.any()


def test_sensor_1_fault_changes_only_column_3():
    cfg_h = ds.ScenarioConfig(composition=(((1,), 1),))
    s = ds.build_scenarios(cfg_h, 4).scenarios[0]
    healthy = np.hstack([s.u_filter, s.y])
    diff = ds.filter_input(s) - healthy
    assert diff[:, 2].any()
    assert not np.delete(diff, 2, axis=1).any()


def test_training_pairs(default_set):
    by_label = {}
    for s in default_set:
        by_label.setdefault(s.label, s)
    healthy, f2, both = by_label[()], by_label[(2,)], by_label[(1, 2)]
    _, target = ds.training_pairs([healthy], 3)[0]
    assert not target.any()
    x, target = ds.training_pairs([f2], 1)[0]
    assert not target.any() and np.any(x[:, 3] != f2.y[:, 1])
    _, target = ds.training_pairs([both], 2)[0]
    np.testing.assert_array_equal(target, both.faults[:, 1])
    with pytest.raises(ValueError):
        ds.training_pairs([both], 5)


def test_round_trip_is_exact(tmp_path, default_set):
    ds.save_set(default_set, tmp_path)
    again = ds.load_set(tmp_path)
    assert again.config == default_set.config and again.master_seed == 0
    for a, b in zip(default_set, again):
        assert a.label == b.label and a.onset_sample == b.onset_sample
        for f in ("u", "y", "faults", "measured"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
        np.testing.assert_array_equal(ds.filter_input(a), ds.filter_input(b))


def test_draws_regenerate_sequences(tmp_path, default_set):
    from renfdi.signals import evaluate_multisine
    ds.save_set(default_set, tmp_path)
    s = ds.load_set(tmp_path).scenarios[7]
    t = np.arange(2001) / 100.0
    np.testing.assert_array_equal(s.u[:, 0], evaluate_multisine(s.road_draws[0], t))


def test_truncated_csv(tmp_path, default_set):
    ds.save_set(default_set, tmp_path)
    f = tmp_path / "scenario_0003.csv"
    f.write_text("\n".join(f.read_text().splitlines()[:-5]) + "\n")
    with pytest.raises(ds.DatasetError, match="expected 80 rows"):
        ds.load_set(tmp_path)


def test_tampered_csv(tmp_path, default_set):
    ds.save_set(default_set, tmp_path)
    f = tmp_path / "scenario_0001.csv"
    f.write_text(f.read_text().replace("0.", "1.", 1))
    with pytest.raises(ds.DatasetError, match="checksum"):
        ds.load_set(tmp_path)


def test_unknown_version(tmp_path, default_set):
    ds.save_set(default_set, tmp_path)
    m = tmp_path / "manifest.json"
    doc = json.loads(m.read_text())
    doc["format_version"] = "renfdi-dataset/99"
    m.write_text(json.dumps(doc))
    with pytest.raises(ds.DatasetError, match="unsupported"):
        ds.load_set(tmp_path)


def test_missing_directory(tmp_path, default_set):
    with pytest.raises(FileNotFoundError):
        ds.save_set(default_set, tmp_path / "nope")


def test_config_validation():
    with pytest.raises(ds.DatasetError):
        ds.ScenarioConfig(composition=(((5,), 1),))
    with pytest.raises(ds.DatasetError):
        ds.ScenarioConfig(plant_rate=100, filter_rate=3)


def test_config_dict_round_trip():
    cfg = ds.ScenarioConfig(composition=(((1, 2), 3),), onset_fraction=0.25)
    assert ds.ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
