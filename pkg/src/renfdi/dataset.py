"""Scenario assembly, filter inputs, training pairs and persistence.

Conventions:

* plant inputs are sampled at 100 Hz on ``t = k / 100``, ``k = 0 .. 2000``;
* filter data live on the 4 Hz grid, where sample ``k`` is plant sample
  ``25 k`` (plain decimation, no anti-alias filter), ``k = 0 .. 79``;
* sensor faults are added on the 4 Hz grid: ``measured = clean + fault``;
* the filter input is ``(u1, u2, ym1, ym2, ym3, ym4)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant
from .signals import (FAULT_SPEC, ROAD_SPEC, MultisineDraw, MultisineSpec,
                      draw_multisine, evaluate_multisine, make_rng)

FORMAT_VERSION = "renfdi-dataset/1"
N_INPUTS = 2
N_SENSORS = 4
SCENARIO_COLUMNS = ["k", "t", "u1", "u2", "y1", "y2", "y3", "y4",
                    "f1", "f2", "f3", "f4", "ym1", "ym2", "ym3", "ym4"]
INPUT_COLUMNS = ["t", "u1", "u2"]

# stream ids inside a scenario's seed key
_ROAD, _FAULT = 0, 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """What to generate.

    ``composition`` lists ``(faulty sensors, count)`` pairs; an empty sensor
    tuple is the healthy class. ``onset_fraction`` places every fault onset at
    that fraction of the 4 Hz horizon.
    """

    composition: tuple[tuple[tuple[int, ...], int], ...] = (
        ((), 5), ((1,), 5), ((2,), 5), ((1, 2), 5))
    duration: float = 20.0
    plant_rate: float = 100.0
    filter_rate: float = 4.0
    onset_fraction: float = 0.5
    road: MultisineSpec = ROAD_SPEC
    fault: MultisineSpec = FAULT_SPEC
    params: plant.RollPlaneParams = field(default_factory=plant.RollPlaneParams)

    def __post_init__(self):
        ratio = self.plant_rate / self.filter_rate
        if abs(ratio - round(ratio)) > 1e-12 or ratio < 1:
            raise DatasetError("plant_rate must be an integer multiple of filter_rate")
        if not 0 <= self.onset_fraction <= 1:
            raise DatasetError("onset_fraction must lie in [0, 1]")
        for sensors, count in self.composition:
            if count < 0:
                raise DatasetError("scenario counts must be non-negative")
            for s in sensors:
                if not 1 <= s <= N_SENSORS:
                    raise DatasetError(f"cannot fault nonexistent sensor {s}")

    @property
    def decimation(self) -> int:
        return int(round(self.plant_rate / self.filter_rate))

    @property
    def n_plant(self) -> int:
        return int(round(self.duration * self.plant_rate)) + 1

    @property
    def n_filter(self) -> int:
        return int(round(self.duration * self.filter_rate))

    @property
    def onset_sample(self) -> int:
        return int(round(self.onset_fraction * self.n_filter))

    def labels(self) -> list[tuple[int, ...]]:
        out = []
        for sensors, count in self.composition:
            out.extend([tuple(sorted(sensors))] * count)
        return out

    def to_dict(self) -> dict:
        return {
            "composition": [{"sensors": list(s), "count": c}
                            for s, c in self.composition],
            "duration": self.duration, "plant_rate": self.plant_rate,
            "filter_rate": self.filter_rate,
            "onset_fraction": self.onset_fraction,
            "road": self.road.to_dict(), "fault": self.fault.to_dict(),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        def spec(x):
            x = dict(x)
            for k in ("amp_range", "freq_range", "phase_range", "n_range"):
                x[k] = tuple(x[k])
            return MultisineSpec(**x)
        kwargs = {k: d[k] for k in ("duration", "plant_rate", "filter_rate",
                                    "onset_fraction") if k in d}
        if "composition" in d:
            kwargs["composition"] = tuple(
                (tuple(c["sensors"]), int(c["count"])) for c in d["composition"])
        if "road" in d:
            kwargs["road"] = spec(d["road"])
        if "fault" in d:
            kwargs["fault"] = spec(d["fault"])
        if "params" in d:
            kwargs["params"] = plant.RollPlaneParams(**d["params"])
        return cls(**kwargs)


TEST_COMPOSITION = (((1,), 100), ((2,), 100), ((1, 2), 100))


@dataclass
class Scenario:
    id: int
    seed: int
    label: tuple[int, ...]
    u: np.ndarray            # (n_plant, 2) road input at 100 Hz
    y: np.ndarray            # (n_filter, 4) clean outputs at 4 Hz
    faults: np.ndarray       # (n_filter, 4) additive sensor faults
    measured: np.ndarray     # y + faults
    onset_sample: int
    road_draws: list[MultisineDraw]
    fault_draws: dict[int, MultisineDraw]
    decimation: int = 25
    filter_rate: float = 4.0

    @property
    def u_filter(self) -> np.ndarray:
        n = self.y.shape[0]
        return self.u[::self.decimation][:n]


@dataclass
class ScenarioSet:
    scenarios: list[Scenario]
    config: ScenarioConfig
    master_seed: int

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def composition_counts(self) -> dict[tuple[int, ...], int]:
        counts: dict[tuple[int, ...], int] = {}
        for s in self.scenarios:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts


def build_scenarios(config: ScenarioConfig, master_seed: int) -> ScenarioSet:
    """Simulate every scenario of ``config`` and inject its faults.

    Scenario ``s`` draws its road profile ``r`` from stream ``(s, 0, r)`` and
    the fault on sensor ``j`` from stream ``(s, 1, j)``.
    """
    labels = config.labels()
    n_plant, n_filt, dec = config.n_plant, config.n_filter, config.decimation
    t_plant = np.arange(n_plant) / config.plant_rate
    t_filt = np.arange(n_filt) / config.filter_rate
    onset = config.onset_sample

    road_draws, faults, fault_draws = [], [], []
    U = np.empty((len(labels), n_plant, N_INPUTS))
    for s, label in enumerate(labels):
        draws = [draw_multisine(config.road, make_rng(master_seed, s, _ROAD, r))
                 for r in range(N_INPUTS)]
        for r, d in enumerate(draws):
            U[s, :, r] = evaluate_multisine(d, t_plant)
        f = np.zeros((n_filt, N_SENSORS))
        fd = {}
        for j in label:
            d = draw_multisine(config.fault, make_rng(master_seed, s, _FAULT, j))
            sig = evaluate_multisine(d, t_filt)
            sig[:onset] = 0.0
            f[:, j - 1] = sig
            fd[j] = d
        road_draws.append(draws)
        faults.append(f)
        fault_draws.append(fd)

    if labels:
        traj = plant.simulate(U, config.params, config.duration, config.plant_rate)
        Y = plant.measure(traj[:, ::dec][:, :n_filt])
    scenarios = []
    for s, label in enumerate(labels):
        y = np.ascontiguousarray(Y[s])
        scenarios.append(Scenario(
            id=s, seed=master_seed, label=label, u=U[s], y=y, faults=faults[s],
            measured=y + faults[s], onset_sample=onset,
            road_draws=road_draws[s], fault_draws=fault_draws[s],
            decimation=dec, filter_rate=config.filter_rate))
    return ScenarioSet(scenarios, config, master_seed)


def filter_input(scenario: Scenario) -> np.ndarray:
    """Stacked filter input ``(u1, u2, ym1, ym2, ym3, ym4)`` on the 4 Hz grid."""
    return np.hstack([scenario.u_filter, scenario.measured])


def training_pairs(scenarios, filter_index: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(filter input, fault on sensor i)`` per scenario; the target is zero
    whenever sensor ``i`` is healthy."""
    if not 1 <= filter_index <= N_SENSORS:
        raise ValueError(f"filter_index must lie in [1, {N_SENSORS}]")
    return [(filter_input(s), s.faults[:, filter_index - 1].copy())
            for s in scenarios]


def _csv_bytes(columns, table) -> bytes:
    buf = io.StringIO()
    np.savetxt(buf, table, delimiter=",", header=",".join(columns),
               comments="", fmt="%.17g")
    return buf.getvalue().encode()


def _scenario_files(s: Scenario) -> dict[str, bytes]:
    n = s.y.shape[0]
    k = np.arange(n)
    main = np.column_stack([k, k / s.filter_rate, s.u_filter, s.y, s.faults,
                            s.measured])
    t = np.arange(s.u.shape[0]) / (s.filter_rate * s.decimation)
    return {
        f"scenario_{s.id:04d}.csv": _csv_bytes(SCENARIO_COLUMNS, main),
        f"scenario_{s.id:04d}_u100.csv": _csv_bytes(INPUT_COLUMNS,
                                                    np.column_stack([t, s.u])),
    }


def save_set(dataset: ScenarioSet, path) -> Path:
    """Write ``manifest.json`` plus two CSV files per scenario into ``path``."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"output directory {path} does not exist")
    entries = []
    for s in dataset.scenarios:
        files = _scenario_files(s)
        for name, data in files.items():
            (path / name).write_bytes(data)
        entries.append({
            "id": s.id, "seed_key": [s.id], "label": list(s.label),
            "onset_sample": s.onset_sample,
            "n_filter": int(s.y.shape[0]), "n_plant": int(s.u.shape[0]),
            "road_draws": [d.to_dict() for d in s.road_draws],
            "fault_draws": {str(j): d.to_dict() for j, d in s.fault_draws.items()},
            "files": {name: hashlib.sha256(data).hexdigest()
                      for name, data in files.items()},
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "master_seed": dataset.master_seed,
        "config": dataset.config.to_dict(),
        "conventions": {
            "output_order": "y1=q1-q3, y2=q2-q4, y3=qd1-qd3, y4=qd2-qd4",
            "filter_input_order": "u1,u2,ym1,ym2,ym3,ym4",
            "downsampling": "decimation, 4 Hz sample k = 100 Hz sample 25k",
            "fault_injection": "additive on the 4 Hz grid",
            "multisine_argument": "continuous time t_k = k / sample_rate",
            "seed_streams": "Philox(SeedSequence(master, spawn_key=(s, 0, r))) "
                            "for road r; (s, 1, j) for the fault on sensor j",
            "initial_state": "zero",
            "input_hold": "zero-order",
        },
        "scenarios": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _read_table(path: Path, columns: list[str], n_rows: int) -> np.ndarray:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != columns:
        raise DatasetError(f"{path.name}: unexpected header {rows[:1]}")
    body = rows[1:]
    if len(body) != n_rows:
        raise DatasetError(
            f"{path.name}: expected {n_rows} rows, found {len(body)}")
    try:
        table = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path.name}: malformed row ({exc})") from None
    if table.shape != (n_rows, len(columns)):
        raise DatasetError(f"{path.name}: malformed rows, shape {table.shape}")
    return table


def load_set(path) -> ScenarioSet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {version!r}")
    config = ScenarioConfig.from_dict(manifest["config"])
    scenarios = []
    for e in manifest["scenarios"]:
        main_name = f"scenario_{e['id']:04d}.csv"
        u_name = f"scenario_{e['id']:04d}_u100.csv"
        main = _read_table(path / main_name, SCENARIO_COLUMNS, e["n_filter"])
        u_tab = _read_table(path / u_name, INPUT_COLUMNS, e["n_plant"])
        for name in (main_name, u_name):
            digest = hashlib.sha256((path / name).read_bytes()).hexdigest()
            if digest != e["files"][name]:
                raise DatasetError(f"{name}: checksum mismatch")
        y, f, ym = main[:, 4:8], main[:, 8:12], main[:, 12:16]
        scenarios.append(Scenario(
            id=e["id"], seed=manifest["master_seed"], label=tuple(e["label"]),
            u=np.ascontiguousarray(u_tab[:, 1:3]), y=np.ascontiguousarray(y),
            faults=np.ascontiguousarray(f), measured=np.ascontiguousarray(ym),
            onset_sample=e["onset_sample"],
            road_draws=[MultisineDraw.from_dict(d) for d in e["road_draws"]],
            fault_draws={int(j): MultisineDraw.from_dict(d)
                         for j, d in e["fault_draws"].items()},
            decimation=config.decimation, filter_rate=config.filter_rate))
    return ScenarioSet(scenarios, config, manifest["master_seed"])
