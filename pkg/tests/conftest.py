import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from renfdi import dataset as ds  # noqa: E402
from renfdi import training as tr  # noqa: E402

TRAIN_SEED = 0
TEST_SEED = 1

_ACCEPTANCE: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--full-eval", action="store_true",
                     help="evaluate criterion 1 on 1000 test scenarios per class")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def record(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def training_set():
    return ds.build_scenarios(ds.ScenarioConfig(), TRAIN_SEED)


@pytest.fixture(scope="session")
def trained_bank(training_set):
    """The default bank: four filters, default config, default corpus."""
    config = tr.TrainConfig()
    dims = config.dims()
    specs, params, reports = [], [], []
    for i in range(1, ds.N_SENSORS + 1):
        spec = config.spec(i)
        p, rep = tr.train_filter(i, dims, spec, training_set, config)
        specs.append(spec)
        params.append(p)
        reports.append(rep)
    return tr.FilterBank(dims, specs, params), reports


@pytest.fixture(scope="session")
def test_set(request):
    per_class = 1000 if request.config.getoption("--full-eval") else 100
    comp = tuple((sensors, per_class) for sensors, _ in ds.TEST_COMPOSITION)
    return ds.build_scenarios(ds.ScenarioConfig(composition=comp), TEST_SEED)
