import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pumpopt import metamodel as mm
from pumpopt import simulator
from pumpopt.network import bundled_path, model_from_dict, toy_model

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def toy():
    return toy_model()


@pytest.fixture(scope="session")
def toy_dict():
    return json.loads(bundled_path("toy_network.json").read_text())


@pytest.fixture(scope="session")
def toy_dataset(toy):
    # 417 schedules x 24 steps = 10008 rows
    return simulator.generate_dataset(toy, 417, seed=1)


@pytest.fixture(scope="session")
def toy_meta(toy, toy_dataset):
    return mm.build_metamodel(toy, toy_dataset, mm.TrainConfig())


def tank_dict(**kw):
    base = {"id": "T1", "area": 100.0, "level_min": 0.0, "level_max": 4.0}
    base.update(kw)
    return base


def single_tank_model(pumps=None, zones=None, tariff=None, m=1, **tank_kw):
    """A one-tank network; extra keyword arguments go to the tank."""
    pumps = pumps if pumps is not None else [
        {"id": "P1", "rated_power": 10.0, "rated_flow": 50.0, "target_tank": "T1"}]
    zones = zones if zones is not None else [
        {"id": "Z1", "source_tank": "T1", "base_demand": 30.0, "pattern": [1.0] * m}]
    return model_from_dict({
        "tanks": [tank_dict(**tank_kw)],
        "pumps": pumps,
        "demand_zones": zones,
        "tariff_pattern": tariff if tariff is not None else [1.0] * m,
        "horizon": {"t0": 0, "m": m, "dt": 1.0},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict(request):
    """Record and assert one acceptance criterion; a line per criterion is
    printed in the terminal summary whether it passes or fails."""
    store = request.config.stash.setdefault(_VERDICTS, [])

    def check(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        store.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
