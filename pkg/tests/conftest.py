from __future__ import annotations

import numpy as np
import pytest

from demotraj.config import Config
from demotraj.data_io import HorizonSpec, synth_dataset
from demotraj.dynamics import VehicleAttributes


@pytest.fixture
def attrs() -> VehicleAttributes:
    return VehicleAttributes()


@pytest.fixture
def cfg() -> Config:
    return Config()


@pytest.fixture
def small_cfg() -> Config:
    """Narrow model for fast end-to-end tests."""
    c = Config()
    c.model.d_model = 16
    c.model.z_dim = 4
    c.model.ssm_state = 4
    c.train.batch_size = 4
    c.train.epochs = 1
    return c


@pytest.fixture(scope="session")
def scenes():
    return synth_dataset(10, 0.1, 11)


@pytest.fixture
def horizon() -> HorizonSpec:
    return HorizonSpec()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; lines print in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
