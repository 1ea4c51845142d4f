import dataclasses

import numpy as np
import pytest

from credgnss import sim
from credgnss.geo import Geodetic
from credgnss.pipeline import prepare_run


@pytest.fixture(scope="session")
def origin():
    return Geodetic.from_degrees(22.3193, 114.1694, 10.0)


@pytest.fixture(scope="session")
def medium_run():
    """Short medium-preset run, prepared (GoGPS WLS + features)."""
    r = sim.generate(dataclasses.replace(sim.presets()["medium"], n_epochs=40, seed=3))
    return prepare_run(r.epochs, r.origin)


@pytest.fixture(scope="session")
def harsh_sim():
    return sim.generate(dataclasses.replace(sim.presets()["harsh"], n_epochs=60, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
