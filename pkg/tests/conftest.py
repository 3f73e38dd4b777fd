import numpy as np
import pytest

from ismsdae.capture import TrafficProfile, record_capture
from ismsdae.waveforms import ProtocolClass

_ACCEPTANCE = []


def pytest_configure(config):
    config._ismsdae_acceptance = _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(line[1])


@pytest.fixture(scope="session")
def acceptance_log():
    def log(number, name, status, detail=""):
        line = f"[{status}] criterion {number:>2} {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
    return log


@pytest.fixture(scope="session")
def small_captures():
    """Two short captures per class, enough for a few dozen emissions each."""
    caps = []
    for p in ProtocolClass:
        lo, hi = {ProtocolClass.WIFI: (40, 60)}.get(p, (8, 16))
        prof = TrafficProfile((lo, hi), "uniform_random", (5e-6, 10e-6))
        for k in range(2):
            caps.append(record_capture(p, prof, 4e-3 if p is ProtocolClass.ZBEE else 1.5e-3, rng_seed=100 + 10 * int(p) + k))
    return caps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
