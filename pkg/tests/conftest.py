import numpy as np
import pytest

from gliomacal.anatomy import build_anatomy
from gliomacal.synthetic import phantom_tissues
from gliomacal.volume_io import GridMeta, Volume

# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_KEY = pytest.StashKey[list]()


def homogeneous_anatomy(dims, spacing=1.0, grey=False):
    meta = GridMeta(dims, (spacing,) * 3)
    ones, zeros = np.ones(dims), np.zeros(dims)
    wm, gm = (zeros, ones) if grey else (ones, zeros)
    return build_anatomy(Volume(meta, wm), Volume(meta, gm), Volume(meta, zeros))


@pytest.fixture(scope="session")
def small_phantom():
    """24^3 phantom at 2 mm; big enough for ventricles and a cortical rim."""
    return build_anatomy(*phantom_tissues((24, 24, 24), 2.0))


@pytest.fixture(scope="session")
def notch_phantom():
    """32^3 phantom at 1 mm; the ventricles cut notches into the domain."""
    return build_anatomy(*phantom_tissues((32, 32, 32), 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
