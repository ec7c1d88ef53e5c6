import numpy as np
import pytest
from hypothesis import settings

from propnet.antenna import AntennaConfig, RadiationPattern
from propnet.geodata import GisPatch

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def flat_patch(size=33, res=10.0, clutter=1.0, terrain=0.0, building=None):
    shape = (size, size) if np.isscalar(size) else size
    b = np.zeros(shape) if building is None else building
    return GisPatch.from_arrays(np.full(shape, clutter), b, np.full(shape, terrain), res)


def antenna(height=30.0, azimuth=0.0, tilt=0.0, f=1000.0, pattern=None, xy=(0.0, 0.0)):
    return AntennaConfig(
        easting_m=xy[0],
        northing_m=xy[1],
        height_m=height,
        azimuth_deg=azimuth,
        tilt_deg=tilt,
        frequency_mhz=f,
        pattern=pattern or RadiationPattern.omni(0.0),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
