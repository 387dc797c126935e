import math

import numpy as np
import pytest

from cylmatch.cylinder import CylinderConfig
from cylmatch.geometry import RigidTransform, random_rotation


def random_transform(rng, max_angle=math.pi, max_trans=5.0):
    return RigidTransform(random_rotation(rng, max_angle), rng.uniform(-max_trans, max_trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def kitti():
    return CylinderConfig.kitti()


@pytest.fixture(scope="session")
def small_cfg():
    """Full-revolution 1 deg x 1 deg grid, cheap enough for exhaustive checks."""
    return CylinderConfig(math.radians(1.0), math.radians(1.0), math.radians(-20.0), 30, 360)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one ``<id> PASS|FAIL <detail>`` line, echoed now and in the terminal summary."""

    def record(criterion, ok, detail):
        line = f"{criterion} {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
