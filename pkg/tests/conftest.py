import numpy as np
import pytest

from robotino_nav.kinematics import RobotGeometry
from robotino_nav.maps import load_bundled_map


@pytest.fixture(scope="session")
def geometry():
    return RobotGeometry()


@pytest.fixture(scope="session")
def default_map():
    return load_bundled_map()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, (ok, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
