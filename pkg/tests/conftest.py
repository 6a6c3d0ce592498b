import numpy as np
import pytest
from hypothesis import settings

from multicam_nbv.scene import ClassTable, LabeledBox, Scene

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wall_scene():
    """A large wall whose near face is the plane x = 2."""
    classes = ClassTable(("floor", "wall", "hull"))
    wall = LabeledBox((2.0, -50.0, -50.0), (3.0, 50.0, 50.0), 1)
    return Scene((wall,), ((-1.0, -5.0, -5.0), (4.0, 5.0, 5.0)), classes)


def random_boxes(rng, n, lo=-5.0, hi=5.0, size=(0.3, 3.0), k=3):
    boxes = []
    for _ in range(n):
        a = rng.uniform(lo, hi, 3)
        b = a + rng.uniform(*size, 3)
        boxes.append(LabeledBox(tuple(a), tuple(b), int(rng.integers(k))))
    return boxes


# acceptance lines, printed once at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    def record(label, passed, detail=""):
        ACCEPTANCE.append((label, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
