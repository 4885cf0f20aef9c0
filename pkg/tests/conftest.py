"""Shared fixtures and the per-criterion acceptance summary."""
import numpy as np
import pytest

from condshape.geom import Camera, camera_at

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_order):
        ok, detail = ACCEPTANCE[key]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {key:4s} {detail}")


def _order(key: str):
    head = key.rstrip("abcdefghij")
    return int(head), key[len(head):]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def axis_cam():
    """Identity rotation, two units in front of the origin, 64x64 pixels."""
    return Camera(np.eye(3), [0.0, 0.0, 2.0])


def random_camera(rng) -> Camera:
    return camera_at(rng.uniform(0, 360), rng.uniform(-20, 40), rng.uniform(2.0, 3.0),
                     fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16)
