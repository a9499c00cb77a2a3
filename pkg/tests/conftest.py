"""Shared fixtures: a DTU-like 49-camera rig and mock-backend instances."""

import math

import numpy as np
import pytest

from viewtoken.backend import MockBackend
from viewtoken.geometry import CameraPose, look_at_matrix
from viewtoken.seeding import derive_rng

# The standard 9-view train list (indices into the 49-position rig).
TRAIN_VIEWS_9 = (25, 22, 28, 40, 44, 48, 0, 8, 13)


def make_camera_rig(n_views: int = 49, seed: int = 2024) -> list[CameraPose]:
    """A DTU-like rig: cameras on a sphere sector, pointed at the origin.

    Smooth sweep over azimuth with slow polar drift plus small seeded jitter,
    mimicking a fixed robotic capture path.
    """
    rng = derive_rng(seed, "camera-rig")
    poses = []
    for i in range(n_views):
        frac = i / (n_views - 1)
        phi = math.radians(10.0 + 160.0 * frac) + 0.01 * rng.standard_normal()
        theta = math.radians(55.0 + 30.0 * math.sin(math.pi * frac)) + 0.01 * rng.standard_normal()
        radius = 4.0 + 0.05 * rng.standard_normal()
        poses.append(CameraPose.from_matrix(look_at_matrix(theta, phi % (2 * math.pi), radius)))
    return poses


@pytest.fixture(scope="session")
def camera_rig() -> list[CameraPose]:
    return make_camera_rig()


@pytest.fixture(scope="session")
def mock_backend() -> MockBackend:
    return MockBackend()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0xC0FFEE)


# ---------------------------------------------------------------------------
# Acceptance reporting: one pass/fail line per criterion after the run.
# ---------------------------------------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    if "test_acceptance" in report.nodeid and name.startswith("test_criterion"):
        _ACCEPTANCE_RESULTS[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        label = name.replace("test_", "").replace("_", " ")
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else outcome}: {label}")
