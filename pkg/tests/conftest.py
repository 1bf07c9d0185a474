from __future__ import annotations

import numpy as np
import pytest

from coneflow import presets
from coneflow.geometry import build_doubled_polygon, build_flat_torus


@pytest.fixture(scope="session")
def pillow():
    return presets.pillowcase(8, 2.0)


@pytest.fixture(scope="session")
def hyper():
    return presets.hyperbolic_triangle((0.25, 0.25, 0.25), 8)


@pytest.fixture(scope="session")
def football():
    return presets.football(-0.5, -0.5, 64)


@pytest.fixture(scope="session")
def football2d():
    return presets.football(-0.5, -0.25, 32, n_theta=12)


@pytest.fixture(scope="session")
def torus():
    return build_flat_torus(2.0, 1.0, 16, 8, distortion=0.3)


@pytest.fixture(scope="session")
def euclid_triangle():
    return build_doubled_polygon("euclidean", (0.5, 1 / 3, 1 / 6), 8)


@pytest.fixture(scope="session")
def all_surfaces(pillow, hyper, football, football2d, torus, euclid_triangle):
    return {
        "pillowcase": pillow,
        "hyperbolic": hyper,
        "football": football,
        "football2d": football2d,
        "torus": torus,
        "euclidean-triangle": euclid_triangle,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# criterion number -> (passed, detail); filled by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
