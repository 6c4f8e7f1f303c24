import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from sktfv.mesh import build_interval_mesh, build_rectangle_mesh, import_triangulation, square_triangulation  # noqa: E402


@pytest.fixture(scope="session")
def small_meshes():
    return {
        "interval": build_interval_mesh(0.0, 1.0, 7),
        "rectangle": build_rectangle_mesh((0.0, 1.0), (0.0, 1.0), 3, 4),
        "triangulation": import_triangulation(*square_triangulation(4, 8)),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_record import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
