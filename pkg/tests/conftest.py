import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_pose(rng, trans=5.0, angle=np.pi):
    from evigrid.core import PoseSE3

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return PoseSE3.from_rotvec(axis * rng.uniform(-angle, angle), rng.uniform(-trans, trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
