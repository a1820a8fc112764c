import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def brute_nn_sq(src, dst):
    """Squared distance from each src row to its nearest dst row, by full scan."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    out = np.empty(len(src))
    for i, p in enumerate(src):
        dx = dst[:, 0] - p[0]
        dy = dst[:, 1] - p[1]
        dz = dst[:, 2] - p[2]
        out[i] = np.min(dx * dx + dy * dy + dz * dz)
    return out


class SgcRun:
    def __init__(self, params, gapped, coarse, output, inter):
        self.params = params
        self.gapped = gapped
        self.coarse = coarse
        self.output = output
        self.inter = inter


@pytest.fixture(scope="session")
def sgc_run():
    """One full forward pass on an 18,500-point cloud, shared across modules (about 15 s)."""
    from occlusynth.kernels import SgcParams, sgc_forward
    from occlusynth.rng import SeededRng

    params = SgcParams.random(7)
    gapped = np.random.default_rng(2024).uniform(-1, 1, (18_500, 3))
    coarse, out, inter = sgc_forward(gapped, params, SeededRng(11))
    return SgcRun(params, gapped, coarse, out, inter)


# one summary line per acceptance criterion, collected from tests marked
# ``@pytest.mark.criterion(n, "title")``
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _CRITERIA.get(n, (title, True, 0.0))
    _CRITERIA[n] = (title, prev[1] and ok, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, dur = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}  ({dur:.1f} s)")
