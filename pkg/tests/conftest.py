import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from defcor.config import SynthConfig
from defcor.dataset import synthesize_dataset

TINY_SYNTH = dict(SynthConfig().__dict__, n_samples=6, width=32, height=64)


def smooth_field(rng, h, w, amp, sigma=3.0):
    f = np.stack([gaussian_filter(rng.standard_normal((h, w)), sigma) for _ in range(2)], axis=2)
    return amp * f / np.abs(f).max()


def smooth_image(rng, h, w, sigma=1.5):
    img = gaussian_filter(rng.uniform(0, 255, (h, w)), sigma)
    img = (img - img.min()) / (img.max() - img.min())
    return 255 * img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return synthesize_dataset(out, dict(TINY_SYNTH))


_CRITERIA = {}


def pytest_runtest_logreport(report):
    marker = _CRITERIA_MARKS.get(report.nodeid)
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        _CRITERIA[report.nodeid] = (marker, "FAIL" if failed else "PASS")
    elif report.when == "setup" and report.skipped:
        _CRITERIA[report.nodeid] = (marker, "SKIP")


_CRITERIA_MARKS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA_MARKS[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(_CRITERIA.values()):
        terminalreporter.write_line(f"criterion {number:2d}: {outcome}  {title}")
