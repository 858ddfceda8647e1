import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    n, title = marker
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "outcomes": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcomes"].append("skipped" if report.skipped else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[n]
        outs = entry["outcomes"]
        if any(o == "failed" for o in outs):
            status = "FAIL"
        elif outs and all(o == "skipped" for o in outs):
            status = "SKIP"
        elif outs:
            status = "PASS"
        else:
            status = "NOT RUN"
        tr.write_line(f"criterion {n:>2} {status:<5} {entry['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_dir(tmp_path_factory):
    from pneumoseg.synthetic import write_blob_dataset

    return write_blob_dataset(tmp_path_factory.mktemp("blobs"), n=200, size=64, seed=0)


@pytest.fixture(scope="session")
def small_blob_dir(tmp_path_factory):
    from pneumoseg.synthetic import write_blob_dataset

    return write_blob_dataset(tmp_path_factory.mktemp("small_blobs"), n=24, size=64, seed=3)
