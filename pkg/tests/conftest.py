import os
from pathlib import Path

import pytest

from tefn import data

_CRITERIA = {}


def ett_available(name):
    """True when the public CSV for a builtin dataset can be found."""
    return data.builtin_spec(name).resolve_path().exists()


def require_ett(*names):
    missing = [n for n in names if not ett_available(n)]
    if missing:
        where = os.environ.get("TEFN_DATA_DIR", str(Path.cwd() / "data"))
        pytest.skip(f"{', '.join(missing)} CSV not found under {where}")


_RANK = {"SKIP": 0, "PASS": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.skipped or rep.failed):
        return
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    label = marker.args[0]
    # a criterion split over several tests reports its worst part
    if _RANK[status] >= _RANK.get(_CRITERIA.get(label), -1):
        _CRITERIA[label] = status


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in _CRITERIA.items():
        terminalreporter.write_line(f"ACCEPTANCE {status:<4} {label}")
