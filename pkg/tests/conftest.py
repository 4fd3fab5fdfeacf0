import json

import numpy as np

import pytest

from diagfusion.telemetry import DeploymentMap


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec if isinstance(rec, str) else json.dumps(rec)) + "\n")
    return path


def write_deployment(path, rows):
    """rows: (id, host, group) triples."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"instances": [{"id": i, "host": h, "group": g} for i, h, g in rows]}, fh)
    return path


@pytest.fixture
def small_deployment():
    return DeploymentMap(
        host_of={"a-0": "h0", "a-1": "h1", "b-0": "h0", "b-1": "h1"},
        group_of={"a-0": "a", "a-1": "a", "b-0": "b", "b-1": "b"},
    )


def relative_error(analytic, numeric):
    """Max absolute difference scaled by the largest gradient magnitude."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


def central_difference(f, w, h=1e-4):
    """Numerical gradient of the scalar f() w.r.t. array w (modified in place)."""
    grad = np.zeros_like(w)
    for i in np.ndindex(w.shape):
        old = w[i]
        w[i] = old + h
        up = f()
        w[i] = old - h
        down = f()
        w[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


# acceptance criteria: one pass/fail line each, printed after the run

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion listed in the run summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
