import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

CRITERIA = {
    1: "gradient suite (finite differences, 20+ seeds)",
    2: "SmoothMax pooling properties",
    3: "Otsu brute-force equivalence",
    4: "metric oracles (dice, auc, components)",
    5: "permutation-test validity",
    6: "end-to-end weak-supervision benchmark",
    7: "ablation direction (CS+SM vs none)",
    8: "built-in vs Grad-CAM direction",
    9: "determinism and formats",
}

_results: dict[int, list] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _results.setdefault(crit, []).append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        runs = _results.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN  {CRITERIA[n]}")
            continue
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}")
        for name, outcome, detail in runs:
            if detail or outcome != "passed":
                tr.write_line(f"    {name}: {outcome} {detail}")
