"""Shared fixtures and the acceptance summary printed after the test run."""

from __future__ import annotations

import time
from collections import defaultdict

import pytest

ACCEPTANCE: dict[str, list[tuple[str, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(criterion): counts toward an acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        crit = getattr(report, "criterion", None)
        if crit:
            ACCEPTANCE[crit].append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker:
        outcome.get_result().criterion = str(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c)):
        results = ACCEPTANCE[crit]
        ok = all(outcome == "passed" for _, outcome in results)
        failed = [name for name, outcome in results if outcome != "passed"]
        detail = f" (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'} [{len(results)} checks]{detail}")


class Stopwatch:
    """Accumulates wall time per named budget so tests can check runtime limits."""

    def __init__(self):
        self.spent: dict[str, float] = defaultdict(float)

    def time(self, key: str):
        watch = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                watch.spent[key] += time.perf_counter() - self.t0

        return _Span()


@pytest.fixture(scope="session")
def stopwatch():
    return Stopwatch()


@pytest.fixture(scope="session")
def toy(stopwatch):
    """Default-configuration toy data and trained backbone, shared by the slow tests."""
    from flowcast.experiments import RunConfig, build_data, train_backbone

    config = RunConfig()
    with stopwatch.time("backbone"):
        dataset, instances = build_data(config)
        flow, curve = train_backbone(config, dataset)
    from flowcast.experiments import Bundle
    return Bundle(config, dataset, instances, flow, curve)
