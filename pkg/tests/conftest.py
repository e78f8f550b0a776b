import numpy as np
import pytest

from credtrans.data import default_synthetic_spec, generate_synthetic
from credtrans.tokenizer import Covariate, Schema

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.skipped):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _criteria.append((marker.args[0], marker.args[1], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_criteria, key=lambda c: c[0]):
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def schema_for(spec, **kw) -> Schema:
    return Schema([Covariate(name, kind, **kw) for name, kind in spec.covariates])


@pytest.fixture(scope="session")
def small_data():
    spec = default_synthetic_spec(600)
    return spec, generate_synthetic(spec, 3)
