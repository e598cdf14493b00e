import numpy as np
import pytest
from hypothesis import settings

from beeslab.statistics import estimate_mu_c

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mu_c_cache():
    cache = {}

    def get(n, horizon=500.0, n_seeds=20):
        key = (n, horizon, n_seeds)
        if key not in cache:
            cache[key] = estimate_mu_c(n, range(9000, 9000 + n_seeds), horizon, sub_step=1.0)
        return cache[key]
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed after the run whatever the capture mode
AC_LINES = []


@pytest.fixture
def ac_report():
    def report(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        AC_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
