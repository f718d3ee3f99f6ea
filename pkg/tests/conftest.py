import numpy as np
import pytest

from amsa.core import AffineSystem
from amsa.problems import make_nested_linear
from amsa.samplers import FixedKernel


@pytest.fixture(scope="session")
def bench_n2():
    return make_nested_linear(N=2, dims=[3, 3], delta_target=0.5, coupling_scale=0.1, sigma=0.5)


@pytest.fixture(scope="session")
def bench_n3():
    return make_nested_linear(N=3, dims=[3, 3, 3], delta_target=0.5, coupling_scale=0.1, sigma=0.5)


def scalar_affine(a=1.0, b=0.0, noise=(0.0,), P=None):
    """N=1, d=1 system ``F(theta, X) = a theta + b + noise[X]``."""
    m = len(noise)
    P = np.full((m, m), 1.0 / m) if P is None else P
    return AffineSystem([[a]], [b], np.asarray(noise, dtype=float)[:, None], [1], FixedKernel(P))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config._acceptance[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status, detail = results[n]
        line = f"criterion {n} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
