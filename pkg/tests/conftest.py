import pytest

CRITERIA = {
    1: "two-point closed form",
    2: "Gram-Schmidt table",
    3: "orthogonalized-basis oracle",
    4: "single-source scaling",
    5: "multi-source method separation",
    6: "C_T structure",
    7: "trivial eigenvalue and normalization",
    8: "reparameterization invariance",
    9: "sampler statistics",
    10: "Chernoff scaling",
    11: "classification reproduction",
    12: "softmax gradient check",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None:
        return
    ok = report.passed and not hasattr(report, "wasxfail")
    if report.when == "call" or not report.passed:
        _outcomes.setdefault(n, []).append(ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    rep = out.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}: {name}")
