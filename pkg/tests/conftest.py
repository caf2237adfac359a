import pytest

# criterion name -> passed; filled from the reports of tests marked ``criterion``
CRITERIA = {}
DETAILS = {}
# soft criteria report their own verdict but never fail the run
SOFT = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        CRITERIA[name] = CRITERIA.get(name, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in CRITERIA.items():
        detail = DETAILS.get(name, "")
        verdict = "PASS" if ok else "FAIL"
        if ok and name in SOFT:
            verdict = "PASS (soft)" if SOFT[name] else "FAIL (soft, not gating)"
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  ({detail})" if detail else ""))
