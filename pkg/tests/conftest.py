import pytest

# criterion number -> (name, [(nodeid, outcome, detail)])
_CRITERIA: dict[int, tuple[str, list]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, name = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if report.failed and not detail:
            detail = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else "error"
        _CRITERIA.setdefault(number, (name, []))[1].append((item.nodeid, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, results = _CRITERIA[number]
        ok = all(outcome == "passed" for _, outcome, _ in results)
        details = " | ".join(d for _, _, d in results if d)
        line = f"ACCEPTANCE criterion {number} [{name}]: {'PASS' if ok else 'FAIL'}"
        if details:
            line += f" - {details}"
        tr.write_line(line)
