"""Per-criterion pass/fail summary for the acceptance suite."""

_criterion_results = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_criterion" not in name:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.outcome == "passed" else report.outcome.upper()
        _criterion_results[name] = verdict


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criterion_results):
        verdict = _criterion_results[name]
        label = name.replace("test_", "").replace("_", " ")
        terminalreporter.write_line(f"[{verdict}] {label}")
