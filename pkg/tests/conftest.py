# one PASS/FAIL/SKIP line per acceptance criterion at the end of the run

ACCEPTANCE_FILE = "test_acceptance.py"
_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _results[report.nodeid.split("::")[-1]] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results):
        outcome, detail = _results[name]
        terminalreporter.write_line(f"{outcome:4s}  {name}  {detail}".rstrip())
