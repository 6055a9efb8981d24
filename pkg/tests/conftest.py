_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    key = props.get("criterion")
    if key is None and "acceptance" in report.keywords and report.outcome == "failed":
        # a fixture broke before the test could tag itself
        key = report.nodeid.rsplit("::", 1)[-1]
    if key is None:
        return
    if report.when == "call" or report.outcome == "failed":
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        detail = props.get("detail", "") or f"{report.when} error"
        _RESULTS[key] = (outcome, str(detail))


def _order(key):
    head, _, tail = key.partition(" ")
    return (0, int(head[1:]), tail) if head[1:].isdigit() else (1, 0, key)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=_order):
        outcome, detail = _RESULTS[key]
        terminalreporter.write_line(f"{key:<28} {outcome}  {detail}")
