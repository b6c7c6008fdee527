ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    for key, value in report.user_properties:
        if key == "criterion":
            crit = value
    if crit is None or report.when != "call":
        return
    detail = dict(report.user_properties).get("detail", "")
    ACCEPTANCE[crit] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
