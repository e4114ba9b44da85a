from __future__ import annotations

import helpers


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(helpers.ACCEPTANCE):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
