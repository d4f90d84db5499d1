"""Shared test plumbing: verdict lines for the acceptance suite.

Criterion tests call ``record_verdict``; the collected lines are echoed
in the terminal summary so they survive stdout capture under plain
``pytest -v``.
"""

VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
