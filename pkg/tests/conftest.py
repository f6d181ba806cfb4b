"""Collects acceptance outcomes and prints one line per criterion after the run."""

import pytest

_OUTCOMES = {}


class CriterionLog:
    def record(self, number: int, title: str, passed: bool, detail: str = ""):
        _OUTCOMES[number] = (title, bool(passed), detail)


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, passed, detail = _OUTCOMES[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
