"""Collects acceptance verdict lines and prints them in the terminal summary."""

import pytest

_VERDICTS: list[str] = []


class CriterionLog:
    def __init__(self, number):
        self.number = number
        self.results: list[tuple[str, bool]] = []

    def check(self, label: str, passed: bool, detail: str = "") -> bool:
        passed = bool(passed)
        line = f"{'PASS' if passed else 'FAIL'} criterion {self.number}: {label}"
        if detail:
            line += f" ({detail})"
        _VERDICTS.append(line)
        print(line)
        self.results.append((label, passed))
        return passed

    def failures(self) -> list[str]:
        return [label for label, passed in self.results if not passed]


@pytest.fixture
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
