"""Collects acceptance-criterion outcomes and prints them after the run."""

import contextlib

import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.notes = number, title, []

    def note(self, text: str) -> None:
        self.notes.append(text)


@contextlib.contextmanager
def _record(number: int, title: str):
    crit = Criterion(number, title)
    try:
        yield crit
    except BaseException:
        ACCEPTANCE[number] = (title, False, "; ".join(crit.notes))
        raise
    ACCEPTANCE[number] = (title, True, "; ".join(crit.notes))


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records pass/fail for criterion ``n``."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, notes = ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))
