import sys
from pathlib import Path

import pytest

# shared fixture tables live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line: ``criterion(name, ok, detail)``; returns ``ok``."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
