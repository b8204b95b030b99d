import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion: ``criterion(n, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), title, detail)
        print(f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
