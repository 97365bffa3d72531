import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
