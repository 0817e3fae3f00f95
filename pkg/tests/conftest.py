import pytest

_LINES = {}


@pytest.fixture
def acceptance():
    """Record the verdict of one acceptance criterion.

    Lines are echoed immediately and repeated in the terminal summary so
    that they survive output capture.
    """

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])
