import pytest

_LINES = []


@pytest.fixture
def criterion(capsys):
    """Report one acceptance line: printed immediately and repeated in the summary."""
    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
