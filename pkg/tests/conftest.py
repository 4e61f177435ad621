import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one acceptance line; the caller still asserts."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS, key=lambda v: v[0]):
            terminalreporter.write_line(line)
