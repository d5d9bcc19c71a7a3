import pytest

# acceptance verdict lines, filled by tests/test_acceptance.py
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number, title, ok, detail, elapsed=None, budget=None):
        in_time = budget is None or elapsed is None or elapsed <= budget
        status = "PASS" if ok and in_time else "FAIL"
        timing = "" if elapsed is None else f" [{elapsed:.1f}s" + ("" if budget is None else f" / {budget:g}s") + "]"
        line = f"criterion {number:2d} {status}: {title} | {detail}{timing}"
        VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok and in_time

    return record
