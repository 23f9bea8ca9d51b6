import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; fail on a failed criterion, skip on ``None``."""
    def record(number: int, title: str, passed: bool | None, detail: str) -> None:
        tag = "NOT RUN" if passed is None else "PASS" if passed else "FAIL"
        line = f"[{tag}] criterion {number:2d}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if passed is None:
            pytest.skip(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
