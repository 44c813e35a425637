import pytest

_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one result line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
