import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores and prints the one-line verdict of criterion ``n``."""

    def _record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
