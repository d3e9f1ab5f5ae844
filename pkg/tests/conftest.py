import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(k, passed, detail)`` records the verdict line for acceptance criterion ``k``."""

    def record(k: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[k] = f"ACCEPTANCE {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[k])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
