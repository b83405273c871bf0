import pytest

_ACCEPTANCE: dict = {}


class AcceptanceLog:
    def record(self, key: str, passed: bool, detail: str):
        line = f"{key} {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[key] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(_ACCEPTANCE[key])
