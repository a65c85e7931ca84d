import pytest

_VERDICTS = []


class Verdicts:
    def record(self, num: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        _VERDICTS.append((num, line))
        print(line)
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
