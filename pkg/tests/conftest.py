import pytest

_VERDICTS = []


class Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title

    def verdict(self, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number:>2}: {self.title}" + (f" ({detail})" if detail else "")
        _VERDICTS.append((self.number, line))
        print(line)
        return ok

    def skip(self, reason):
        line = f"SKIP criterion {self.number:>2}: {self.title} ({reason})"
        _VERDICTS.append((self.number, line))
        print(line)
        pytest.skip(reason)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
