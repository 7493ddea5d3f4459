import pytest

# criterion number -> (passed, detail), printed as one line each at the end
RESULTS = {}


class Criterion:
    def __init__(self, number):
        self.number = number

    def record(self, passed, detail):
        RESULTS[self.number] = (bool(passed), detail)
        return bool(passed)


@pytest.fixture
def criterion():
    made = []

    def make(number):
        c = Criterion(number)
        RESULTS.setdefault(number, (False, "did not finish"))
        made.append(c)
        return c

    return make


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        passed, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
