import pytest

from patternflow import ManualClock, Runtime
from patternflow.core import IdSource, create_message
import random


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def rt(clock):
    return Runtime(clock=clock, seed=7)


@pytest.fixture
def ids():
    return IdSource(random.Random(3))


@pytest.fixture
def make(ids):
    def build(body=b"", headers=None, **kw):
        return create_message(body, headers, ids=ids, **kw)
    return build


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = []
    for module in list(sys.modules.values()):
        lines += getattr(module, "ACCEPTANCE_RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
