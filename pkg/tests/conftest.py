import numpy as np
import pytest

from hepca.slot_engine import EngineConfig, SlotEngine


def make_engine(n, max_level=8, quantize=False, keys=None, all_keys=False):
    eng = SlotEngine(EngineConfig(n, max_level, quantize=quantize))
    if all_keys:
        eng.register_keys(range(1, n * n))
    if keys:
        eng.register_keys(keys)
    return eng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
