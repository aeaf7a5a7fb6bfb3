import numpy as np
import pytest

from molattn.chem import parse_smiles


@pytest.fixture
def benzene():
    return parse_smiles("c1ccccc1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail, seconds in sorted(RESULTS):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line + f" [{seconds:.1f}s]")
