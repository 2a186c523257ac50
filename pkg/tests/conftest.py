import numpy as np
import pytest

from nondense.dichotomy import spectral_split_autonomous
from nondense.evolution_family import build_family, zero_perturbation
from nondense.operator_core import LambdaSchedule, TimeGrid, matrix_operator


@pytest.fixture(scope="session")
def scalar():
    return matrix_operator([[-1.0]])


@pytest.fixture(scope="session")
def saddle():
    return matrix_operator(np.diag([-1.0, 1.0]))


@pytest.fixture(scope="session")
def schedule():
    return LambdaSchedule(100.0, growth=2.0, max_terms=16, rel_tol=1e-6)


@pytest.fixture(scope="session")
def saddle_table(saddle):
    grid = TimeGrid(-25.0, 25.0, 0.05)
    return build_family(saddle, zero_perturbation(saddle), grid, mode="compressed")


@pytest.fixture(scope="session")
def saddle_split(saddle):
    return spectral_split_autonomous(saddle)


_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one PASS/FAIL line per acceptance criterion."""
    def _record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
