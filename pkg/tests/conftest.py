import numpy as np
import pytest

from glevy.models import example51_set
from glevy.uncertainty import JumpMeasure, UncertaintySet


def make_set(measures=None, drifts=(0.0,), vols=(1.0,), base=0, d=1):
    """Scalar uncertainty set; ``measures`` defaults to the null measure."""
    if measures is None:
        measures = [JumpMeasure.null(d)]
    return UncertaintySet(measures, np.asarray(drifts, float).reshape(-1, d),
                          np.asarray(vols, float).reshape(-1, d, d), base_measure_index=base)


@pytest.fixture
def drift_set():
    """Drifts {-1, +1}, unit volatility, no jumps."""
    return make_set(drifts=(-1.0, 1.0))


@pytest.fixture
def set51():
    return example51_set()


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(key, passed, detail):
        ACCEPTANCE[key] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
