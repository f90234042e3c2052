import numpy as np
import pytest

from riveral import backend
from riveral.data import PanelData
from riveral.graph import build_graph


def pytest_report_header(config):
    return f"riveral kernel backend: {backend.kernels.NAME} (available: {sorted(backend.BACKENDS)})"


@pytest.fixture(params=sorted(backend.BACKENDS))
def kernels(request):
    return backend.get(request.param)


def make_panel(n=3, T=30, D=2, seed=0, frac=0.5, edges=None):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, T, D))
    labels = rng.normal(size=(n, T))
    labels[rng.random((n, T)) > frac] = np.nan
    dates = np.arange(np.datetime64("2001-10-01"), np.datetime64("2001-10-01") + T)
    return PanelData(tuple(f"s{i}" for i in range(n)), dates, feats, labels)


@pytest.fixture
def chain3():
    return build_graph([("s0", "s1", 1500.0), ("s1", "s2", 2500.0)], "downstream", ["s0", "s1", "s2"])


ACCEPTANCE = []  # (criterion, passed, detail), filled by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
