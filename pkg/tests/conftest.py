import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from advhscp.constraints import project_component  # noqa: E402
from advhscp.model import FactorModel  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _ACCEPTANCE.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def random_model(rng, p, widths, s, feasible=True, lam=None):
    """Random hierarchy; with ``feasible`` the components are projected and loadings are on the simplex."""
    rows = [p] + list(widths[:-1])
    comps = []
    for r, (n, k) in enumerate(zip(rows, widths)):
        w = rng.uniform(-1, 1, size=(n, k)) if r == 0 else rng.uniform(0, 1, size=(n, k))
        if feasible:
            w = project_component(w, lam[r] if lam else n / 2.0, nonneg=r > 0)[0]
        comps.append(w)
    loads = [rng.dirichlet(np.ones(k), size=s) for k in widths]
    return FactorModel(comps, loads)


def random_correlations(rng, p, s, t=40):
    from advhscp.model import TimeSeriesPanel, pearson_correlation

    return pearson_correlation(TimeSeriesPanel([rng.standard_normal((t, p)) for _ in range(s)])).matrices
