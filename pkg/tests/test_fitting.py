import math

import numpy as np
import pytest

from bridgelab.errors import DomainError
from bridgelab.fitting import fit_rate, require_fit


def test_exact_geometric_series():
    q = 0.37
    series = [(n, q ** n) for n in range(20)]
    fit = fit_rate(series)
    assert fit is not None
    assert fit.slope == pytest.approx(math.log(q), abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.n_points == 20


def test_saturated_tail_trimmed():
    q = 0.1
    series = [(n, max(q ** n, 3e-15)) for n in range(30)]
    fit = fit_rate(series)
    assert fit is not None
    # only the points above the floor enter the fit
    assert fit.n_points == sum(1 for n in range(30) if q ** n > 1e-14)
    assert fit.slope == pytest.approx(math.log(q), abs=1e-9)


def test_all_saturated_unavailable():
    series = [(n, 1e-16) for n in range(10)]
    assert fit_rate(series) is None
    with pytest.raises(DomainError):
        require_fit(series)


def test_window_restriction():
    rng = np.random.default_rng(0)
    series = [(n, math.exp(-0.5 * n) * (1 + 1e-3 * rng.standard_normal())) for n in range(40)]
    fit = fit_rate(series, window=(5, 25))
    assert fit is not None
    assert fit.n_points == 21
    assert fit.slope == pytest.approx(-0.5, abs=1e-3)
