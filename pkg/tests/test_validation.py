import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridssp.validation import ValidationReport, gini, log_scatter, lorenz, mass_balance, ordered


def test_gini_known_values():
    assert gini(np.ones(10)) == 0.0
    assert gini(np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.75)
    assert gini(np.zeros(5)) == 0.0
    with pytest.raises(ValueError):
        gini(np.array([-1.0, 2.0]))


def _pairwise_gini(x):
    return np.abs(x[:, None] - x[None, :]).sum() / (2 * len(x) ** 2 * x.mean())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1e6))
def test_gini_matches_pairwise_form_and_scale_free(seed, lam):
    x = np.random.default_rng(seed).lognormal(0, 1.5, 60)
    assert gini(x) == pytest.approx(_pairwise_gini(x), rel=1e-10)
    assert gini(lam * x) == pytest.approx(gini(x), rel=1e-10)


def test_lorenz_endpoints():
    x, y = lorenz(np.array([3.0, 1.0, 0.0, 6.0]))
    assert (x[0], y[0], x[-1], y[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(y) >= 0)
    np.testing.assert_allclose(y, [0, 0, 0.1, 0.4, 1.0])


def test_self_scatter_is_perfect():
    x = np.random.default_rng(1).lognormal(3, 2, 500)
    x[:20] = 0.0
    s = log_scatter(x, x)
    assert (s["r2"], s["rmse"], s["n"], s["excluded"]) == (1.0, 0.0, 480, 0)


def test_scatter_excludes_and_errors():
    ref = np.array([1.0, 2.0, 0.0, 4.0])
    pred = np.array([1.0, 0.0, 3.0, 5.0])
    s = log_scatter(pred, ref)
    assert s["n"] == 2 and s["excluded"] == 1
    with pytest.raises(ValueError):
        log_scatter(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        log_scatter(np.ones(2), np.ones(3))


def test_mass_balance_and_ordering():
    r = mass_balance(np.array([1.0, 2.0, 3.0]), np.array([0, 0, 1]), np.array([3.0, 3.0]))
    np.testing.assert_allclose(r, [0.0, 0.0])
    r = mass_balance(np.array([1.0, 2.0]), np.array([0, 1]), np.array([2.0, 0.0]))
    np.testing.assert_allclose(r, [-0.5, 2.0])
    assert ordered([3, 2, 2]) and not ordered([3, 2, 2], strict=True) and not ordered([1, 2])


def test_report_verdicts():
    rep = ValidationReport()
    rep.verdicts.update({"a": True, "b": True})
    assert rep.passed
    rep.verdicts["c"] = False
    assert not rep.passed and rep.as_dict()["verdicts"]["c"] is False
