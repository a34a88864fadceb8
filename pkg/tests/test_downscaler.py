import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridssp.downscaler import (
    CONTROLS, CountryIndex, DownscaleEnsemble, DownscaleError, SubModel, YearInputs, auxiliary_value,
    control_shares, control_values, dasymetric_share, downscale, downscale_gdp_chain, fit_weights,
    importance_shares, submodel_fields, submodels,
)
from helpers import make_grid


def _world(seed=0, nx=8, ny=6):
    rng = np.random.default_rng(seed)
    g = make_grid(nx, ny, rng=rng)
    n = len(g)
    inputs = YearInputs(g.urban_area, g.agri_area, rng.uniform(0, 1e5, n) * (rng.random(n) < 0.6),
                        rng.uniform(1, 1e6, n), rng.uniform(1, 1e5, n))
    countries = CountryIndex(g.country)
    totals = {c: float(rng.uniform(1e5, 1e7)) for c in countries.codes}
    return g, countries, inputs, totals


def test_submodel_enumeration():
    assert [len(submodels(t)) for t in ("urban_pop", "nonurban_pop", "gdp")] == [12, 12, 16]
    m = submodels("urban_pop")
    assert (m[0].k, m[0].offset, m[0].control) == (1, "urban_area", "constant")
    assert (m[4].k, m[4].offset, m[4].control) == (5, "urban_pop_grid", "constant")
    with pytest.raises(ValueError):
        SubModel("urban_pop", "ssp_pop", "road", 1)


def test_auxiliary_value_identity_and_annihilation():
    g, _, inputs, _ = _world()
    const = SubModel("urban_pop", "potential", "constant", 9)
    np.testing.assert_array_equal(auxiliary_value(g, const, inputs), inputs.potential)
    zero = YearInputs(np.zeros(len(g)), inputs.agri_area, inputs.urban_pop_grid, inputs.potential)
    for c in CONTROLS:
        np.testing.assert_array_equal(auxiliary_value(g, SubModel("urban_pop", "urban_area", c, 1), zero), 0.0)


def test_auxiliary_value_direct_product():
    g, _, inputs, _ = _world(3)
    for m in submodels("gdp"):
        off = inputs.urban_area + inputs.agri_area if m.offset == "uagri_area" else getattr(inputs, m.offset)
        ctrl = {"constant": np.ones(len(g)), "road": g.road_dens,
                "airport": 1 / (1 + g.airport_dist), "ocean": 1 / (1 + g.ocean_dist)}[m.control]
        np.testing.assert_allclose(auxiliary_value(g, m, inputs), off * ctrl, rtol=1e-12)


def test_dasymetric_examples():
    ci = CountryIndex(np.array(["A", "A"]))
    np.testing.assert_allclose(dasymetric_share(ci, [4.0, 1.0], [1.0, 1.0], {"A": 3.0}), [2.0, 1.0])
    ci = CountryIndex(np.array(["A"] * 5))
    np.testing.assert_allclose(dasymetric_share(ci, np.ones(5), np.full(5, 7.0), {"A": 10.0}), 2.0)


def test_dasymetric_zero_weights_fall_back_to_uniform(caplog):
    ci = CountryIndex(np.array(["A", "A", "B", "B"]))
    with caplog.at_level(logging.WARNING):
        f = dasymetric_share(ci, [0.0, 0.0, 1.0, 3.0], [1.0, 1.0, 1.0, 3.0], {"A": 8.0, "B": 4.0})
    np.testing.assert_allclose(f, [4.0, 4.0, 1.0, 3.0])
    assert "uniformly" in caplog.text


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_dasymetric_conserves_and_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    ci = CountryIndex(np.array(["A"] * 50))
    at, ak = rng.uniform(0, 10, 50), rng.uniform(0, 10, 50)
    Y = float(rng.uniform(1, 1e9))
    f = dasymetric_share(ci, at, ak, {"A": Y})
    assert abs(f.sum() - Y) <= 1e-12 * Y
    np.testing.assert_allclose(dasymetric_share(ci, at, lam * ak, {"A": Y}), f, rtol=1e-10)


def test_fields_conserve_totals_and_unknown_country():
    g, ci, inputs, totals = _world(4)
    F = submodel_fields("gdp", g, ci, inputs, totals)
    assert F.shape == (len(g), 16)
    Y = ci.totals_vector(totals)
    for k in range(F.shape[1]):
        np.testing.assert_allclose(ci.sums(F[:, k]), Y, rtol=1e-12)
    with pytest.raises(DownscaleError):
        submodel_fields("gdp", g, ci, inputs, {**totals, "ZZZ": 1.0})


def test_boosting_recovers_mixture():
    g, ci, inputs, totals = _world(5, 20, 20)
    F = submodel_fields("urban_pop", g, ci, inputs, totals)
    y = 0.6 * F[:, 0] + 0.4 * F[:, 4]
    ens = fit_weights(F, y, "urban_pop")
    truth = np.zeros(12)
    truth[[0, 4]] = [0.6, 0.4]
    assert np.abs(ens.weights - truth).sum() < 0.1
    assert np.all(np.diff(ens.loss_trace) <= 0)
    assert np.all(ens.weights >= 0) and ens.weights.sum() == 1.0


def test_single_submodel_and_degenerate_inputs():
    g, ci, inputs, totals = _world(6)
    F = submodel_fields("urban_pop", g, ci, inputs, totals)
    ens = fit_weights(F[:, :1], F[:, 0] * 0.7, "urban_pop", models=submodels("urban_pop")[:1])
    np.testing.assert_array_equal(ens.weights, [1.0])
    with pytest.raises(DownscaleError):
        fit_weights(F, -np.ones(len(g)), "urban_pop")
    with pytest.raises(ValueError):
        fit_weights(F, F[:, 0], "urban_pop", learning_rate=0.0)


def test_ensemble_no_worse_than_best_member():
    g, ci, inputs, totals = _world(7, 20, 20)
    F = submodel_fields("urban_pop", g, ci, inputs, totals)
    rng = np.random.default_rng(1)
    y = (0.3 * F[:, 2] + 0.5 * F[:, 6] + 0.2 * F[:, 9]) * rng.lognormal(0, 0.3, len(g))
    ens = fit_weights(F, y, "urban_pop")
    rmse = lambda f: np.sqrt(np.mean((f - y) ** 2))
    assert rmse(F @ ens.weights) <= min(rmse(F[:, k]) for k in range(12))


def test_downscale_selection_and_conservation():
    g, ci, inputs, totals = _world(8)
    F = submodel_fields("nonurban_pop", g, ci, inputs, totals)
    models = submodels("nonurban_pop")
    onehot = np.zeros(12)
    onehot[3] = 1.0
    ens = DownscaleEnsemble("nonurban_pop", models, onehot, onehot, [], 0.1, 200)
    np.testing.assert_array_equal(downscale(ens, F, 2050).values, F[:, 3])
    np.testing.assert_allclose(importance_shares(ens, F), onehot)
    w = np.random.default_rng(0).dirichlet(np.ones(12))
    w[np.argmax(w)] += 1.0 - w.sum()
    ens = DownscaleEnsemble("nonurban_pop", models, w, w, [], 0.1, 200)
    Y = ci.totals_vector(totals)
    np.testing.assert_allclose(ci.sums(downscale(ens, F).values), Y, rtol=1e-12)
    with pytest.raises(ValueError):
        DownscaleEnsemble("nonurban_pop", models, w * 1.1, w, [], 0.1, 200)


def test_importance_shares_equal_weights_for_identical_fields():
    g, ci, inputs, totals = _world(9)
    F = submodel_fields("urban_pop", g, ci, inputs, totals)
    same = np.repeat(F[:, :1], 12, axis=1)
    w = np.full(12, 1 / 12)
    ens = DownscaleEnsemble("urban_pop", submodels("urban_pop"), w, w, [], 0.1, 200)
    np.testing.assert_allclose(importance_shares(ens, same), w)
    shares = control_shares(ens, w)
    assert shares["road"] == pytest.approx(0.25)


def test_gdp_chain():
    g, ci, inputs, totals = _world(10)
    models = submodels("gdp")
    w = np.zeros(16)
    w[12] = 1.0    # ssp_pop x constant
    ens = DownscaleEnsemble("gdp", models, w, w, [], 0.1, 200)
    # population only in the first cell of each country
    pop = np.zeros(len(g))
    for c in range(len(ci.codes)):
        pop[np.flatnonzero(ci.index == c)[0]] = 1e4
    out = downscale_gdp_chain(pop / 2, pop / 2, ens, g, ci, inputs, totals, 2050).values
    Y = ci.totals_vector(totals)
    np.testing.assert_allclose(out[pop > 0], Y, rtol=1e-12)
    assert np.all(out[pop == 0] == 0)
    with pytest.raises(DownscaleError):
        downscale_gdp_chain(None, pop, ens, g, ci, inputs, totals)
    # equal populations reduce ssp_pop sub-models to the constant-offset field
    flat = np.ones(len(g))
    equal = downscale_gdp_chain(flat / 2, flat / 2, ens, g, ci, inputs, totals).values
    const = YearInputs(inputs.urban_area, inputs.agri_area, inputs.urban_pop_grid, inputs.potential, np.ones(len(g)))
    np.testing.assert_allclose(equal, submodel_fields("gdp", g, ci, const, totals)[:, 12], rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gdp_chain_conserves_on_random_worlds(seed):
    g, ci, inputs, totals = _world(seed % 1000)
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(16))
    w[np.argmax(w)] += 1.0 - w.sum()
    ens = DownscaleEnsemble("gdp", submodels("gdp"), w, w, [], 0.1, 200)
    up, nup = rng.uniform(0, 1e4, len(g)), rng.uniform(0, 1e4, len(g))
    out = downscale_gdp_chain(up, nup, ens, g, ci, inputs, totals).values
    Y = ci.totals_vector(totals)
    assert np.all(np.abs(ci.sums(out) - Y) <= 1e-9 * Y)


def test_weights_csv_roundtrip(tmp_path):
    g, ci, inputs, totals = _world(11)
    F = submodel_fields("urban_pop", g, ci, inputs, totals)
    ens = fit_weights(F, 0.5 * F[:, 1] + 0.5 * F[:, 7], "urban_pop")
    ens.to_csv(tmp_path / "w.csv")
    back = DownscaleEnsemble.from_csv(tmp_path / "w.csv", "urban_pop")
    np.testing.assert_allclose(back.weights, ens.weights, atol=1e-11)
    assert [m.label for m in back.submodels] == [m.label for m in ens.submodels]


def test_control_values_unknown():
    g, *_ = _world()
    with pytest.raises(ValueError):
        control_values(g, "river")
