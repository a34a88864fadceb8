import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gridssp.connectivity import (
    SparseConnectivity, build_econ, build_geo, pair_distances, row_standardize, trade_estimate, write_matrix,
)
from gridssp.worldmodel import TradeTable, arc_distance
from helpers import make_cities


def _line_cities(d_km):
    # two points on the equator d_km apart
    dlon = np.degrees(d_km / 6371.0)
    return make_cities([0.0, dlon], [0.0, 0.0], ["AAA", "AAA"])


def test_geo_weight_values():
    r = 100.0
    for d, expect in [(0.0, 1.0), (r, np.exp(-1.0)), (3 * r, np.exp(-3.0))]:
        W = build_geo(_line_cities(d), r).to_dense()
        assert W[0, 0] == W[1, 1] == 0.0
        assert W[0, 1] == pytest.approx(expect, rel=1e-12)
        assert W[1, 0] == pytest.approx(expect, rel=1e-12)


def test_geo_cutoff_and_bad_range():
    cities = _line_cities(600.0)
    assert build_geo(cities, 100.0).to_dense()[0, 1] == 0.0      # beyond 5r
    assert build_geo(cities, 100.0, cutoff=700.0).to_dense()[0, 1] > 0
    with pytest.raises(ValueError):
        build_geo(cities, 0.0)
    with pytest.raises(ValueError):
        build_geo(cities, -5.0)


def test_geo_matches_brute_force():
    rng = np.random.default_rng(3)
    cities = make_cities(rng.uniform(0, 5, 60), rng.uniform(40, 45, 60), ["AAA"] * 60)
    r = 80.0
    W = build_geo(cities, r, cutoff=1e5).to_dense()
    pts = np.column_stack([cities.lon, cities.lat])
    D = arc_distance(pts[:, None, :], pts[None, :, :])
    brute = np.exp(-D / r)
    np.fill_diagonal(brute, 0.0)
    np.testing.assert_allclose(W, brute, rtol=1e-10, atol=1e-14)


def test_pair_distances_keeps_colocated_pairs():
    cities = make_cities([1.0, 1.0, 2.0], [1.0, 1.0, 1.0], ["A"] * 3)
    pd_ = pair_distances(cities, 10.0)
    assert set(zip(pd_.i.tolist(), pd_.j.tolist())) == {(0, 1), (1, 0)}
    np.testing.assert_array_equal(pd_.d, 0.0)


def test_trade_estimate_direct_product():
    # P_c / P_C = 0.2 and P_c' / P_C' = 0.3
    cities = make_cities([0, 1, 2, 3], [0, 0, 0, 0], ["A", "A", "B", "B"], pop=[2.0, 8.0, 3.0, 7.0])
    t = TradeTable({("A", "B"): 100.0})
    assert trade_estimate(cities, 0, 2, t, 2000) == pytest.approx(6.0)
    assert trade_estimate(cities, 0, 2, TradeTable({("A", "B"): 0.0}), 2000) == 0.0


def _random_world(seed, n_countries=3, intra=True):
    rng = np.random.default_rng(seed)
    n = 30
    country = rng.choice([f"C{i}" for i in range(n_countries)], n)
    country[:n_countries] = [f"C{i}" for i in range(n_countries)]
    cities = make_cities(rng.uniform(0, 10, n), rng.uniform(0, 10, n), country, pop=rng.uniform(10, 1000, n))
    entries = {}
    for a in range(n_countries):
        for b in range(a, n_countries):
            if a != b or intra:
                entries[(f"C{a}", f"C{b}")] = float(rng.uniform(1, 100))
    return cities, TradeTable(entries)


def test_pair_sums_reproduce_country_trade():
    cities, trade = _random_world(5)
    for a in ("C0", "C1", "C2"):
        for b in ("C0", "C1", "C2"):
            if a == b:
                continue
            ia = np.flatnonzero(cities.country == a)
            ib = np.flatnonzero(cities.country == b)
            total = sum(trade_estimate(cities, i, j, trade, 2000) for i in ia for j in ib)
            assert total == pytest.approx(trade(a, b), rel=1e-12)


def test_zero_population_country_rejected():
    cities = make_cities([0, 1], [0, 0], ["A", "B"], pop=[1.0, 1.0])
    cities.pop[2000][1] = 0.0
    with pytest.raises(ValueError):
        trade_estimate(cities, 0, 1, TradeTable({("A", "B"): 1.0}), 2000)


def test_econ_modes_partition_pairs():
    cities, trade = _random_world(9)
    W1 = build_econ(cities, trade, "international", 2000).to_dense()
    W2 = build_econ(cities, trade, "national", 2000).to_dense()
    same = cities.country[:, None] == cities.country[None, :]
    assert np.all(W1[same] == 0)
    assert np.all(W2[~same] == 0)
    n = len(cities)
    brute = np.array([[trade_estimate(cities, i, j, trade, 2000) if i != j else 0.0 for j in range(n)]
                      for i in range(n)])
    np.testing.assert_allclose(W1 + W2, brute, rtol=1e-12, atol=1e-300)
    with pytest.raises(ValueError):
        build_econ(cities, trade, "regional", 2000)


def test_national_fallback_uses_population_products():
    cities, trade = _random_world(2, intra=False)
    W2 = build_econ(cities, trade, "national", 2000).to_dense()
    p = cities.pop[2000]
    i, j = np.flatnonzero(cities.country == "C0")[:2]
    assert W2[i, j] == pytest.approx(p[i] * p[j], rel=1e-12)


def test_factored_dot_matches_dense():
    cities, trade = _random_world(11)
    v = np.random.default_rng(0).normal(size=len(cities))
    for mode in ("international", "national"):
        m = build_econ(cities, trade, mode, 2000)
        np.testing.assert_allclose(m.dot(v), m.to_dense() @ v, rtol=1e-12, atol=1e-9)
        rs = row_standardize(m)
        np.testing.assert_allclose(rs.dot(v), rs.to_dense() @ v, rtol=1e-12, atol=1e-12)


def test_row_standardize_examples():
    m = SparseConnectivity(sp.csr_matrix(np.array([[0.0, 2.0, 4.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])))
    out = row_standardize(m).to_dense()
    np.testing.assert_allclose(out[0], [0.0, 1 / 3, 2 / 3])
    np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(out[2], [0.5, 0.5, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_row_standardize_random_sparse(seed, density):
    m = sp.random(40, 40, density=density, random_state=seed, format="csr")
    m.setdiag(0.0)
    m.eliminate_zeros()
    sums = row_standardize(SparseConnectivity(m)).row_sums()
    nonempty = np.asarray(m.sum(axis=1)).ravel() > 0
    np.testing.assert_allclose(sums[nonempty], 1.0, atol=1e-12)
    assert np.all(sums[~nonempty] == 0.0)


def test_write_matrix(tmp_path):
    cities = _line_cities(50.0)
    write_matrix(build_geo(cities, 100.0), cities.ids, tmp_path / "w.csv")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "row_id,col_id,weight"
    assert len(lines) == 3
