import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from gridssp.worldmodel import (
    City, CitySet, GridCell, GridField, InputError, ScenarioConfig, ScenarioTable, TradeTable,
    arc_distance, cell_area, read_cities, read_grid,
)
from helpers import make_grid

# independent oracles, evaluated before the build
TOKYO_OSAKA_KM = 396.6257621696166      # sklearn haversine_distances * 6371
EQUATOR_CELL_KM2 = 3091.0681195879665   # R² Δλ (sin φ2 - sin φ1), lat 0, res 0.5


def test_arc_distance_identity_and_antipode():
    assert arc_distance((0, 0), (0, 0)) == 0.0
    assert arc_distance((0, 0), (180, 0)) == pytest.approx(math.pi * 6371.0, rel=1e-12)


def test_arc_distance_matches_haversine_oracle():
    assert arc_distance((139.69, 35.69), (135.50, 34.69)) == pytest.approx(TOKYO_OSAKA_KM, rel=1e-12)


def test_arc_distance_vectorised():
    a = np.array([[0.0, 0.0], [139.69, 35.69]])
    b = np.array([[0.0, 0.0], [135.50, 34.69]])
    np.testing.assert_allclose(arc_distance(a, b), [0.0, TOKYO_OSAKA_KM], rtol=1e-12)


lonlat = st.tuples(st.floats(-180, 180), st.floats(-90, 90))


@settings(max_examples=200, deadline=None)
@given(lonlat, lonlat, lonlat)
def test_arc_distance_metric_properties(a, b, c):
    ab, ba = arc_distance(a, b), arc_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab <= math.pi * 6371.0 + 1e-6
    assert ab <= arc_distance(a, c) + arc_distance(c, b) + 1e-6


def test_cell_area_oracle_and_shape():
    assert cell_area(0.0, 0.5) == pytest.approx(EQUATOR_CELL_KM2, rel=1e-12)
    polar = cell_area(89.75, 0.5)
    assert 0 < polar < 0.01 * EQUATOR_CELL_KM2
    lats = np.linspace(-89.75, 89.75, 360)
    np.testing.assert_allclose(cell_area(lats), cell_area(-lats), rtol=1e-12)
    with pytest.raises(ValueError):
        cell_area(0.0, 0.0)


def test_cell_areas_tile_the_sphere():
    lats = np.arange(-89.75, 90, 0.5)
    total = cell_area(lats, 0.5).sum() * 720
    assert total == pytest.approx(4 * math.pi * 6371.0**2, rel=1e-12)


def test_city_invariants():
    City("a", 10.0, 20.0, "AAA", {2000: 5.0})
    with pytest.raises(InputError):
        City("a", 10.0, 95.0, "AAA", {2000: 5.0})
    with pytest.raises(InputError):
        City("a", 10.0, 20.0, "AAA", {2000: 0.0})


def test_gridcell_invariants():
    GridCell("g", 0.25, 0.25, "AAA", 100.0, 30.0, 70.0, 1.0, 1.0, 1.0)
    with pytest.raises(InputError):
        GridCell("g", 0.25, 0.25, "AAA", 100.0, 30.0, 71.0, 1.0, 1.0, 1.0)
    with pytest.raises(InputError):
        GridCell("g", 0.25, 0.25, "AAA", 100.0, 0.0, 0.0, -1.0, 1.0, 1.0)


def test_cityset_roundtrip_records():
    recs = [City(f"c{i}", float(i), 1.0, "AAA", {1995: 1.0 + i, 2000: 2.0 + i}) for i in range(3)]
    cs = CitySet.from_records(recs)
    assert len(cs) == 3
    assert cs.record(2) == recs[2]


def test_grid_locate():
    g = make_grid(4, 3, lon0=10.0, lat0=20.0)
    idx = g.locate(g.lon, g.lat)
    np.testing.assert_array_equal(idx, np.arange(len(g)))
    assert g.locate(np.array([0.0]), np.array([0.0]))[0] == -1


def test_trade_table_symmetric_and_zero_default():
    t = TradeTable({("A", "B"): 5.0})
    assert t("A", "B") == t("B", "A") == 5.0
    assert t("A", "C") == 0.0
    with pytest.raises(InputError):
        TradeTable({("A", "B"): -1.0})
    with pytest.raises(InputError):
        TradeTable({("A", "B"): 1.0, ("B", "A"): 2.0})


def test_scenario_config():
    c = ScenarioConfig.for_ssp("SSP1")
    assert (c.rho_e1_multiplier_2100, c.range_scale) == (2.0, 0.5)
    assert c.years[0] == 2010 and c.years[-1] == 2100 and len(c.years) == 19
    with pytest.raises(ValueError):
        ScenarioConfig.for_ssp("SSP1", base_year=2010, horizon=2012)


def test_gridfield_rejects_negative_or_nan():
    GridField(np.array([0.0, 1.0]), 2010, "gdp")
    with pytest.raises(ValueError):
        GridField(np.array([-1.0]), 2010, "gdp")
    with pytest.raises(ValueError):
        GridField(np.array([np.nan]), 2010, "gdp")


def test_scenario_table_totals():
    rows = [(s, c, y, 10.0, 5.0, 2.0) for s in ("SSP1", "SSP2") for c in ("A", "B") for y in range(2010, 2101, 5)]
    table = ScenarioTable(pd.DataFrame(rows, columns=["ssp", "country", "year", "urban_pop", "nonurban_pop", "gdp"]))
    assert table.totals("SSP1", 2050, "pop") == {"A": 15.0, "B": 15.0}
    assert table.totals("SSP2", 2010, "gdp")["B"] == 2.0


def test_read_cities_rejects_bad_rows(tmp_path):
    p = tmp_path / "cities.csv"
    p.write_text("id,lon,lat,country,pop_1990,pop_1995,pop_2000\nc1,10,20,AAA,1,2,3\nc2,10,20,AAA,1,0,3\n")
    with pytest.raises(InputError):
        read_cities(p)


def test_read_grid_roundtrip(tmp_path):
    g = make_grid(3, 2)
    df = pd.DataFrame({"id": g.ids, "lon": g.lon, "lat": g.lat, "country": g.country,
                       "cell_area": g.cell_area, "urban_area": g.urban_area, "agri_area": g.agri_area,
                       "road_dens": g.road_dens, "airport_dist": g.airport_dist, "ocean_dist": g.ocean_dist})
    df.to_csv(tmp_path / "grid.csv", index=False)
    back = read_grid(tmp_path / "grid.csv", 0.5)
    np.testing.assert_allclose(back.cell_area, g.cell_area)
    assert list(back.ids) == list(g.ids)
