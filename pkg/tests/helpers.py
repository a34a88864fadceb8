"""Small world builders shared by the tests."""
import numpy as np

from gridssp.worldmodel import CitySet, Grid, cell_area

# filled by test_acceptance, printed by conftest at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_grid(nx=4, ny=3, res=0.5, lon0=10.0, lat0=20.0, countries=None, rng=None):
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    n = len(ix)
    lon = lon0 + (ix + 0.5) * res
    lat = lat0 + (iy + 0.5) * res
    if countries is None:
        country = np.where(ix < nx / 2, "AAA", "BBB").astype(object)
    else:
        country = np.asarray(countries, dtype=object)
    rng = np.random.default_rng(0) if rng is None else rng
    area = cell_area(lat, res)
    urban = rng.uniform(0.0, 0.1, n) * area
    agri = rng.uniform(0.0, 0.5, n) * area
    ids = np.array([f"g{i:03d}" for i in range(n)], dtype=object)
    return Grid(ids, lon, lat, country, area, urban, agri,
                rng.uniform(1.0, 50.0, n), rng.uniform(0.0, 300.0, n), rng.uniform(0.0, 500.0, n), res)


def make_cities(lon, lat, country, pop=None, year=2000):
    n = len(lon)
    pop = np.full(n, 1000.0) if pop is None else np.asarray(pop, dtype=float)
    ids = np.array([f"c{i}" for i in range(n)], dtype=object)
    return CitySet(ids, np.asarray(lon, float), np.asarray(lat, float), np.asarray(country, dtype=object), {year: pop})


def small_config_text(**extra):
    base = {
        "synthetic": "true", "seed": "7", "r_grid": "50:300:50",
        "synth.n_countries": "10", "synth.cities_per_country": "100",
        "synth.nx": "30", "synth.ny": "30", "synth.sigma": "0.0025",
    }
    base.update(extra)
    return "".join(f"{k} = {v}\n" for k, v in base.items())
