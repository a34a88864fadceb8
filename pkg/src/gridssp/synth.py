"""Synthetic worlds with known parameters, used as test oracles and demo inputs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .citygrowth import GrowthDesign, covariate_matrix, econ_matrices
from .connectivity import build_geo, row_standardize
from .downscaler import TARGETS, CountryIndex, YearInputs, submodel_fields, submodels
from .potential import PotentialKernel
from .worldmodel import (
    CITY_HISTORY_YEARS,
    SSPS,
    CitySet,
    Grid,
    TradeTable,
    arc_distance,
    cell_area,
    chord_to_arc,
    unit_vectors,
)

# Importance pattern of the middle-of-the-road scenario, used as the default true mixture.
_TABLE_MIX = {
    "urban_pop": [0.09, 0.05, 0.05, 0.10, 0.02, 0.02, 0.03, 0.11, 0.03, 0.13, 0.12, 0.26],
    "nonurban_pop": [0.04, 0.03, 0.09, 0.03, 0.02, 0.01, 0.03, 0.07, 0.08, 0.37, 0.12, 0.11],
    "gdp": [0.10, 0.02, 0.03, 0.05, 0.14, 0.09, 0.08, 0.03, 0.08, 0.08, 0.05, 0.06, 0.08, 0.03, 0.07, 0.03],
}


@dataclass
class GrowthTruth:
    intercept: float | None = None  # None: chosen to hit mean_growth
    alpha: float = 0.002
    rho_geo: float = 0.5
    rho_e1: float = 0.10
    rho_e2: float = 0.05
    beta_road: float = 0.01
    beta_ocean: float = -0.005
    beta_airport: float = -0.005
    r: float = 150.0
    sigma: float = 0.01
    mean_growth: float = 0.05

    @property
    def beta_vector(self) -> np.ndarray:
        return np.array([self.intercept, self.beta_road, self.beta_ocean, self.beta_airport])


@dataclass
class SyntheticWorldSpec:
    n_countries: int = 20
    cities_per_country: int = 250
    nx: int = 100
    ny: int = 100
    resolution: float = 0.5
    lon0: float = 0.0
    lat0: float = 10.0
    zipf_exponent: float = 1.0
    max_city_pop: float = 1.0e7
    gravity_scale: float = 1.0e-6
    intra_trade: bool = False
    growth: GrowthTruth = field(default_factory=GrowthTruth)
    r_prime: float = 20.0
    r_prime_agri: float = 14.0
    b0: float = 0.1
    b0_agri: float = 0.0
    urban_peak_share: float = 0.5
    urban_peak_quantile: float = 0.99
    agri_peak_share: float = 0.3
    area_noise: float = 0.1
    mixture: dict = field(default_factory=lambda: {k: list(v) for k, v in _TABLE_MIX.items()})
    grid_noise: float = 0.0
    scenario_spread: float = 0.0
    calibration_year: int = 2000
    burn_in: int = 2

    def __post_init__(self):
        if min(self.n_countries, self.cities_per_country, self.nx, self.ny) < 1:
            raise ValueError("counts must be >= 1")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf exponent must be positive")
        g = self.growth
        if abs(g.rho_geo) + abs(g.rho_e1) + abs(g.rho_e2) >= 1:
            raise ValueError("true interaction coefficients must sum below 1 in absolute value")
        for target, mix in self.mixture.items():
            if len(mix) != len(submodels(target)) or min(mix) < 0 or sum(mix) <= 0:
                raise ValueError(f"mixture for {target} must be {len(submodels(target))} non-negative weights")


def zipf_sizes(n: int, exponent: float, top: float, rng: np.random.Generator, jitter: float = 0.05) -> np.ndarray:
    ranks = np.arange(1, n + 1)
    sizes = top * ranks ** (-exponent) * np.exp(rng.normal(0.0, jitter, n))
    return sizes[rng.permutation(n)]


def gravity_trade(codes, pop, lon, lat, scale: float, intra: bool = False) -> TradeTable:
    entries = {}
    for a in range(len(codes)):
        for b in range(a + 1, len(codes)):
            d = max(arc_distance((lon[a], lat[a]), (lon[b], lat[b])), 50.0)
            entries[(codes[a], codes[b])] = scale * pop[a] * pop[b] / d
        if intra:
            entries[(codes[a], codes[a])] = scale * pop[a] ** 2 / 50.0
    return TradeTable(entries)


def simulate_history(cities: CitySet, X: np.ndarray, trade: TradeTable, truth: GrowthTruth,
                     rng: np.random.Generator, start_pop: np.ndarray, years=CITY_HISTORY_YEARS,
                     burn_in: int = 2, step: int = 5) -> dict[int, np.ndarray]:
    """Run the growth model forward from ``start_pop`` and return populations at ``years``.

    The trade matrices are rebuilt from current populations each step, so the
    last step uses the same shares as an estimation at ``years[-2]``.
    """
    W_geo = row_standardize(build_geo(cities, truth.r))
    beta = truth.beta_vector
    pop = np.asarray(start_pop, dtype=float)
    dp = np.zeros(len(pop))
    first = years[0] - burn_in * step
    out = {}
    for year in range(first, years[-1] + 1, step):
        if year > first:
            W_e1, W_e2 = econ_matrices(cities.with_pop({0: pop}), trade, 0)
            lag = truth.rho_geo * W_geo.dot(dp) + truth.rho_e1 * W_e1.dot(dp) + truth.rho_e2 * W_e2.dot(dp)
            dp = lag + truth.alpha * np.log(pop) + X @ beta + rng.normal(0.0, truth.sigma, len(pop))
            pop = pop * np.exp(dp)
        if year in years:
            out[year] = pop.copy()
    return out


def calibrate_intercept(truth: GrowthTruth, X: np.ndarray, pop: np.ndarray) -> float:
    """Intercept giving the requested stationary mean growth."""
    rho = truth.rho_geo + truth.rho_e1 + truth.rho_e2
    rest = truth.alpha * np.log(pop).mean() + (X[:, 1:] @ truth.beta_vector[1:]).mean()
    return float(truth.mean_growth * (1.0 - rho) - rest)


def growth_world(n_countries: int = 40, cities_per_country: int = 50, truth: GrowthTruth | None = None,
                 seed: int = 0, extent: float = 30.0):
    """Cities with covariates and a simulated 1990/1995/2000 history.

    Returns ``(design, trade, truth)``; the design is ready for estimation.
    """
    truth = GrowthTruth() if truth is None else truth
    rng = np.random.default_rng(seed)
    n = n_countries * cities_per_country
    centres = rng.uniform([0.0, 20.0], [extent, 20.0 + extent], size=(n_countries, 2))
    country = np.repeat(np.arange(n_countries), cities_per_country)
    xy = centres[country] + rng.normal(0.0, 1.5, size=(n, 2))
    codes = np.array([f"C{c:02d}" for c in range(n_countries)], dtype=object)
    start = zipf_sizes(n, 1.0, 1.0e6, rng)
    cities = CitySet(np.array([f"c{i}" for i in range(n)], dtype=object), xy[:, 0], xy[:, 1],
                     codes[country], {0: start})
    # log covariates: country effect + smooth spatial field + idiosyncratic noise
    eff = rng.normal(0.0, 0.6, size=(n_countries, 3))
    smooth = np.column_stack([np.sin(xy[:, 0] / 3.0), np.cos(xy[:, 1] / 4.0), np.sin((xy[:, 0] + xy[:, 1]) / 5.0)])
    logs = eff[country] + 0.8 * smooth + rng.normal(0.0, 0.7, size=(n, 3)) + np.array([3.0, 4.0, 4.5])
    X = np.column_stack([np.ones(n), logs])
    if truth.intercept is None:
        truth = GrowthTruth(**{**asdict(truth), "intercept": calibrate_intercept(truth, X, start)})
    cpop = np.bincount(country, weights=start)
    trade = gravity_trade(list(codes), cpop, centres[:, 0], centres[:, 1], 1.0e-6)
    hist = simulate_history(cities, X, trade, truth, rng, start)
    cities = cities.with_pop(hist)
    p0, p1, p2 = (hist[y] for y in CITY_HISTORY_YEARS)
    design = GrowthDesign(np.log(p2 / p1), np.log(p1 / p0), np.log(p1), X, cities, CITY_HISTORY_YEARS)
    return design, trade, truth


# ---------------------------------------------------------------------------
# full world


def _grid(spec: SyntheticWorldSpec, rng) -> tuple[Grid, np.ndarray, np.ndarray]:
    ix, iy = np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    lon = spec.lon0 + (ix + 0.5) * spec.resolution
    lat = spec.lat0 + (iy + 0.5) * spec.resolution
    # country centres on distinct cells; Voronoi assignment in scaled lon/lat
    seeds = rng.choice(len(lon), size=spec.n_countries, replace=False)
    cx, cy = lon[seeds], lat[seeds]
    coslat = np.cos(np.radians(lat))
    d2 = ((lon[:, None] - cx[None, :]) * coslat[:, None]) ** 2 + (lat[:, None] - cy[None, :]) ** 2
    owner = np.argmin(d2, axis=1)
    codes = np.array([f"C{c:02d}" for c in range(spec.n_countries)], dtype=object)
    ids = np.array([f"g{a:04d}_{b:04d}" for a, b in zip(ix, iy)], dtype=object)
    area = cell_area(lat, spec.resolution)
    zeros = np.zeros(len(lon))
    grid = Grid(ids, lon, lat, codes[owner], area, zeros, zeros, zeros, zeros, zeros, spec.resolution)
    return grid, owner, codes


def _place_cities(spec, grid: Grid, owner, codes, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # clustered settlement: a few blobs per country drive the sampling weights
    n_blobs = 3 * spec.n_countries
    blob = rng.choice(len(grid), size=n_blobs, replace=False)
    w = np.zeros(len(grid))
    for b in blob:
        d = arc_distance(grid.coords, grid.coords[b])
        w += np.exp(-d / 250.0)
    w += 0.05
    lon, lat, country = [], [], []
    for c in range(spec.n_countries):
        cells = np.flatnonzero(owner == c)
        p = w[cells] / w[cells].sum()
        pick = rng.choice(cells, size=spec.cities_per_country, p=p)
        half = spec.resolution / 2.0
        lon.append(grid.lon[pick] + rng.uniform(-half, half, len(pick)) * 0.999)
        lat.append(grid.lat[pick] + rng.uniform(-half, half, len(pick)) * 0.999)
        country.append(np.full(len(pick), codes[c], dtype=object))
    return np.concatenate(lon), np.concatenate(lat), np.concatenate(country)


def _covariates(spec, grid: Grid, lon_c, lat_c, pop, rng):
    kernel = PotentialKernel(lon_c, lat_c, grid, 60.0)
    prox = kernel(np.sqrt(pop))
    road = (5.0 + 300.0 * prox / prox.max()) * np.exp(rng.normal(0.0, 0.3, len(grid)))
    n_air = max(1, int(0.03 * len(pop)))
    hubs = np.argsort(-pop, kind="stable")[:n_air]
    dist, _ = cKDTree(unit_vectors(lon_c[hubs], lat_c[hubs])).query(unit_vectors(grid.lon, grid.lat))
    airport = chord_to_arc(dist)
    west = (grid.lon - spec.lon0) * 111.32 * np.cos(np.radians(grid.lat))
    south = (grid.lat - spec.lat0) * 110.57
    ocean = np.minimum(west, south)
    return road, airport, np.maximum(ocean, 0.0)


def _scenario_frame(spec, codes, urban2000, nonurban2000, gdp2000, rng) -> pd.DataFrame:
    years = np.arange(2010, 2101, 5)
    growth = rng.uniform(-0.002, 0.012, len(codes))
    urbanising = rng.uniform(0.001, 0.006, len(codes))
    gdp_growth = rng.uniform(0.01, 0.03, len(codes))
    rows = []
    for s, ssp in enumerate(SSPS):
        tilt = spec.scenario_spread * (s - 1)
        for c, code in enumerate(codes):
            for y in years:
                dt = y - 2000
                total = (urban2000[c] + nonurban2000[c]) * np.exp((growth[c] + 0.5 * tilt * 0.01) * dt)
                share0 = urban2000[c] / (urban2000[c] + nonurban2000[c])
                share = min(0.95, share0 + urbanising[c] * dt)
                gdp = gdp2000[c] * np.exp((gdp_growth[c] - tilt * 0.01) * dt)
                rows.append((ssp, code, int(y), total * share, total * (1 - share), gdp))
    return pd.DataFrame(rows, columns=["ssp", "country", "year", "urban_pop", "nonurban_pop", "gdp"])


def generate_world(spec: SyntheticWorldSpec, seed: int, out_dir: Path | str | None = None) -> dict:
    """Build a synthetic world; write ``cities.csv``, ``grid.csv``, ``trade.csv``,
    ``scenario.csv``, ``observed.csv`` and ``truth.json`` when ``out_dir`` is given.
    """
    rng = np.random.default_rng(seed)
    grid, owner, codes = _grid(spec, rng)
    lon_c, lat_c, country = _place_cities(spec, grid, owner, codes, rng)
    n = len(lon_c)
    start = zipf_sizes(n, spec.zipf_exponent, spec.max_city_pop, rng)
    road, airport, ocean = _covariates(spec, grid, lon_c, lat_c, start, rng)
    grid = Grid(grid.ids, grid.lon, grid.lat, grid.country, grid.cell_area, grid.urban_area, grid.agri_area,
                road, airport, ocean, spec.resolution)
    ids = np.array([f"c{i:05d}" for i in range(n)], dtype=object)
    cities = CitySet(ids, lon_c, lat_c, country, {0: start})
    X = covariate_matrix(grid, grid.locate(lon_c, lat_c))

    truth = spec.growth
    if truth.intercept is None:
        truth = GrowthTruth(**{**asdict(truth), "intercept": calibrate_intercept(truth, X, start)})
    cidx = np.searchsorted(codes, country)
    cpop = np.bincount(cidx, weights=start, minlength=len(codes))
    ccx = np.array([lon_c[cidx == c].mean() if np.any(cidx == c) else 0.0 for c in range(len(codes))])
    ccy = np.array([lat_c[cidx == c].mean() if np.any(cidx == c) else 0.0 for c in range(len(codes))])
    trade = gravity_trade(list(codes), cpop, ccx, ccy, spec.gravity_scale, spec.intra_trade)
    hist = simulate_history(cities, X, trade, truth, rng, start, burn_in=spec.burn_in)
    cities = cities.with_pop(hist)
    p2000 = hist[spec.calibration_year]

    # base-year land cover from the true potential response
    q_u = PotentialKernel(lon_c, lat_c, grid, spec.r_prime)(p2000)
    q_a = PotentialKernel(lon_c, lat_c, grid, spec.r_prime_agri)(p2000)
    # urban cores saturate: the top cells reach the peak share of their area
    bq = spec.urban_peak_share * grid.cell_area.min() / np.quantile(q_u, spec.urban_peak_quantile)
    bq_a = spec.agri_peak_share * grid.cell_area.min() / np.quantile(q_a, spec.urban_peak_quantile)
    urban = np.clip(spec.b0 + bq * q_u + rng.normal(0.0, spec.area_noise, len(grid)), 0.0, grid.cell_area)
    base_agri = rng.uniform(0.10, 0.11, len(grid)) * grid.cell_area
    agri = np.clip(spec.b0_agri + base_agri + bq_a * q_a, 0.0, grid.cell_area - urban)
    grid = grid.with_areas(urban, agri)

    # base-year reference grid from the true sub-model mixture
    upg = np.bincount(grid.locate(lon_c, lat_c), weights=p2000, minlength=len(grid))
    countries = CountryIndex(grid.country)
    urban_tot = 1.3 * countries.sums(upg)
    nonurban_tot = urban_tot * rng.uniform(0.3, 1.5, len(countries.codes))
    gdp_pc = np.exp(rng.normal(np.log(1.0e4), 0.6, len(countries.codes)))
    gdp_tot = (urban_tot + nonurban_tot) * gdp_pc / 1e9
    inputs = YearInputs(urban, agri, upg, q_u)
    observed = {}
    for target, totals in (("urban_pop", urban_tot), ("nonurban_pop", nonurban_tot), ("gdp", gdp_tot)):
        if target == "gdp":
            inputs = YearInputs(urban, agri, upg, q_u, observed["urban_pop"] + observed["nonurban_pop"])
        F = submodel_fields(target, grid, countries, inputs, dict(zip(countries.codes, totals)))
        mix = np.asarray(spec.mixture[target], dtype=float)
        y = F @ (mix / mix.sum())
        if spec.grid_noise > 0:
            y = y * np.exp(rng.normal(0.0, spec.grid_noise, len(y)))
            scale = totals / np.maximum(countries.sums(y), 1e-300)
            y = y * scale[countries.index]
        observed[target] = y

    scenario = _scenario_frame(spec, countries.codes, urban_tot, nonurban_tot, gdp_tot, rng)
    truth_doc = {
        "growth": asdict(truth),
        "r_prime": spec.r_prime, "r_prime_agri": spec.r_prime_agri,
        "bq": bq, "bq_agri": bq_a, "b0": spec.b0,
        "omega": {t: list(np.asarray(spec.mixture[t]) / np.sum(spec.mixture[t])) for t in TARGETS},
        "seed": seed,
    }
    world = {"cities": cities, "grid": grid, "trade": trade, "scenario": scenario,
             "observed": observed, "truth": truth_doc}
    if out_dir is not None:
        write_world(world, out_dir)
    return world


def write_world(world: dict, out_dir: Path | str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = dict(index=False, float_format="%.12g", lineterminator="\n")
    c: CitySet = world["cities"]
    pd.DataFrame({"id": c.ids, "lon": c.lon, "lat": c.lat, "country": c.country,
                  **{f"pop{y}": c.pop[y] for y in CITY_HISTORY_YEARS}}).to_csv(out / "cities.csv", **fmt)
    g: Grid = world["grid"]
    pd.DataFrame({"id": g.ids, "lon": g.lon, "lat": g.lat, "country": g.country, "cell_area": g.cell_area,
                  "urban_area": g.urban_area, "agri_area": g.agri_area, "road_dens": g.road_dens,
                  "airport_dist": g.airport_dist, "ocean_dist": g.ocean_dist}).to_csv(out / "grid.csv", **fmt)
    pd.DataFrame(list(world["trade"].items()), columns=["country_a", "country_b", "amount"]).to_csv(
        out / "trade.csv", **fmt)
    world["scenario"].to_csv(out / "scenario.csv", **fmt)
    pd.DataFrame({"grid_id": g.ids, **world["observed"]}).to_csv(out / "observed.csv", **fmt)
    (out / "truth.json").write_text(json.dumps(world["truth"], indent=2, sort_keys=True) + "\n")
