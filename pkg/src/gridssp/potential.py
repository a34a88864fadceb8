"""Urbanization potential fields and their calibration against observed area."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .citygrowth import workers
from .connectivity import DEFAULT_CUTOFF_FACTOR
from .worldmodel import RANGE_SCALE, CitySet, Grid, GridField, arc_to_chord, chord_to_arc, unit_vectors

log = logging.getLogger(__name__)

VARIANTS = ("urban", "agri")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CellCityDistances:
    """Cell/city pairs within ``max_km``; ``cell``, ``city`` index the grid and city set."""

    n_cells: int
    n_cities: int
    cell: np.ndarray
    city: np.ndarray
    d: np.ndarray
    max_km: float


def cell_city_distances(lon_city, lat_city, grid: Grid, max_km: float) -> CellCityDistances:
    cells = cKDTree(unit_vectors(grid.lon, grid.lat))
    towns = cKDTree(unit_vectors(lon_city, lat_city))
    coo = cells.sparse_distance_matrix(towns, float(arc_to_chord(max_km)), output_type="coo_matrix")
    cell, city, chord = coo.row, coo.col, coo.data
    # sparse_distance_matrix may drop exact zero distances; add them back
    hits = cells.query_ball_point(towns.data, 1e-12)
    extra = [(c, j) for j, cs in enumerate(hits) for c in cs]
    if extra:
        ec, ej = np.array(extra).T
        cell = np.concatenate([cell, ec]); city = np.concatenate([city, ej])
        chord = np.concatenate([chord, np.zeros(len(ec))])
    order = np.lexsort((chord, city, cell))
    cell, city, chord = cell[order], city[order], chord[order]
    first = np.ones(len(cell), dtype=bool)
    first[1:] = (cell[1:] != cell[:-1]) | (city[1:] != city[:-1])
    return CellCityDistances(len(grid), len(lon_city), cell[first].astype(np.int64),
                             city[first].astype(np.int64), chord_to_arc(chord[first]), float(max_km))


class PotentialKernel:
    """Sparse ``exp(-d / r')`` weights, cells x cities, truncated at ``cutoff``."""

    def __init__(self, lon_city, lat_city, grid: Grid, r_prime: float, cutoff: float | None = None,
                 pairs: CellCityDistances | None = None):
        if not r_prime > 0:
            raise ValueError(f"r_prime must be positive, got {r_prime}")
        self.r_prime = float(r_prime)
        self.cutoff = DEFAULT_CUTOFF_FACTOR * r_prime if cutoff is None else float(cutoff)
        if pairs is None or pairs.max_km < self.cutoff:
            pairs = cell_city_distances(lon_city, lat_city, grid, self.cutoff)
        within = pairs.d <= self.cutoff
        self.matrix = sp.csr_matrix(
            (np.exp(-pairs.d[within] / self.r_prime), (pairs.cell[within], pairs.city[within])),
            shape=(pairs.n_cells, pairs.n_cities),
        )

    def __call__(self, pop: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(pop, dtype=float)


def potential_field(cities: CitySet, pop, grid: Grid, r_prime: float, cutoff: float | None = None,
                    year: int = 0) -> GridField:
    """Distance-decayed sum of city populations at each cell centre."""
    kernel = PotentialKernel(cities.lon, cities.lat, grid, r_prime, cutoff)
    return GridField(kernel(pop), year, "potential")


@dataclass(frozen=True)
class PotentialCalibration:
    variant: str
    r_prime: float
    b0: float
    bq: float
    adj_r2: float
    cutoff_factor: float = DEFAULT_CUTOFF_FACTOR

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.r_prime > 0:
            raise ValueError("r_prime must be positive")
        if self.adj_r2 > 1 + 1e-12:
            raise ValueError("adjusted R² cannot exceed 1")


def _simple_fit(q: np.ndarray, area: np.ndarray):
    n = len(q)
    qc = q - q.mean()
    sqq = qc @ qc
    if sqq <= 0:
        return None
    ac = area - area.mean()
    bq = (qc @ ac) / sqq
    b0 = area.mean() - bq * q.mean()
    resid = area - b0 - bq * q
    r2 = 1.0 - (resid @ resid) / (ac @ ac)
    return b0, bq, 1.0 - (1.0 - r2) * (n - 1) / (n - 2)


def default_r_prime_grid(r_max: float | None = None) -> list[float]:
    top = 100.0 if r_max is None else min(float(r_max), 100.0)
    return [float(x) for x in np.arange(2.0, top + 1e-9, 2.0)]


def calibrate(observed_area, cities: CitySet, pop, grid: Grid, variant: str = "urban",
              r_grid: Sequence[float] | None = None, r_max: float | None = None,
              cutoff_factor: float = DEFAULT_CUTOFF_FACTOR, capacity=None) -> PotentialCalibration:
    """Pick the range whose potential best explains observed area in a simple regression.

    Candidates at or above ``r_max`` (the fitted city-interaction range) are
    discarded. Ties go to the smaller range. When ``capacity`` is given, cells
    whose area has reached it are censored and left out of the regression.
    """
    area = np.asarray(observed_area, dtype=float)
    if len(area) != len(grid):
        raise ValueError("observed area must align with the grid")
    keep = np.ones(len(area), dtype=bool)
    if capacity is not None:
        keep = area < np.asarray(capacity, dtype=float) * (1.0 - 1e-9)
        if (~keep).any():
            log.info("calibration %s: %d cells at capacity left out", variant, int((~keep).sum()))
        area = area[keep]
    if len(area) < 3:
        raise CalibrationError("need at least 3 grid cells")
    if np.var(area) == 0:
        raise CalibrationError("observed area has zero variance")
    r_grid = sorted(float(r) for r in (default_r_prime_grid(r_max) if r_grid is None else r_grid))
    if r_max is not None:
        r_grid = [r for r in r_grid if r < r_max]
    if not r_grid or r_grid[0] <= 0:
        raise ValueError("r_grid must contain positive ranges below r_max")
    pairs = cell_city_distances(cities.lon, cities.lat, grid, cutoff_factor * r_grid[-1])

    def attempt(r):
        q = PotentialKernel(cities.lon, cities.lat, grid, r, cutoff_factor * r, pairs=pairs)(pop)
        return _simple_fit(q[keep], area)

    with ThreadPoolExecutor(workers()) as pool:
        fits = list(pool.map(attempt, r_grid))
    best = None
    for r, fit in zip(r_grid, fits):
        if fit is not None and (best is None or fit[2] > best[3]):
            best = (r, *fit)
    if best is None:
        raise CalibrationError("potential has zero variance for every candidate range")
    r, b0, bq, adj = best
    return PotentialCalibration(variant, r, float(b0), float(bq), float(adj), cutoff_factor)


def scenario_range(calibration: PotentialCalibration, ssp: str) -> float:
    return calibration.r_prime * RANGE_SCALE[ssp]


def write_calibrations(cals: Sequence[PotentialCalibration], path: Path | str):
    pd.DataFrame(
        [(c.variant, c.r_prime, c.b0, c.bq, c.adj_r2) for c in cals],
        columns=["variant", "r_prime", "b0", "bq", "adj_r2"],
    ).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def read_calibrations(path: Path | str) -> dict[str, PotentialCalibration]:
    df = pd.read_csv(path)
    return {row.variant: PotentialCalibration(row.variant, float(row.r_prime), float(row.b0),
                                              float(row.bq), float(row.adj_r2))
            for row in df.itertuples(index=False)}
