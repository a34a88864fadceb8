"""Domain entities, scenario configuration and CSV loaders.

Cities and grid cells are held column-wise in numpy arrays (``CitySet`` and
``Grid``); the ``City`` and ``GridCell`` records exist for construction and
single-row inspection.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
SSPS = ("SSP1", "SSP2", "SSP3")
QUANTITIES = ("urban_pop", "nonurban_pop", "gdp", "urban_area", "agri_area", "potential")

# 2100 multiplier on the international-trade interaction, and the factor on the
# potential-field ranges, per scenario.
RHO_E1_MULTIPLIER_2100 = {"SSP1": 2.0, "SSP2": 1.0, "SSP3": 0.5}
RANGE_SCALE = {"SSP1": 0.5, "SSP2": 1.0, "SSP3": 2.0}

CITY_HISTORY_YEARS = (1990, 1995, 2000)


class InputError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# geometry


def arc_distance(a, b):
    """Great-circle distance in km between lon/lat points (degrees).

    ``a`` and ``b`` are ``(lon, lat)`` pairs or arrays broadcastable to shape
    ``(..., 2)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lon1, lat1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lon2, lat2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    dlon = lon2 - lon1
    # Vincenty form of the central angle; well conditioned at 0 and pi
    num = np.hypot(
        np.cos(lat2) * np.sin(dlon),
        np.cos(lat1) * np.sin(lat2) - np.sin(lat1) * np.cos(lat2) * np.cos(dlon),
    )
    den = np.sin(lat1) * np.sin(lat2) + np.cos(lat1) * np.cos(lat2) * np.cos(dlon)
    d = EARTH_RADIUS_KM * np.arctan2(num, den)
    return float(d) if np.ndim(d) == 0 else d


def unit_vectors(lon, lat) -> np.ndarray:
    """Points on the unit sphere, shape (n, 3)."""
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def chord_to_arc(chord):
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.clip(np.asarray(chord) / 2.0, 0.0, 1.0))


def arc_to_chord(arc_km):
    return 2.0 * np.sin(np.minimum(np.asarray(arc_km, dtype=float) / EARTH_RADIUS_KM, np.pi) / 2.0)


def cell_area(lat_center, resolution: float = 0.5):
    """Area in km² of a ``resolution``-degree lon/lat cell centred at ``lat_center``."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lat = np.asarray(lat_center, dtype=float)
    half = resolution / 2.0
    lo = np.radians(np.clip(lat - half, -90.0, 90.0))
    hi = np.radians(np.clip(lat + half, -90.0, 90.0))
    area = EARTH_RADIUS_KM**2 * math.radians(resolution) * (np.sin(hi) - np.sin(lo))
    return float(area) if np.ndim(area) == 0 else area


# ---------------------------------------------------------------------------
# entities


@dataclass(frozen=True)
class City:
    id: str
    lon: float
    lat: float
    country: str
    pop: Mapping[int, float]

    def __post_init__(self):
        _check_coords(self.lon, self.lat, f"city {self.id}")
        for year, value in self.pop.items():
            if not value > 0:
                raise InputError(f"city {self.id}: population in {year} must be > 0, got {value}")


@dataclass(frozen=True)
class GridCell:
    id: str
    lon: float
    lat: float
    country: str
    cell_area: float
    urban_area: float
    agri_area: float
    road_dens: float
    airport_dist: float
    ocean_dist: float

    def __post_init__(self):
        _check_coords(self.lon, self.lat, f"cell {self.id}")
        if min(self.urban_area, self.agri_area, self.road_dens, self.airport_dist, self.ocean_dist) < 0:
            raise InputError(f"cell {self.id}: negative area or covariate")
        if self.urban_area + self.agri_area > self.cell_area * (1 + 1e-9):
            raise InputError(f"cell {self.id}: urban + agri area exceeds cell area")


def _check_coords(lon, lat, what):
    if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
        raise InputError(f"{what}: coordinates out of range ({lon}, {lat})")


@dataclass(frozen=True, eq=False)
class CitySet:
    """Column store of cities. ``pop`` maps year -> array aligned with ``ids``."""

    ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    country: np.ndarray
    pop: Mapping[int, np.ndarray]

    def __post_init__(self):
        n = len(self.ids)
        for name in ("lon", "lat", "country"):
            if len(getattr(self, name)) != n:
                raise InputError(f"city column {name} has wrong length")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise InputError("city coordinates out of range")
        for year, values in self.pop.items():
            if len(values) != n:
                raise InputError(f"population {year} has wrong length")
            bad = ~(np.asarray(values) > 0)
            if bad.any():
                raise InputError(f"non-positive population in {year} for city {self.ids[np.argmax(bad)]}")

    @classmethod
    def from_records(cls, cities: Sequence[City]) -> "CitySet":
        years = sorted(set().union(*(c.pop.keys() for c in cities))) if cities else []
        return cls(
            ids=np.array([c.id for c in cities], dtype=object),
            lon=np.array([c.lon for c in cities], dtype=float),
            lat=np.array([c.lat for c in cities], dtype=float),
            country=np.array([c.country for c in cities], dtype=object),
            pop={y: np.array([c.pop[y] for c in cities], dtype=float) for y in years},
        )

    def __len__(self):
        return len(self.ids)

    def record(self, i: int) -> City:
        return City(
            str(self.ids[i]), float(self.lon[i]), float(self.lat[i]), str(self.country[i]),
            {y: float(v[i]) for y, v in self.pop.items()},
        )

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def subset(self, mask) -> "CitySet":
        mask = np.asarray(mask)
        return CitySet(
            self.ids[mask], self.lon[mask], self.lat[mask], self.country[mask],
            {y: v[mask] for y, v in self.pop.items()},
        )

    def with_pop(self, pop: Mapping[int, np.ndarray]) -> "CitySet":
        return CitySet(self.ids, self.lon, self.lat, self.country, dict(pop))


@dataclass(frozen=True, eq=False)
class Grid:
    """Column store of grid cells at a fixed lon/lat resolution."""

    ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    country: np.ndarray
    cell_area: np.ndarray
    urban_area: np.ndarray
    agri_area: np.ndarray
    road_dens: np.ndarray
    airport_dist: np.ndarray
    ocean_dist: np.ndarray
    resolution: float = 0.5
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        for name in ("lon", "lat", "country", "cell_area", "urban_area", "agri_area",
                     "road_dens", "airport_dist", "ocean_dist"):
            if len(getattr(self, name)) != n:
                raise InputError(f"grid column {name} has wrong length")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise InputError("grid coordinates out of range")
        for name in ("urban_area", "agri_area", "road_dens", "airport_dist", "ocean_dist"):
            if np.any(getattr(self, name) < 0):
                raise InputError(f"negative {name} in grid")
        if np.any(self.urban_area + self.agri_area > self.cell_area * (1 + 1e-9)):
            raise InputError("urban + agri area exceeds cell area")
        index = {key: i for i, key in enumerate(zip(*self._cell_keys(self.lon, self.lat)))}
        if len(index) != n:
            raise InputError("grid has duplicate cells at its resolution")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_records(cls, cells: Sequence[GridCell], resolution: float = 0.5) -> "Grid":
        cols = {name: [getattr(c, name) for c in cells] for name in GridCell.__dataclass_fields__}
        return cls(
            ids=np.array(cols.pop("id"), dtype=object),
            country=np.array(cols.pop("country"), dtype=object),
            resolution=resolution,
            **{k: np.array(v, dtype=float) for k, v in cols.items()},
        )

    def __len__(self):
        return len(self.ids)

    def record(self, i: int) -> GridCell:
        return GridCell(
            str(self.ids[i]), float(self.lon[i]), float(self.lat[i]), str(self.country[i]),
            *(float(getattr(self, n)[i]) for n in
              ("cell_area", "urban_area", "agri_area", "road_dens", "airport_dist", "ocean_dist")),
        )

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def _cell_keys(self, lon, lat):
        res = self.resolution
        return (np.floor(np.asarray(lon) / res).astype(np.int64),
                np.floor(np.asarray(lat) / res).astype(np.int64))

    def locate(self, lon, lat) -> np.ndarray:
        """Index of the containing cell for each point, -1 when outside the grid."""
        ix, iy = self._cell_keys(lon, lat)
        return np.array([self._index.get(k, -1) for k in zip(ix.tolist(), iy.tolist())], dtype=np.int64)

    def with_areas(self, urban_area, agri_area) -> "Grid":
        return Grid(
            self.ids, self.lon, self.lat, self.country, self.cell_area,
            np.asarray(urban_area, dtype=float), np.asarray(agri_area, dtype=float),
            self.road_dens, self.airport_dist, self.ocean_dist, self.resolution,
        )


class TradeTable:
    """Symmetric bilateral trade amounts; missing pairs read as zero."""

    def __init__(self, entries: Mapping[tuple[str, str], float] | None = None):
        self._entries: dict[frozenset, float] = {}
        for (a, b), amount in (entries or {}).items():
            if amount < 0 or not np.isfinite(amount):
                raise InputError(f"trade amount for ({a}, {b}) must be finite and >= 0")
            key = frozenset((a, b))
            if key in self._entries and self._entries[key] != amount:
                raise InputError(f"conflicting trade amounts for ({a}, {b})")
            self._entries[key] = float(amount)

    def __call__(self, a: str, b: str) -> float:
        return self._entries.get(frozenset((a, b)), 0.0)

    def has(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self._entries

    def scaled(self, factor: float) -> "TradeTable":
        out = TradeTable()
        out._entries = {k: v * factor for k, v in self._entries.items()}
        return out

    def matrix(self, codes: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Dense (amount, present) matrices over ``codes``."""
        pos = {c: i for i, c in enumerate(codes)}
        amount = np.zeros((len(codes), len(codes)))
        present = np.zeros((len(codes), len(codes)), dtype=bool)
        for key, value in self._entries.items():
            pair = tuple(key) if len(key) == 2 else (next(iter(key)),) * 2
            if pair[0] in pos and pair[1] in pos:
                i, j = pos[pair[0]], pos[pair[1]]
                amount[i, j] = amount[j, i] = value
                present[i, j] = present[j, i] = True
        return amount, present

    def items(self):
        for key, value in sorted(self._entries.items(), key=lambda kv: sorted(kv[0])):
            a, b = sorted(key) if len(key) == 2 else (next(iter(key)),) * 2
            yield a, b, value


@dataclass(frozen=True)
class ScenarioConfig:
    ssp: str
    rho_e1_multiplier_2100: float
    range_scale: float
    base_year: int = 2010
    horizon: int = 2100
    step: int = 5

    def __post_init__(self):
        if self.ssp not in SSPS:
            raise ValueError(f"unknown scenario {self.ssp!r}")
        if self.rho_e1_multiplier_2100 <= 0 or self.range_scale <= 0:
            raise ValueError("scenario multipliers must be positive")
        if not self.base_year < self.horizon:
            raise ValueError("base_year must precede horizon")
        if self.step <= 0 or (self.horizon - self.base_year) % self.step:
            raise ValueError("step must divide horizon - base_year")

    @classmethod
    def for_ssp(cls, ssp: str, base_year: int = 2010, horizon: int = 2100, step: int = 5):
        if ssp not in SSPS:
            raise ValueError(f"unknown scenario {ssp!r}")
        return cls(ssp, RHO_E1_MULTIPLIER_2100[ssp], RANGE_SCALE[ssp], base_year, horizon, step)

    @property
    def years(self) -> list[int]:
        return list(range(self.base_year, self.horizon + 1, self.step))


@dataclass(frozen=True, eq=False)
class GridField:
    """Per-cell values of one quantity in one year, aligned with a Grid."""

    values: np.ndarray
    year: int
    quantity: str

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown quantity {self.quantity!r}")
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"{self.quantity} field for {self.year} must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def as_dict(self, grid: Grid) -> dict:
        return dict(zip(grid.ids.tolist(), self.values.tolist()))


class ScenarioTable:
    """Country series per scenario: (ssp, country, year) -> urban_pop, nonurban_pop, gdp."""

    COLUMNS = ("urban_pop", "nonurban_pop", "gdp")

    def __init__(self, frame: pd.DataFrame):
        missing = {"ssp", "country", "year", *self.COLUMNS} - set(frame.columns)
        if missing:
            raise InputError(f"scenario table lacks columns {sorted(missing)}")
        frame = frame.copy()
        frame["year"] = frame["year"].astype(int)
        frame["country"] = frame["country"].astype(str)
        if (frame[list(self.COLUMNS)] < 0).any().any() or not np.isfinite(frame[list(self.COLUMNS)]).all().all():
            raise InputError("scenario series must be finite and non-negative")
        if frame.duplicated(["ssp", "country", "year"]).any():
            raise InputError("duplicate (ssp, country, year) rows in scenario table")
        self.frame = frame.set_index(["ssp", "country", "year"]).sort_index()

    def countries(self, ssp: str) -> list[str]:
        return sorted(self.frame.loc[ssp].index.get_level_values("country").unique())

    def totals(self, ssp: str, year: int, quantity: str) -> dict[str, float]:
        if quantity == "pop":
            sub = self.frame.xs((ssp, year), level=("ssp", "year"))
            s = sub["urban_pop"] + sub["nonurban_pop"]
        else:
            s = self.frame.xs((ssp, year), level=("ssp", "year"))[quantity]
        return {str(k): float(v) for k, v in s.items()}

    def check_years(self, ssp: str, years: Iterable[int]):
        years = list(years)
        if ssp not in self.frame.index.get_level_values("ssp"):
            raise InputError(f"scenario table has no rows for {ssp}")
        sub = self.frame.loc[ssp]
        for country in self.countries(ssp):
            have = set(sub.loc[country].index)
            lacking = [y for y in years if y not in have]
            if lacking:
                raise InputError(f"{ssp}/{country}: scenario series lacks years {lacking}")


# ---------------------------------------------------------------------------
# CSV loaders


def read_cities(path: Path | str, countries: Iterable[str] | None = None) -> CitySet:
    df = pd.read_csv(path, dtype={"id": str, "country": str})
    cols = {"id", "lon", "lat", "country"} | {f"pop{y}" for y in CITY_HISTORY_YEARS}
    if cols - set(df.columns):
        raise InputError(f"{path}: missing columns {sorted(cols - set(df.columns))}")
    if df["id"].duplicated().any():
        raise InputError(f"{path}: duplicate city ids")
    if countries is not None:
        unknown = sorted(set(df["country"]) - set(countries))
        if unknown:
            raise InputError(f"{path}: cities reference unknown countries {unknown[:5]}")
    return CitySet(
        ids=df["id"].to_numpy(dtype=object),
        lon=df["lon"].to_numpy(dtype=float),
        lat=df["lat"].to_numpy(dtype=float),
        country=df["country"].to_numpy(dtype=object),
        pop={y: df[f"pop{y}"].to_numpy(dtype=float) for y in CITY_HISTORY_YEARS},
    )


GRID_COLUMNS = ("id", "lon", "lat", "country", "cell_area", "urban_area", "agri_area",
                "road_dens", "airport_dist", "ocean_dist")


def read_grid(path: Path | str, resolution: float = 0.5) -> Grid:
    df = pd.read_csv(path, dtype={"id": str, "country": str})
    missing = set(GRID_COLUMNS) - set(df.columns)
    if missing:
        raise InputError(f"{path}: missing columns {sorted(missing)}")
    if df["id"].duplicated().any():
        raise InputError(f"{path}: duplicate grid ids")
    kw = {c: df[c].to_numpy(dtype=float) for c in GRID_COLUMNS[4:]}
    return Grid(
        ids=df["id"].to_numpy(dtype=object), lon=df["lon"].to_numpy(dtype=float),
        lat=df["lat"].to_numpy(dtype=float), country=df["country"].to_numpy(dtype=object),
        resolution=resolution, **kw,
    )


def read_trade(path: Path | str) -> TradeTable:
    df = pd.read_csv(path, dtype={"country_a": str, "country_b": str})
    if {"country_a", "country_b", "amount"} - set(df.columns):
        raise InputError(f"{path}: expected columns country_a,country_b,amount")
    return TradeTable({(a, b): float(v) for a, b, v in df[["country_a", "country_b", "amount"]].itertuples(index=False)})


def read_scenario(path: Path | str) -> ScenarioTable:
    return ScenarioTable(pd.read_csv(path, dtype={"ssp": str, "country": str}))


def read_observed(path: Path | str, grid: Grid) -> dict[str, np.ndarray]:
    """Base-year reference grid (grid_id, urban_pop, nonurban_pop, gdp) aligned to ``grid``."""
    df = pd.read_csv(path, dtype={"grid_id": str})
    need = {"grid_id", "urban_pop", "nonurban_pop", "gdp"}
    if need - set(df.columns):
        raise InputError(f"{path}: missing columns {sorted(need - set(df.columns))}")
    df = df.set_index("grid_id").reindex(grid.ids.astype(str))
    out = {}
    for col in ("urban_pop", "nonurban_pop", "gdp"):
        v = df[col].fillna(0.0).to_numpy(dtype=float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InputError(f"{path}: {col} must be finite and non-negative")
        out[col] = v
    return out


def check_city_countries(cities: CitySet, grid: Grid) -> int:
    """Count cities whose containing cell belongs to another country (attribute wins)."""
    idx = grid.locate(cities.lon, cities.lat)
    inside = idx >= 0
    mismatched = int(np.sum(grid.country[idx[inside]] != cities.country[inside]))
    if mismatched:
        log.warning("%d cities lie in cells of a different country; keeping the city attribute", mismatched)
    return mismatched
