"""End-to-end orchestration: configuration, stages, provenance and validation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import __version__
from .citygrowth import (
    DEFAULT_R_GRID,
    GrowthModelFit,
    assemble_design,
    build_matrices,
    project_cities,
    search_range,
    write_projection,
)
from .downscaler import (
    TARGETS,
    CountryIndex,
    DownscaleEnsemble,
    YearInputs,
    downscale,
    fit_weights,
    importance_shares,
    submodel_fields,
    write_importance,
)
from .expansion import AreaTrajectory, project_areas
from .potential import (
    PotentialKernel,
    calibrate,
    cell_city_distances,
    read_calibrations,
    scenario_range,
    write_calibrations,
)
from .synth import GrowthTruth, SyntheticWorldSpec, generate_world
from .validation import ValidationReport, gini, log_scatter, lorenz, mass_balance, ordered
from .worldmodel import (
    CITY_HISTORY_YEARS,
    SSPS,
    InputError,
    check_city_countries,
    read_cities,
    read_grid,
    read_observed,
    read_scenario,
    read_trade,
)

log = logging.getLogger(__name__)

CSV = dict(index=False, float_format="%.12g", lineterminator="\n")

DEVIATIONS = (
    "geo kernel truncated at geo_cutoff_factor * r",
    "potential kernel truncated at potential_cutoff_factor * r_prime",
    "projection feeds each step's predicted growth into the next step's spatial lags (no simultaneous solve)",
    "rho_e1 schedule evaluated at the end year of each projection step",
    "intra-country trade missing -> population-product weights for the national matrix",
    "ensemble weights fitted once at the calibration year and held fixed",
    "importance shares = weights reweighted by field masses, computed globally",
    "distance controls enter as 1 / (1 + distance)",
    "urban area capped at cell area when it alone exceeds the cell",
    "cells already at land capacity are left out of the potential calibration",
    "boosting steps may shrink earlier coefficients down to zero; default learning rate 1.0",
)


class ConfigError(InputError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ValidationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _range_list(text: str) -> list[float] | None:
    text = text.strip()
    if text == "auto":
        return None
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ConfigError(f"range step must be positive in {text!r}")
        return [float(x) for x in np.arange(start, stop + step / 2, step)]
    return [float(x) for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return v


def _ssps(text: str) -> tuple:
    out = tuple(s.strip().upper() for s in text.split(",") if s.strip())
    bad = [s for s in out if s not in SSPS]
    if bad or not out:
        raise ConfigError(f"scenarios must be a subset of {SSPS}, got {text!r}")
    return out


@dataclass
class RunConfig:
    cities: Path | None = None
    grid: Path | None = None
    trade: Path | None = None
    scenario: Path | None = None
    observed: Path | None = None
    truth: Path | None = None
    synthetic: bool = False
    scenarios: tuple = SSPS
    base_year: int = 2010
    horizon: int = 2100
    step: int = 5
    calibration_year: int = 2000
    resolution: float = 0.5
    r_grid: list | None = field(default_factory=lambda: list(DEFAULT_R_GRID))
    r_prime_grid: list | None = None
    geo_cutoff_factor: float = 5.0
    potential_cutoff_factor: float = 5.0
    learning_rate: float = 1.0
    iterations: int = 200
    seed: int = 0
    synth: dict = field(default_factory=dict)

    _PARSERS = {
        "cities": Path, "grid": Path, "trade": Path, "scenario": Path, "observed": Path, "truth": Path,
        "synthetic": _bool, "scenarios": _ssps, "base_year": int, "horizon": int, "step": int,
        "calibration_year": int, "resolution": float, "r_grid": _range_list, "r_prime_grid": _range_list,
        "geo_cutoff_factor": float, "potential_cutoff_factor": float, "learning_rate": float,
        "iterations": int, "seed": _seed,
    }
    _SYNTH = {
        "n_countries": int, "cities_per_country": int, "nx": int, "ny": int, "resolution": float,
        "zipf_exponent": float, "max_city_pop": float, "intra_trade": _bool, "r_prime": float,
        "r_prime_agri": float, "grid_noise": float, "scenario_spread": float, "area_noise": float,
        "alpha": float, "rho_geo": float, "rho_e1": float, "rho_e2": float, "beta_road": float,
        "beta_ocean": float, "beta_airport": float, "r": float, "sigma": float, "mean_growth": float,
        "b0": float, "urban_peak_share": float, "urban_peak_quantile": float, "burn_in": int,
    }

    @classmethod
    def parse(cls, text: str, base_dir: Path | str = ".") -> "RunConfig":
        base_dir = Path(base_dir)
        values, synth = {}, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            try:
                if key.startswith("synth."):
                    name = key[len("synth."):]
                    if name not in cls._SYNTH:
                        raise ConfigError(f"line {lineno}: unknown key {key!r}")
                    synth[name] = cls._SYNTH[name](value)
                elif key in cls._PARSERS:
                    parsed = cls._PARSERS[key](value)
                    if isinstance(parsed, Path) and not parsed.is_absolute():
                        parsed = base_dir / parsed
                    values[key] = parsed
                else:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        cfg = cls(**values, synth=synth)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        return cls.parse(path.read_text(), path.parent)

    def check(self, inputs: bool = False):
        if self.horizon < self.base_year + self.step:
            raise ConfigError("horizon must be at least base_year + step")
        if self.step <= 0 or (self.horizon - self.base_year) % self.step:
            raise ConfigError("step must divide horizon - base_year")
        if (self.base_year - self.calibration_year) % self.step or self.base_year < self.calibration_year:
            raise ConfigError("base_year must follow calibration_year on the step grid")
        if self.calibration_year != CITY_HISTORY_YEARS[-1]:
            raise ConfigError(f"calibration_year must be {CITY_HISTORY_YEARS[-1]} (last city history year)")
        if self.r_grid is None or not self.r_grid or min(self.r_grid) <= 0:
            raise ConfigError("r_grid must list positive ranges")
        if self.r_prime_grid is not None and (not self.r_prime_grid or min(self.r_prime_grid) <= 0):
            raise ConfigError("r_prime_grid must list positive ranges")
        if self.iterations < 1 or not 0 < self.learning_rate <= 1:
            raise ConfigError("boosting needs iterations >= 1 and learning_rate in (0, 1]")
        if inputs:
            for name in ("cities", "grid", "trade", "scenario", "observed"):
                p = getattr(self, name)
                if p is None:
                    raise ConfigError(f"config lacks input path {name!r}")
                if not Path(p).exists():
                    raise ConfigError(f"input {name} not found: {p}")

    def canonical(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = v.name
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    @property
    def out_years(self) -> list[int]:
        return list(range(self.base_year, self.horizon + 1, self.step))

    @property
    def all_years(self) -> list[int]:
        return list(range(self.calibration_year, self.horizon + 1, self.step))

    def world_spec(self) -> SyntheticWorldSpec:
        growth_keys = {f.name for f in fields(GrowthTruth)}
        g = {k: v for k, v in self.synth.items() if k in growth_keys}
        rest = {k: v for k, v in self.synth.items() if k not in growth_keys}
        return SyntheticWorldSpec(growth=GrowthTruth(**g), **rest)


# ---------------------------------------------------------------------------
# stage plumbing


def _write_meta(out: Path, stage: str, cfg: RunConfig, parameters: dict, files: list[str]):
    import numpy
    import scipy

    doc = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "parameters": parameters,
        "deviations": list(DEVIATIONS),
        "files": sorted(files),
        "versions": {"gridssp": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__},
    }
    (out / f"{stage}.meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _stage(name: str):
    def wrap(fn: Callable):
        def run(cfg: RunConfig, out: Path | str):
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
            marker = out / f"{name}.FAILED"
            if marker.exists():
                marker.unlink()
            try:
                result = fn(cfg, out)
            except Exception as exc:
                marker.write_text(f"{type(exc).__name__}: {exc}\n")
                raise StageError(name, exc) from exc
            return result

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


class World:
    """Input tables loaded once per stage."""

    def __init__(self, cfg: RunConfig):
        cfg.check(inputs=True)
        self.scenario = read_scenario(cfg.scenario)
        self.grid = read_grid(cfg.grid, cfg.resolution)
        self.countries_known = set(self.grid.country.astype(str))
        self.cities = read_cities(cfg.cities, self.countries_known)
        self.trade = read_trade(cfg.trade)
        self.observed = read_observed(cfg.observed, self.grid)
        check_city_countries(self.cities, self.grid)
        for ssp in cfg.scenarios:
            self.scenario.check_years(ssp, cfg.out_years)
            extra = set(self.scenario.countries(ssp)) - self.countries_known
            if extra:
                raise InputError(f"{ssp}: scenario countries without grid cells: {sorted(extra)[:5]}")
        self.countries = CountryIndex(self.grid.country)

    def design(self):
        return assemble_design(self.cities, self.grid, CITY_HISTORY_YEARS)


def _generate_inputs(cfg: RunConfig, out: Path, reuse: bool = False) -> RunConfig:
    inputs = Path(out) / "inputs"
    if not (reuse and (inputs / "truth.json").exists()):
        generate_world(cfg.world_spec(), cfg.seed, inputs)
    vals = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    vals.update({n: inputs / f"{n}.csv" for n in ("cities", "grid", "trade", "scenario", "observed")})
    vals["truth"] = inputs / "truth.json"
    vals["synthetic"] = False
    vals["resolution"] = cfg.world_spec().resolution
    return RunConfig(**vals)


@_stage("synth")
def stage_synth(cfg: RunConfig, out: Path):
    """Write a synthetic world (inputs + truth) into ``out/inputs``, where later stages look for it."""
    generate_world(cfg.world_spec(), cfg.seed, out / "inputs")
    _write_meta(out, "synth", cfg, {"seed": cfg.seed, **cfg.synth},
                [f"inputs/{n}" for n in ("cities.csv", "grid.csv", "trade.csv", "scenario.csv", "observed.csv",
                                         "truth.json")])


@_stage("calibrate")
def stage_calibrate(cfg: RunConfig, out: Path):
    """Growth model range search plus urban and agricultural potential calibration."""
    world = World(cfg)
    design = world.design()
    fit = search_range(design, world.trade, cfg.r_grid, cutoff_factor=cfg.geo_cutoff_factor)
    fit.metadata["projection"] = "lag-forward recursion"
    fit.metadata["dropped_cities"] = len(design.dropped)
    fit.to_csv(out / "fit.csv")
    pop = world.cities.pop[cfg.calibration_year]
    g = world.grid
    cals = [
        calibrate(g.urban_area, world.cities, pop, g, "urban", cfg.r_prime_grid,
                  r_max=fit.r, cutoff_factor=cfg.potential_cutoff_factor, capacity=g.cell_area),
        calibrate(g.agri_area, world.cities, pop, g, "agri", cfg.r_prime_grid,
                  r_max=fit.r, cutoff_factor=cfg.potential_cutoff_factor, capacity=g.cell_area - g.urban_area),
    ]
    write_calibrations(cals, out / "potential_calibration.csv")
    _write_meta(out, "calibrate", cfg, {"fit": fit.coefficients, "r": fit.r, "r2_delta": fit.r2_delta,
                                        "r2_level": fit.r2_level, "n": fit.n,
                                        "calibrations": [c.__dict__ for c in cals]},
                ["fit.csv", "potential_calibration.csv"])
    return fit, cals


def _projected(out: Path, ssp: str) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    path = out / f"cities_projected_{ssp}.csv"
    if not path.exists():
        raise InputError(f"missing {path.name}; run project-cities first")
    df = pd.read_csv(path, dtype={"id": str})
    ids = df.loc[df["year"] == df["year"].min(), "id"].to_numpy()
    pops = {int(y): sub.set_index("id").loc[ids, "pop"].to_numpy(dtype=float) for y, sub in df.groupby("year")}
    return ids, pops


@_stage("project-cities")
def stage_project_cities(cfg: RunConfig, out: Path):
    """Project retained cities from the calibration year to the horizon for each scenario."""
    world = World(cfg)
    fit = GrowthModelFit.from_csv(out / "fit.csv")
    design = world.design()
    cities = design.cities
    y1, y2 = CITY_HISTORY_YEARS[-2:]
    mats = build_matrices(cities, world.trade, fit.r, y2, cfg.geo_cutoff_factor)
    dp0 = np.log(cities.pop[y2] / cities.pop[y1])
    files = []
    for ssp in cfg.scenarios:
        pops = project_cities(fit, design.X, cities.pop[y2], dp0, mats, ssp, y2, cfg.horizon, cfg.step,
                              ids=cities.ids)
        name = f"cities_projected_{ssp}.csv"
        write_projection(pops, cities.ids, out / name)
        files.append(name)
    _write_meta(out, "project-cities", cfg, {"start_year": y2, "horizon": cfg.horizon, "r": fit.r}, files)


@_stage("potentials")
def stage_potentials(cfg: RunConfig, out: Path):
    """Scenario potential fields (urban and agricultural ranges) for every year."""
    world = World(cfg)
    cals = read_calibrations(out / "potential_calibration.csv")
    files, params = [], {}
    for ssp in cfg.scenarios:
        ids, pops = _projected(out, ssp)
        cities = world.cities
        idx = pd.Index(cities.ids.astype(str)).get_indexer(ids)
        lon, lat = cities.lon[idx], cities.lat[idx]
        ranges = {v: scenario_range(cals[v], ssp) for v in ("urban", "agri")}
        params[ssp] = ranges
        top = cfg.potential_cutoff_factor * max(ranges.values())
        pairs = cell_city_distances(lon, lat, world.grid, top)
        kernels = {v: PotentialKernel(lon, lat, world.grid, r, cfg.potential_cutoff_factor * r, pairs=pairs)
                   for v, r in ranges.items()}
        for year in cfg.all_years:
            name = f"potential_{ssp}_{year}.csv"
            pd.DataFrame({"grid_id": world.grid.ids, "q": kernels["urban"](pops[year]),
                          "q_agri": kernels["agri"](pops[year])}).to_csv(out / name, **CSV)
            files.append(name)
    _write_meta(out, "potentials", cfg, {"ranges": params}, files)


def _potential(out: Path, ssp: str, year: int, grid_ids) -> pd.DataFrame:
    path = out / f"potential_{ssp}_{year}.csv"
    if not path.exists():
        raise InputError(f"missing {path.name}; run potentials first")
    return pd.read_csv(path, dtype={"grid_id": str}).set_index("grid_id").reindex(grid_ids.astype(str))


@_stage("areas")
def stage_areas(cfg: RunConfig, out: Path):
    """Urban and agricultural area trajectories per scenario."""
    world = World(cfg)
    grid = world.grid
    cals = read_calibrations(out / "potential_calibration.csv")
    files, capped = [], {}
    for ssp in cfg.scenarios:
        pots = {"urban": {}, "agri": {}}
        for year in cfg.all_years:
            df = _potential(out, ssp, year, grid.ids)
            pots["urban"][year] = df["q"].to_numpy(dtype=float)
            pots["agri"][year] = df["q_agri"].to_numpy(dtype=float)
        traj = project_areas(grid.urban_area, grid.agri_area, grid.cell_area, pots, cals,
                             cfg.calibration_year, cfg.horizon, cfg.step)
        name = f"areas_{ssp}.csv"
        traj.to_csv(grid.ids, out / name, years=cfg.out_years)
        files.append(name)
        capped[ssp] = {int(y): grid.ids[c].tolist() for y, c in traj.capped_cells.items()}
    _write_meta(out, "areas", cfg, {"urban_capped_cells": capped}, files)


def _base_inputs(world: World, cals, cfg: RunConfig) -> YearInputs:
    grid = world.grid
    pop = world.cities.pop[cfg.calibration_year]
    cell = grid.locate(world.cities.lon, world.cities.lat)
    inside = cell >= 0
    upg = np.bincount(cell[inside], weights=pop[inside], minlength=len(grid))
    q = PotentialKernel(world.cities.lon, world.cities.lat, grid, cals["urban"].r_prime,
                        cfg.potential_cutoff_factor * cals["urban"].r_prime)(pop)
    return YearInputs(grid.urban_area, grid.agri_area, upg, q)


def fit_ensembles(world: World, cals, cfg: RunConfig) -> tuple[dict, dict]:
    """Fit one ensemble per target against the calibration-year reference grid."""
    inputs = _base_inputs(world, cals, cfg)
    countries = world.countries
    ensembles, fitted = {}, {}
    for target in TARGETS:
        if target == "gdp":
            pop = world.observed["urban_pop"] + world.observed["nonurban_pop"]
            inputs = YearInputs(inputs.urban_area, inputs.agri_area, inputs.urban_pop_grid, inputs.potential, pop)
        y = world.observed[target]
        totals = dict(zip(countries.codes, countries.sums(y)))
        F = submodel_fields(target, world.grid, countries, inputs, totals)
        ens = fit_weights(F, y, target, learning_rate=cfg.learning_rate, iterations=cfg.iterations)
        ensembles[target] = ens
        fitted[target] = F @ ens.weights
    return ensembles, fitted


@_stage("downscale")
def stage_downscale(cfg: RunConfig, out: Path):
    """Fit ensemble weights at the calibration year, then downscale every scenario year."""
    world = World(cfg)
    grid, countries = world.grid, world.countries
    cals = read_calibrations(out / "potential_calibration.csv")
    ensembles, fitted = fit_ensembles(world, cals, cfg)
    files = []
    for target, ens in ensembles.items():
        ens.to_csv(out / f"weights_{target}.csv")
        files.append(f"weights_{target}.csv")
    pd.concat([pd.DataFrame({"grid_id": grid.ids, "target": t, "observed": world.observed[t], "fitted": fitted[t]})
               for t in TARGETS]).to_csv(out / "fitted_base.csv", **CSV)
    files.append("fitted_base.csv")

    for ssp in cfg.scenarios:
        city_ids, pops = _projected(out, ssp)
        idx = pd.Index(world.cities.ids.astype(str)).get_indexer(city_ids)
        cell = grid.locate(world.cities.lon[idx], world.cities.lat[idx])
        inside = cell >= 0
        traj = AreaTrajectory.from_csv(out / f"areas_{ssp}.csv", grid.ids, cfg.calibration_year)
        results = {t: [] for t in TARGETS}
        for year in cfg.out_years:
            if year not in traj.urban:
                raise InputError(f"areas_{ssp}.csv lacks {year}")
            upg = np.bincount(cell[inside], weights=pops[year][inside], minlength=len(grid))
            q = _potential(out, ssp, year, grid.ids)["q"].to_numpy(dtype=float)
            inputs = YearInputs(traj.urban[year], traj.agri[year], upg, q)
            out_year = {}
            for target in ("urban_pop", "nonurban_pop"):
                totals = world.scenario.totals(ssp, year, target)
                F = submodel_fields(target, grid, countries, inputs, totals)
                out_year[target] = downscale(ensembles[target], F, year)
                shares = importance_shares(ensembles[target], F)
                write_importance(ensembles[target], shares, out / f"importance_{target}_{ssp}_{year}.csv")
                files.append(f"importance_{target}_{ssp}_{year}.csv")
            gdp_inputs = YearInputs(inputs.urban_area, inputs.agri_area, upg, q,
                                    out_year["urban_pop"].values + out_year["nonurban_pop"].values)
            F = submodel_fields("gdp", grid, countries, gdp_inputs, world.scenario.totals(ssp, year, "gdp"))
            out_year["gdp"] = downscale(ensembles["gdp"], F, year)
            write_importance(ensembles["gdp"], importance_shares(ensembles["gdp"], F),
                             out / f"importance_gdp_{ssp}_{year}.csv")
            files.append(f"importance_gdp_{ssp}_{year}.csv")
            for t in TARGETS:
                results[t].append(pd.DataFrame({"grid_id": grid.ids, "year": year, "value": out_year[t].values}))
        for t in TARGETS:
            name = f"downscaled_{t}_{ssp}.csv"
            pd.concat(results[t]).to_csv(out / name, **CSV)
            files.append(name)
    _write_meta(out, "downscale", cfg, {
        "weights": {t: e.weights for t, e in ensembles.items()},
        "learning_rate": cfg.learning_rate, "iterations": cfg.iterations,
        "final_loss": {t: e.loss_trace[-1] for t, e in ensembles.items()},
        "weights_fixed_at": cfg.calibration_year,
    }, files)
    return ensembles


# ---------------------------------------------------------------------------
# validation


def _downscaled(out: Path, target: str, ssp: str, grid_ids) -> dict[int, np.ndarray]:
    path = out / f"downscaled_{target}_{ssp}.csv"
    if not path.exists():
        raise InputError(f"missing {path.name}; run downscale first")
    df = pd.read_csv(path, dtype={"grid_id": str})
    return {int(y): sub.set_index("grid_id")["value"].reindex(grid_ids.astype(str)).to_numpy(dtype=float)
            for y, sub in df.groupby("year")}


def validate(cfg: RunConfig, out: Path | str, tolerance: float = 1e-9) -> ValidationReport:
    """Mass balance, base-year scatter, concentration and (with truth) recovery checks."""
    out = Path(out)
    world = World(cfg)
    grid, countries = world.grid, world.countries
    report = ValidationReport(tolerance=tolerance)
    tidy_gini = []
    horizon_gini = {"pop": [], "gdp": [], "urban_area": []}
    for ssp in cfg.scenarios:
        grids = {t: _downscaled(out, t, ssp, grid.ids) for t in TARGETS}
        traj = AreaTrajectory.from_csv(out / f"areas_{ssp}.csv", grid.ids, cfg.calibration_year)
        for t in TARGETS:
            worst = 0.0
            for year, values in grids[t].items():
                Y = countries.totals_vector(world.scenario.totals(ssp, year, t))
                worst = max(worst, float(np.max(np.abs(mass_balance(values, countries.index, Y)))))
            report.mass_balance[(t, ssp)] = worst
            report.verdicts[f"mass_balance/{t}/{ssp}"] = worst <= tolerance
        for year in cfg.out_years:
            for q, values in (("pop", grids["urban_pop"][year] + grids["nonurban_pop"][year]),
                              ("gdp", grids["gdp"][year]), ("urban_area", traj.urban[year])):
                g = gini(values)
                report.gini[(q, ssp, year)] = g
                tidy_gini.append((q, ssp, year, g))
                if year == cfg.horizon and q in horizon_gini:
                    x, y = lorenz(values)
                    pd.DataFrame({"cum_cells": x, "cum_share": y}).to_csv(
                        out / f"lorenz_{q}_{ssp}_{year}.csv", **CSV)
        for q in horizon_gini:
            horizon_gini[q].append(report.gini[(q, ssp, cfg.horizon)])
    ordered_ssps = [s for s in SSPS if s in cfg.scenarios]
    if len(ordered_ssps) > 1 and list(cfg.scenarios) == ordered_ssps:
        for q, values in horizon_gini.items():
            report.verdicts[f"gini_order/{q}/{cfg.horizon}"] = ordered(values)
    pd.DataFrame(tidy_gini, columns=["quantity", "ssp", "year", "gini"]).to_csv(out / "gini_timeseries.csv", **CSV)

    fitted = pd.read_csv(out / "fitted_base.csv", dtype={"grid_id": str})
    for t, sub in fitted.groupby("target"):
        report.scatter[t] = log_scatter(sub["fitted"].to_numpy(), sub["observed"].to_numpy())
        sub[["grid_id", "observed", "fitted"]].to_csv(out / f"scatter_{t}.csv", **CSV)

    if cfg.truth is not None and Path(cfg.truth).exists():
        report.recovery = _recovery(out, json.loads(Path(cfg.truth).read_text()))
    (out / "validation_report.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")
    return report


def _recovery(out: Path, truth: dict) -> dict:
    fit = GrowthModelFit.from_csv(out / "fit.csv")
    g = truth["growth"]
    rows = {}
    for name, est in fit.coefficients.items():
        if name in g:
            rows[name] = (est, g[name], est - g[name])
    rows["r"] = (fit.r, g["r"], fit.r - g["r"])
    cals = read_calibrations(out / "potential_calibration.csv")
    rows["r_prime"] = (cals["urban"].r_prime, truth["r_prime"], cals["urban"].r_prime - truth["r_prime"])
    rows["r_prime_agri"] = (cals["agri"].r_prime, truth["r_prime_agri"],
                            cals["agri"].r_prime - truth["r_prime_agri"])
    for t in TARGETS:
        path = out / f"weights_{t}.csv"
        if path.exists():
            w = pd.read_csv(path).sort_values("k")["omega"].to_numpy()
            l1 = float(np.abs(w - np.asarray(truth["omega"][t])).sum())
            rows[f"omega_{t}_l1"] = (l1, 0.0, l1)
    return rows


@_stage("validate")
def stage_validate(cfg: RunConfig, out: Path):
    report = validate(cfg, out)
    if not report.passed:
        failed = sorted(k for k, v in report.verdicts.items() if not v)
        raise ValidationFailed(f"failed checks: {', '.join(failed)}")
    return report


STAGES = {
    "calibrate": stage_calibrate,
    "project-cities": stage_project_cities,
    "potentials": stage_potentials,
    "areas": stage_areas,
    "downscale": stage_downscale,
    "validate": stage_validate,
}


def run_pipeline(cfg: RunConfig, out: Path | str) -> ValidationReport:
    """Run every stage in order; synthetic configs first generate their inputs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic:
        cfg = _generate_inputs(cfg, out)
        cfg.check(inputs=True)
    result = None
    for name, stage in STAGES.items():
        log.info("stage %s", name)
        result = stage(cfg, out)
    return result


def prepare(cfg: RunConfig, out: Path | str) -> RunConfig:
    """Resolve a synthetic config to the generated inputs under ``out`` (generating them once)."""
    out = Path(out)
    if not cfg.synthetic:
        return cfg
    return _generate_inputs(cfg, out, reuse=True)
