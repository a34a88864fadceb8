"""City growth model: spatial 2SLS estimation, range search and projection.

The model explains the 5-year log growth of each city by spatial lags of the
previous period's growth under three connectivity matrices, the log level of
the city, and log covariates taken from the containing grid cell::

    dp[t+5] = (rho_geo W_geo + rho_e1 W_e1 + rho_e2 W_e2) dp[t] + alpha p[t] + X beta + eps
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .connectivity import (
    DEFAULT_CUTOFF_FACTOR,
    ConnectivityMatrix,
    build_econ,
    build_geo,
    pair_distances,
    row_standardize,
)
from .worldmodel import RHO_E1_MULTIPLIER_2100, CitySet, Grid, TradeTable

log = logging.getLogger(__name__)

COVARIATES = ("road", "ocean", "airport")
_GRID_COLUMN = {"road": "road_dens", "ocean": "ocean_dist", "airport": "airport_dist"}
COEFFICIENTS = ("intercept", "alpha", "rho_geo", "rho_e1", "rho_e2",
                "beta_road", "beta_ocean", "beta_airport")
LOG_SHIFT = 1.0
DEFAULT_R_GRID = tuple(float(r) for r in range(25, 501, 25))


class EstimationError(RuntimeError):
    pass


def workers() -> int:
    return max(1, int(os.environ.get("GRIDSSP_WORKERS", "1")))


@dataclass(frozen=True, eq=False)
class GrowthDesign:
    """Estimation arrays for the retained cities.

    ``dp_next`` is the dependent growth (t -> t+5), ``dp_log`` the lagged
    growth (t-5 -> t), ``p_log`` the log level at t and ``X`` the
    ``[1, log road, log ocean, log airport]`` design.
    """

    dp_next: np.ndarray
    dp_log: np.ndarray
    p_log: np.ndarray
    X: np.ndarray
    cities: CitySet
    years: tuple
    dropped: tuple = ()
    eps: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.dp_log)
        for a in (self.dp_next, self.p_log, self.X):
            if len(a) != n:
                raise ValueError("design members have inconsistent length")
        for a in (self.dp_next, self.dp_log, self.p_log, self.X):
            if not np.all(np.isfinite(a)):
                raise ValueError("design contains non-finite values")

    @property
    def n(self):
        return len(self.dp_log)


def covariate_matrix(grid: Grid, cell_index: np.ndarray) -> np.ndarray:
    cols = [np.ones(len(cell_index))]
    for name in COVARIATES:
        cols.append(np.log(getattr(grid, _GRID_COLUMN[name])[cell_index] + LOG_SHIFT))
    return np.column_stack(cols)


def assemble_design(cities: CitySet, grid: Grid, years: Sequence[int] = (1990, 1995, 2000)) -> GrowthDesign:
    """Build the estimation design from populations at ``years = (t-5, t, t+5)``."""
    y0, y1, y2 = years
    missing = [y for y in years if y not in cities.pop]
    if missing:
        raise ValueError(f"cities lack populations for {missing}")
    cell = grid.locate(cities.lon, cities.lat)
    keep = cell >= 0
    for y in years:
        keep &= np.isfinite(cities.pop[y]) & (cities.pop[y] > 0)
    dropped = tuple(cities.ids[~keep].tolist())
    if dropped:
        log.warning("dropping %d cities without a containing cell or populations", len(dropped))
    kept = cities.subset(keep)
    X = covariate_matrix(grid, cell[keep])
    if kept.__len__() < X.shape[1] + 10:
        raise EstimationError(f"only {len(kept)} usable cities; need at least {X.shape[1] + 10}")
    p0, p1, p2 = (kept.pop[y] for y in years)
    return GrowthDesign(
        dp_next=np.log(p2 / p1), dp_log=np.log(p1 / p0), p_log=np.log(p1), X=X,
        cities=kept, years=tuple(years), dropped=dropped,
    )


@dataclass(frozen=True)
class GrowthModelFit:
    intercept: float
    alpha: float
    rho_geo: float
    rho_e1: float
    rho_e2: float
    beta: dict
    r: float
    sigma2: float
    t_values: dict
    std_errors: dict
    r2_delta: float | None
    r2_level: float | None
    n: int
    cutoff: float | None = None
    dropped_instruments: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("range r must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")

    @property
    def stable(self) -> bool:
        return abs(self.rho_geo) + abs(self.rho_e1) + abs(self.rho_e2) < 1

    @property
    def coefficients(self) -> dict:
        return {
            "intercept": self.intercept, "alpha": self.alpha, "rho_geo": self.rho_geo,
            "rho_e1": self.rho_e1, "rho_e2": self.rho_e2,
            **{f"beta_{k}": self.beta[k] for k in COVARIATES},
        }

    @property
    def beta_vector(self) -> np.ndarray:
        """Coefficients on the ``[1, road, ocean, airport]`` design columns."""
        return np.array([self.intercept, *(self.beta[k] for k in COVARIATES)])

    def to_csv(self, path: Path | str):
        rows = [(k, v, self.t_values.get(k, np.nan)) for k, v in self.coefficients.items()]
        meta = {"r": self.r, "r2_delta": self.r2_delta, "r2_level": self.r2_level, "N": self.n,
                "cutoff": self.cutoff, "sigma2": self.sigma2, **self.metadata}
        with open(path, "w", newline="\n") as fh:
            for key, value in meta.items():
                fh.write(f"# {key}={_fmt(value)}\n")
            fh.write("coefficient,estimate,t_value\n")
            for name, est, t in rows:
                fh.write(f"{name},{_fmt(est)},{_fmt(t)}\n")

    @classmethod
    def from_csv(cls, path: Path | str) -> "GrowthModelFit":
        meta = {}
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                meta[key] = value
            else:
                body.append(line)
        est, tv = {}, {}
        for line in body[1:]:
            name, e, t = line.split(",")
            est[name], tv[name] = float(e), float(t)

        def num(key):
            v = meta.pop(key, "")
            return None if v in ("", "None", "nan") else float(v)

        r, r2d, r2l, n, cutoff, sigma2 = (num(k) for k in ("r", "r2_delta", "r2_level", "N", "cutoff", "sigma2"))
        return cls(
            intercept=est["intercept"], alpha=est["alpha"], rho_geo=est["rho_geo"],
            rho_e1=est["rho_e1"], rho_e2=est["rho_e2"],
            beta={k: est[f"beta_{k}"] for k in COVARIATES}, r=r, sigma2=sigma2 or 0.0,
            t_values=tv, std_errors={}, r2_delta=r2d, r2_level=r2l, n=int(n or 0), cutoff=cutoff,
            metadata=meta,
        )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def quasi_r2(observed, fitted, n: int, k: int, p_log=None):
    """Degrees-of-freedom adjusted R² for growth, and for the implied log level.

    ``k`` counts regressors excluding the intercept. The level statistic needs
    ``p_log`` (log population at the start of the step); it is ``None`` without it.
    Either value is ``None`` when the observed series has no variance.
    """
    observed = np.asarray(observed, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    if observed.shape != fitted.shape:
        raise ValueError("observed and fitted must have equal length")

    def adj(obs, fit):
        sst = np.sum((obs - obs.mean()) ** 2)
        if sst == 0:
            return None
        ssr = np.sum((obs - fit) ** 2)
        return float(1.0 - (ssr / (n - k - 1)) / (sst / (n - 1)))

    r2_level = None
    if p_log is not None:
        p_log = np.asarray(p_log, dtype=float)
        r2_level = adj(p_log + observed, p_log + fitted)
    return adj(observed, fitted), r2_level


def _independent_columns(Z: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Keep a linearly independent subset of columns via pivoted QR."""
    from scipy.linalg import qr

    norms = np.linalg.norm(Z, axis=0)
    norms[norms == 0] = 1.0
    _, R, piv = qr(Z / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if len(diag) else 0
    keep = np.sort(piv[:rank])
    drop = np.sort(piv[rank:])
    return keep, drop


def estimate_2sls(design: GrowthDesign, W_geo: ConnectivityMatrix | None,
                  W_e1: ConnectivityMatrix | None, W_e2: ConnectivityMatrix | None,
                  r: float | None = None) -> GrowthModelFit:
    """Spatial two-stage least squares at a fixed range.

    Passing ``None`` for every matrix fixes all rho at zero; the estimator then
    reduces to least squares on ``[p_log, X]``.
    """
    mats = {"rho_geo": W_geo, "rho_e1": W_e1, "rho_e2": W_e2}
    n = design.n
    for name, W in mats.items():
        if W is None:
            continue
        if W.n != n:
            raise ValueError(f"{name} matrix has {W.n} rows, design has {n}")
        if not W.row_standardized:
            raise ValueError(f"{name} matrix must be row-standardized")
    active = [k for k, W in mats.items() if W is not None]

    y = design.dp_next
    X = design.X
    Xv = X[:, 1:]
    lags = np.column_stack([mats[k].dot(design.dp_log) for k in active]) if active else np.zeros((n, 0))
    exog = np.column_stack([X[:, :1], design.p_log, Xv])
    H = np.column_stack([exog[:, :2], lags, exog[:, 2:]])  # intercept, alpha, rhos..., betas
    names = ["intercept", "alpha", *active, *(f"beta_{c}" for c in COVARIATES)]

    dropped_instruments = ()
    if active:
        inst = [X, design.p_log[:, None]]
        labels = [f"x{j}" for j in range(X.shape[1])] + ["p_log"]
        for k in active:
            inst.append(mats[k].dot(Xv))
            labels += [f"{k}:x{j + 1}" for j in range(Xv.shape[1])]
        if W_geo is not None:
            inst.append(W_geo.dot(W_geo.dot(Xv)))
            labels += [f"rho_geo^2:x{j + 1}" for j in range(Xv.shape[1])]
        Z = np.column_stack(inst)
        keep, drop = _independent_columns(Z)
        if len(drop):
            dropped_instruments = tuple(labels[j] for j in drop)
            log.info("dropping collinear instruments %s", ", ".join(dropped_instruments))
        Z = Z[:, keep]
        if Z.shape[1] < H.shape[1]:
            raise EstimationError(
                f"under-identified: {Z.shape[1]} independent instruments for {H.shape[1]} regressors; "
                f"instrument condition number {np.linalg.cond(Z.T @ Z):.3g}"
            )
        ZtZ = Z.T @ Z
        cond = np.linalg.cond(ZtZ)
        if not np.isfinite(cond) or cond > 1e14:
            raise EstimationError(f"singular instrument cross-product (condition number {cond:.3g})")
        first = np.linalg.solve(ZtZ, Z.T @ H)
        H_hat = Z @ first
    else:
        H_hat = H

    HtH = H_hat.T @ H_hat
    cond = np.linalg.cond(HtH)
    if not np.isfinite(cond) or cond > 1e14:
        raise EstimationError(f"singular second-stage cross-product (condition number {cond:.3g})")
    coef = np.linalg.solve(HtH, H_hat.T @ y)
    fitted = H @ coef
    resid = y - fitted
    dof = n - H.shape[1]
    sigma2 = float(resid @ resid / dof)
    cov = sigma2 * np.linalg.inv(HtH)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        tvals = coef / se

    est = dict(zip(names, coef.tolist()))
    tv = dict(zip(names, tvals.tolist()))
    ses = dict(zip(names, se.tolist()))
    for k in mats:
        est.setdefault(k, 0.0)
        tv.setdefault(k, float("nan"))
        ses.setdefault(k, float("nan"))
    r2_delta, r2_level = quasi_r2(y, fitted, n, H.shape[1] - 1, p_log=design.p_log)
    cutoff = getattr(W_geo, "cutoff", None)
    if r is None:
        r = getattr(W_geo, "r", None) or float("inf")
    return GrowthModelFit(
        intercept=est["intercept"], alpha=est["alpha"], rho_geo=est["rho_geo"],
        rho_e1=est["rho_e1"], rho_e2=est["rho_e2"],
        beta={c: est[f"beta_{c}"] for c in COVARIATES}, r=float(r), sigma2=sigma2,
        t_values=tv, std_errors=ses, r2_delta=r2_delta, r2_level=r2_level, n=n,
        cutoff=cutoff, dropped_instruments=dropped_instruments,
    )


def econ_matrices(cities: CitySet, trade: TradeTable, year: int):
    return (row_standardize(build_econ(cities, trade, "international", year)),
            row_standardize(build_econ(cities, trade, "national", year)))


def search_range(design: GrowthDesign, trade: TradeTable, r_grid: Sequence[float] = DEFAULT_R_GRID,
                 cities: CitySet | None = None, cutoff_factor: float = DEFAULT_CUTOFF_FACTOR) -> GrowthModelFit:
    """Re-estimate over candidate ranges and keep the fit with the best growth R².

    Ties go to the smaller range.
    """
    r_grid = sorted(float(r) for r in r_grid)
    if not r_grid or r_grid[0] <= 0:
        raise ValueError("r_grid must be a non-empty list of positive ranges")
    cities = design.cities if cities is None else cities
    if len(cities) != design.n:
        raise ValueError("cities do not match the design")
    year = design.years[1]
    W_e1, W_e2 = econ_matrices(cities, trade, year)
    pairs = pair_distances(cities, cutoff_factor * r_grid[-1])

    def attempt(r):
        W_geo = row_standardize(build_geo(cities, r, cutoff_factor * r, pairs=pairs))
        try:
            return estimate_2sls(design, W_geo, W_e1, W_e2, r=r)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            log.warning("estimation failed at r=%g: %s", r, exc)
            return None

    with ThreadPoolExecutor(workers()) as pool:
        fits = list(pool.map(attempt, r_grid))

    best = None
    trace = []
    for r, fit in zip(r_grid, fits):
        score = None if fit is None else fit.r2_delta
        trace.append((r, score))
        if score is not None and (best is None or score > best.r2_delta):
            best = fit
    if best is None:
        raise EstimationError("estimation failed for every candidate range")
    best.metadata["r_search"] = ";".join(f"{r:g}:{'' if s is None else format(s, '.12g')}" for r, s in trace)
    return best


def scenario_multiplier(ssp: str, year: int) -> float:
    if not 2000 <= year <= 2100:
        raise ValueError(f"year {year} outside 2000..2100")
    return 1.0 + (RHO_E1_MULTIPLIER_2100[ssp] - 1.0) * (year - 2000) / 100.0


def scenario_rho_e1(fit: GrowthModelFit, ssp: str, year: int) -> float:
    """International interaction strength for ``ssp`` in ``year`` (linear from 2000 to 2100)."""
    return scenario_multiplier(ssp, year) * fit.rho_e1


def build_matrices(cities: CitySet, trade: TradeTable, r: float, year: int,
                   cutoff_factor: float = DEFAULT_CUTOFF_FACTOR):
    W_geo = row_standardize(build_geo(cities, r, cutoff_factor * r))
    return (W_geo, *econ_matrices(cities, trade, year))


def project_cities(fit: GrowthModelFit, X: np.ndarray, pop_start: np.ndarray, dp_start: np.ndarray,
                   matrices, ssp: str, start_year: int, horizon: int, step: int = 5,
                   ids=None) -> dict[int, np.ndarray]:
    """Roll the growth model forward from ``start_year`` to ``horizon``.

    Each step feeds the previous step's predicted growth into the spatial
    lags; ``rho_e1`` follows the scenario schedule at the step's end year.
    Returns populations keyed by year, the start year included.
    """
    W_geo, W_e1, W_e2 = matrices
    if not fit.stable:
        log.warning("|rho_geo| + |rho_e1| + |rho_e2| >= 1; sequential projection may be unstable")
    pop = np.asarray(pop_start, dtype=float)
    if np.any(pop <= 0):
        raise ValueError("start populations must be positive")
    dp = np.asarray(dp_start, dtype=float)
    xb = X @ fit.beta_vector
    out = {start_year: pop.copy()}
    for year in range(start_year + step, horizon + 1, step):
        rho_e1 = scenario_rho_e1(fit, ssp, year)
        lag = np.zeros_like(dp)
        if fit.rho_geo:
            lag += fit.rho_geo * W_geo.dot(dp)
        if rho_e1:
            lag += rho_e1 * W_e1.dot(dp)
        if fit.rho_e2:
            lag += fit.rho_e2 * W_e2.dot(dp)
        dp = lag + fit.alpha * np.log(pop) + xb
        with np.errstate(over="ignore"):
            pop = pop * np.exp(dp)
        bad = ~np.isfinite(pop) | (pop <= 0)
        if bad.any():
            who = ids[np.argmax(bad)] if ids is not None else int(np.argmax(bad))
            raise FloatingPointError(f"projection of city {who} is not finite in {year}")
        out[year] = pop
    return out


def write_projection(pops: dict[int, np.ndarray], ids, path: Path | str):
    ids = np.asarray(ids)
    frames = [pd.DataFrame({"id": ids, "year": year, "pop": values}) for year, values in sorted(pops.items())]
    pd.concat(frames).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
