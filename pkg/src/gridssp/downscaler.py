"""Ensemble dasymetric downscaling of country totals to grid cells.

Each sub-model distributes a country total in proportion to
``sqrt(a_tilde * a_k)``, where ``a_tilde`` is the scenario land weight for the
target and ``a_k = offset * control``. The ensemble is a convex combination of
sub-model fields whose weights are fitted by stage-wise boosting against a
base-year reference grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .worldmodel import Grid, GridField

log = logging.getLogger(__name__)

TARGETS = ("urban_pop", "nonurban_pop", "gdp")
CONTROLS = ("constant", "road", "airport", "ocean")
OFFSETS = {
    "urban_pop": ("urban_area", "urban_pop_grid", "potential"),
    "nonurban_pop": ("agri_area", "urban_pop_grid", "potential"),
    "gdp": ("uagri_area", "urban_pop_grid", "potential", "ssp_pop"),
}
LAND_WEIGHT = {"urban_pop": "urban_area", "nonurban_pop": "agri_area", "gdp": "uagri_area"}


class DownscaleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SubModel:
    target: str
    offset: str
    control: str
    k: int

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.offset not in OFFSETS[self.target] or self.control not in CONTROLS:
            raise ValueError(f"invalid sub-model ({self.offset}, {self.control}) for {self.target}")

    @property
    def label(self) -> str:
        return f"{self.offset}x{self.control}"


def submodels(target: str) -> list[SubModel]:
    """Offset-major list of sub-models, ``k`` counted from 1."""
    combos = [(o, c) for o in OFFSETS[target] for c in CONTROLS]
    return [SubModel(target, o, c, k) for k, (o, c) in enumerate(combos, start=1)]


@dataclass(frozen=True, eq=False)
class YearInputs:
    """Cell-level inputs for one scenario year, aligned with the grid."""

    urban_area: np.ndarray
    agri_area: np.ndarray
    urban_pop_grid: np.ndarray
    potential: np.ndarray
    ssp_pop: np.ndarray | None = None

    def offset(self, name: str) -> np.ndarray:
        if name == "uagri_area":
            return self.urban_area + self.agri_area
        value = getattr(self, name)
        if value is None:
            raise DownscaleError(f"offset {name} is not available (population downscale missing)")
        return value


def control_values(grid: Grid, control: str) -> np.ndarray:
    if control == "constant":
        return np.ones(len(grid))
    if control == "road":
        return np.asarray(grid.road_dens, dtype=float)
    if control == "airport":
        return 1.0 / (1.0 + grid.airport_dist)
    if control == "ocean":
        return 1.0 / (1.0 + grid.ocean_dist)
    raise ValueError(f"unknown control {control!r}")


def auxiliary_value(grid: Grid, submodel: SubModel, inputs: YearInputs) -> np.ndarray:
    """``a_k`` for every cell: offset value times control value."""
    return inputs.offset(submodel.offset) * control_values(grid, submodel.control)


class CountryIndex:
    """Cell-to-country mapping with the totals vector aligned to ``codes``."""

    def __init__(self, cell_country: Sequence[str]):
        codes, inverse = np.unique(np.asarray(cell_country).astype(str), return_inverse=True)
        self.codes = codes.tolist()
        self.index = inverse
        self.counts = np.bincount(inverse, minlength=len(codes))

    def totals_vector(self, totals: Mapping[str, float]) -> np.ndarray:
        extra = sorted(set(totals) - set(self.codes))
        if extra:
            raise DownscaleError(f"countries without grid cells: {extra[:5]}")
        return np.array([float(totals.get(c, 0.0)) for c in self.codes])

    def sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.index, weights=values, minlength=len(self.codes))


def dasymetric_share(countries: CountryIndex, a_tilde, a_k, totals: Mapping[str, float] | np.ndarray) -> np.ndarray:
    """Distribute each country total over its cells in proportion to ``sqrt(a_tilde * a_k)``.

    A country whose weights are all zero falls back to a uniform split.
    """
    Y = totals if isinstance(totals, np.ndarray) else countries.totals_vector(totals)
    w = np.sqrt(np.asarray(a_tilde, dtype=float) * np.asarray(a_k, dtype=float))
    denom = countries.sums(w)
    empty = denom <= 0
    if empty.any():
        needs = empty & (Y > 0)
        if needs.any():
            log.warning("all-zero weights in %d countries; distributing uniformly",
                        int(needs.sum()))
        w = np.where(empty[countries.index], 1.0, w)
        denom = np.where(empty, countries.counts, denom)
    return w / denom[countries.index] * Y[countries.index]


def submodel_fields(target: str, grid: Grid, countries: CountryIndex, inputs: YearInputs,
                    totals: Mapping[str, float]) -> np.ndarray:
    """All sub-model fields for ``target``, shape (cells, K)."""
    Y = countries.totals_vector(totals)
    a_tilde = inputs.offset(LAND_WEIGHT[target])
    cols = [dasymetric_share(countries, a_tilde, auxiliary_value(grid, m, inputs), Y) for m in submodels(target)]
    return np.column_stack(cols)


@dataclass
class DownscaleEnsemble:
    target: str
    submodels: list
    weights: np.ndarray
    raw_coefficients: np.ndarray
    loss_trace: list
    learning_rate: float
    iterations: int
    importance_by_year: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("ensemble weights must lie on the simplex")
        self.weights = w

    def to_csv(self, path: Path | str):
        pd.DataFrame({
            "k": [m.k for m in self.submodels],
            "offset": [m.offset for m in self.submodels],
            "control": [m.control for m in self.submodels],
            "omega": self.weights,
        }).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Path | str, target: str) -> "DownscaleEnsemble":
        df = pd.read_csv(path).sort_values("k")
        models = [SubModel(target, o, c, int(k)) for k, o, c in df[["k", "offset", "control"]].itertuples(index=False)]
        w = df["omega"].to_numpy(dtype=float)
        w = w / w.sum()
        return cls(target, models, w, w.copy(), [], float("nan"), 0)


def _simplex(coef: np.ndarray) -> np.ndarray:
    c = np.clip(coef, 0.0, None)
    total = c.sum()
    if total <= 0:
        raise DownscaleError("boosting produced no positive coefficients")
    w = c / total
    # absorb rounding so the weights sum to one
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def fit_weights(fields: np.ndarray, observed, target: str = "urban_pop", models: Sequence[SubModel] | None = None,
                learning_rate: float = 1.0, iterations: int = 200) -> DownscaleEnsemble:
    """Stage-wise least-squares boosting of sub-model fields onto the observed grid.

    Each iteration takes the least-squares step along every field, shrinks it
    by ``learning_rate`` and limits it so the accumulated coefficient stays
    non-negative (a step may take back weight given earlier). The field whose
    step most reduces the residual sum of squares is updated. The coefficients
    are finally renormalised onto the simplex, which preserves country totals.
    """
    F = np.asarray(fields, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    y = np.asarray(observed, dtype=float)
    if len(y) != F.shape[0]:
        raise ValueError("observed grid must align with the sub-model fields")
    models = list(models) if models is not None else submodels(target)
    if len(models) != F.shape[1]:
        raise ValueError(f"{F.shape[1]} fields for {len(models)} sub-models")
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must be in (0, 1]")

    norms = np.einsum("ij,ij->j", F, F)
    coef = np.zeros(F.shape[1])
    resid = y.copy()
    loss = [float(resid @ resid)]
    for it in range(iterations):
        proj = F.T @ resid
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(norms > 0, proj / norms, 0.0)
        step = np.maximum(learning_rate * gamma, -coef)
        gain = 2.0 * step * proj - step**2 * norms
        k = int(np.argmax(gain))
        if gain[k] <= 0:
            if it == 0:
                raise DownscaleError("no sub-model reduces the training loss")
            break
        coef[k] = max(coef[k] + step[k], 0.0)
        resid -= step[k] * F[:, k]
        loss.append(float(resid @ resid))
    return DownscaleEnsemble(target, models, _simplex(coef), coef, loss, learning_rate, iterations)


def downscale(ensemble: DownscaleEnsemble, fields: np.ndarray, year: int = 0) -> GridField:
    F = np.asarray(fields, dtype=float)
    if F.shape[1] != len(ensemble.weights):
        raise ValueError("fields do not match the ensemble")
    return GridField(np.maximum(F @ ensemble.weights, 0.0), year, ensemble.target)


def importance_shares(ensemble: DownscaleEnsemble, fields: np.ndarray) -> np.ndarray:
    """Global share of the downscaled mass attributable to each sub-model."""
    mass = ensemble.weights * np.asarray(fields, dtype=float).sum(axis=0)
    total = mass.sum()
    if total <= 0:
        return ensemble.weights.copy()
    return mass / total


def control_shares(ensemble: DownscaleEnsemble, shares: np.ndarray) -> dict[str, float]:
    """Shares aggregated over sub-models sharing a control variable."""
    out = dict.fromkeys(CONTROLS, 0.0)
    for m, s in zip(ensemble.submodels, shares):
        out[m.control] += float(s)
    return out


def downscale_gdp_chain(urban_pop, nonurban_pop, gdp_ensemble: DownscaleEnsemble, grid: Grid,
                        countries: CountryIndex, inputs: YearInputs, totals: Mapping[str, float],
                        year: int = 0) -> GridField:
    """GDP downscale using the summed downscaled populations as the ``ssp_pop`` offset."""
    if urban_pop is None or nonurban_pop is None:
        raise DownscaleError("population downscales must precede the GDP downscale")
    pop = np.asarray(getattr(urban_pop, "values", urban_pop)) + np.asarray(getattr(nonurban_pop, "values", nonurban_pop))
    chained = YearInputs(inputs.urban_area, inputs.agri_area, inputs.urban_pop_grid, inputs.potential, pop)
    F = submodel_fields("gdp", grid, countries, chained, totals)
    return downscale(gdp_ensemble, F, year)


def write_importance(ensemble: DownscaleEnsemble, shares: np.ndarray, path: Path | str):
    pd.DataFrame({
        "k": [m.k for m in ensemble.submodels],
        "offset": [m.offset for m in ensemble.submodels],
        "control": [m.control for m in ensemble.submodels],
        "share": shares,
    }).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
