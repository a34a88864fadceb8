"""Urban and agricultural area trajectories driven by potential-field changes."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .potential import PotentialCalibration


def step_area(prev, q_t, q_next, bq: float) -> np.ndarray:
    """Area after one step: previous area plus ``bq`` times the potential change, floored at 0."""
    delta = (np.asarray(q_next, dtype=float) - np.asarray(q_t, dtype=float)) * bq
    return np.maximum(0.0, np.asarray(prev, dtype=float) + delta)


def enforce_capacity(urban, agri, cell_area, return_flags: bool = False):
    """Trim agricultural area (then urban area) so that the two fit in the cell.

    The result satisfies ``urban + agri <= cell_area`` exactly in floating point.
    """
    urban = np.array(urban, dtype=float, copy=True)
    agri = np.array(agri, dtype=float, copy=True)
    cell_area = np.broadcast_to(np.asarray(cell_area, dtype=float), urban.shape)
    if np.any(urban < 0) or np.any(agri < 0):
        raise ValueError("areas must be non-negative")
    urban_capped = urban > cell_area
    urban[urban_capped] = cell_area[urban_capped]
    over = urban + agri > cell_area
    agri[over] = np.maximum(0.0, cell_area[over] - urban[over])
    # rounding in (cell - urban) + urban can land one ulp above cell
    bad = urban + agri > cell_area
    while bad.any():
        agri[bad] = np.maximum(0.0, np.nextafter(agri[bad], -np.inf))
        bad = urban + agri > cell_area
    if return_flags:
        return urban, agri, urban_capped
    return urban, agri


@dataclass
class AreaTrajectory:
    baseline_year: int
    urban: dict = field(default_factory=dict)
    agri: dict = field(default_factory=dict)
    capped_cells: dict = field(default_factory=dict)

    @property
    def years(self) -> list[int]:
        return sorted(self.urban)

    def to_csv(self, ids, path: Path | str, years=None):
        ids = np.asarray(ids)
        years = self.years if years is None else years
        frames = [pd.DataFrame({"grid_id": ids, "year": y, "urban_area": self.urban[y], "agri_area": self.agri[y]})
                  for y in years]
        pd.concat(frames).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Path | str, ids, baseline_year: int) -> "AreaTrajectory":
        df = pd.read_csv(path, dtype={"grid_id": str})
        traj = cls(baseline_year)
        ids = np.asarray(ids).astype(str)
        for year, sub in df.groupby("year"):
            sub = sub.set_index("grid_id").reindex(ids)
            traj.urban[int(year)] = sub["urban_area"].to_numpy(dtype=float)
            traj.agri[int(year)] = sub["agri_area"].to_numpy(dtype=float)
        return traj


def project_areas(urban0, agri0, cell_area, potentials: Mapping[str, Mapping[int, np.ndarray]],
                  calibrations: Mapping[str, PotentialCalibration], baseline_year: int, horizon: int,
                  step: int = 5) -> AreaTrajectory:
    """Apply the urban and agricultural area steps from ``baseline_year`` to ``horizon``.

    ``potentials[variant][year]`` holds the potential field evaluated under the
    scenario's range for that variant.
    """
    traj = AreaTrajectory(baseline_year)
    urban, agri = enforce_capacity(urban0, agri0, cell_area)
    traj.urban[baseline_year], traj.agri[baseline_year] = urban, agri
    for year in range(baseline_year + step, horizon + 1, step):
        for variant in ("urban", "agri"):
            for y in (year - step, year):
                if y not in potentials[variant]:
                    raise KeyError(f"missing {variant} potential for {y}")
        qu, qa = potentials["urban"], potentials["agri"]
        urban = step_area(urban, qu[year - step], qu[year], calibrations["urban"].bq)
        agri = step_area(agri, qa[year - step], qa[year], calibrations["agri"].bq)
        urban, agri, capped = enforce_capacity(urban, agri, cell_area, return_flags=True)
        traj.urban[year], traj.agri[year] = urban, agri
        if capped.any():
            traj.capped_cells[year] = np.flatnonzero(capped)
    return traj
