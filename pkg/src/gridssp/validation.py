"""Concentration, scatter and mass-balance diagnostics for downscaled grids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def gini(values) -> float:
    """Gini concentration of non-negative values (0 = uniform)."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if np.any(x < 0):
        raise ValueError("gini expects non-negative values")
    n = len(x)
    total = x.sum()
    if n == 0 or total == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.sum(ranks * x) / (n * total) - (n + 1.0) / n)


def lorenz(values) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative population share and cumulative value share, both starting at 0."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    cum = np.concatenate([[0.0], np.cumsum(x)])
    share = cum / cum[-1] if cum[-1] > 0 else cum
    return np.linspace(0.0, 1.0, len(cum)), share


def log_scatter(predicted, reference) -> dict:
    """R² and RMSE of log values over cells where both grids are positive."""
    pred = np.asarray(predicted, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError("grids must align")
    mask = (ref > 0) & (pred > 0)
    if not mask.any():
        raise ValueError("no overlapping positive cells between prediction and reference")
    lp, lr = np.log(pred[mask]), np.log(ref[mask])
    resid = lr - lp
    sst = np.sum((lr - lr.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / sst if sst > 0 else (1.0 if np.all(resid == 0) else float("nan"))
    return {"r2": float(r2), "rmse": float(np.sqrt(np.mean(resid**2))),
            "n": int(mask.sum()), "excluded": int((ref > 0).sum() - mask.sum())}


def mass_balance(values, country_index, totals) -> np.ndarray:
    """Relative residual ``(sum_g y - Y_C) / Y_C`` per country (absolute when Y_C = 0)."""
    sums = np.bincount(country_index, weights=np.asarray(values, dtype=float), minlength=len(totals))
    totals = np.asarray(totals, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(totals > 0, (sums - totals) / totals, sums - totals)


def ordered(values, strict: bool = False) -> bool:
    """True when ``values`` is non-increasing (strictly decreasing with ``strict``)."""
    v = np.asarray(values, dtype=float)
    d = np.diff(v)
    return bool(np.all(d < 0) if strict else np.all(d <= 0))


@dataclass
class ValidationReport:
    mass_balance: dict = field(default_factory=dict)    # (target, ssp) -> max |relative residual|
    scatter: dict = field(default_factory=dict)         # target -> log_scatter result
    gini: dict = field(default_factory=dict)            # (quantity, ssp, year) -> gini
    verdicts: dict = field(default_factory=dict)        # name -> bool
    recovery: dict = field(default_factory=dict)        # parameter -> (estimate, truth, delta)
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "verdicts": dict(sorted(self.verdicts.items())),
            "mass_balance": {f"{t}/{s}": v for (t, s), v in sorted(self.mass_balance.items())},
            "scatter": dict(sorted(self.scatter.items())),
            "gini": {f"{q}/{s}/{y}": v for (q, s, y), v in sorted(self.gini.items())},
            "recovery": dict(sorted(self.recovery.items())),
        }
