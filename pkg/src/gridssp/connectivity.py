"""Geographic and trade-based connectivity matrices between cities.

The geographic kernel is stored as a CSR matrix truncated at a distance
cutoff. The trade matrices are never materialised: every entry factors as
``s_c * s_c' * M[C, C']`` with ``s`` the within-country population share, so
products with a vector reduce to country-level sums.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .worldmodel import CitySet, TradeTable, arc_to_chord, chord_to_arc, unit_vectors

log = logging.getLogger(__name__)

DEFAULT_CUTOFF_FACTOR = 5.0


class ConnectivityMatrix:
    """Non-negative n x n weights with zero diagonal.

    ``kind`` is ``"geo"``, ``"econ_international"`` or ``"econ_national"``.
    """

    kind: str
    n: int
    row_standardized: bool

    def dot(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_sparse(self) -> sp.csr_matrix:
        raise NotImplementedError

    def _scaled(self, scale: np.ndarray) -> "ConnectivityMatrix":
        raise NotImplementedError

    def row_sums(self) -> np.ndarray:
        return self.dot(np.ones(self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def __matmul__(self, v):
        return self.dot(np.asarray(v, dtype=float))


@dataclass(frozen=True, eq=False)
class SparseConnectivity(ConnectivityMatrix):
    matrix: sp.csr_matrix
    kind: str = "geo"
    r: float | None = None
    cutoff: float | None = None
    row_standardized: bool = False

    @property
    def n(self):
        return self.matrix.shape[0]

    def dot(self, v):
        return self.matrix @ v

    def to_sparse(self):
        return self.matrix

    def _scaled(self, scale):
        return replace(self, matrix=sp.diags(scale).dot(self.matrix).tocsr(), row_standardized=True)


@dataclass(frozen=True, eq=False)
class TradeConnectivity(ConnectivityMatrix):
    """Weights ``scale_c * s_c * s_c' * M[C(c), C(c')]`` for c != c'."""

    share: np.ndarray          # city population / country population
    country_index: np.ndarray  # position of each city's country in ``countries``
    countries: tuple
    M: np.ndarray              # country-level weights, masked to the mode
    kind: str = "econ_international"
    scale: np.ndarray | None = None
    row_standardized: bool = False

    @property
    def n(self):
        return len(self.share)

    @property
    def _indicator(self) -> sp.csr_matrix:
        # n x n_countries, entry s_c in column C(c)
        return sp.csr_matrix(
            (self.share, (np.arange(self.n), self.country_index)), shape=(self.n, len(self.countries))
        )

    def dot(self, v):
        v = np.asarray(v, dtype=float)
        vec = v.ndim == 1
        V = v[:, None] if vec else v
        s = self.share[:, None]
        country_sum = self._indicator.T @ V          # sum_{c' in C'} s_c' v_c'
        out = s * (self.M @ country_sum)[self.country_index]
        out -= (s**2) * self.M[self.country_index, self.country_index][:, None] * V
        if self.scale is not None:
            out *= self.scale[:, None]
        return out[:, 0] if vec else out

    def to_sparse(self):
        s = self.share
        ci = self.country_index
        rows, cols, vals = [], [], []
        for a in range(len(self.countries)):
            ia = np.flatnonzero(ci == a)
            for b in range(len(self.countries)):
                if self.M[a, b] == 0:
                    continue
                ib = np.flatnonzero(ci == b)
                block = np.outer(s[ia], s[ib]) * self.M[a, b]
                rr, cc = np.meshgrid(ia, ib, indexing="ij")
                keep = rr != cc
                rows.append(rr[keep]); cols.append(cc[keep]); vals.append(block[keep])
        if rows:
            rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
        m = sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        if self.scale is not None:
            m = sp.diags(self.scale).dot(m).tocsr()
        return m

    def _scaled(self, scale):
        base = np.ones(self.n) if self.scale is None else self.scale
        return replace(self, scale=base * scale, row_standardized=True)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PairDistances:
    """City pairs (i != j) within ``max_km`` of each other, with arc distances."""

    n: int
    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    max_km: float


def pair_distances(cities: CitySet, max_km: float) -> PairDistances:
    xyz = unit_vectors(cities.lon, cities.lat)
    tree = cKDTree(xyz)
    coo = tree.sparse_distance_matrix(tree, float(arc_to_chord(max_km)), output_type="coo_matrix")
    # sparse_distance_matrix may drop exact zeros; co-located distinct cities come back via query_pairs
    i, j, chord = coo.row, coo.col, coo.data
    same = tree.query_pairs(1e-12, output_type="ndarray")
    if len(same):
        i = np.concatenate([i, same[:, 0], same[:, 1]])
        j = np.concatenate([j, same[:, 1], same[:, 0]])
        chord = np.concatenate([chord, np.zeros(2 * len(same))])
    keep = i != j
    i, j, chord = i[keep], j[keep], chord[keep]
    # some scipy versions keep explicit zeros; drop the duplicates
    order = np.lexsort((chord, j, i))
    i, j, chord = i[order], j[order], chord[order]
    first = np.ones(len(i), dtype=bool)
    first[1:] = (i[1:] != i[:-1]) | (j[1:] != j[:-1])
    return PairDistances(len(cities), i[first].astype(np.int64), j[first].astype(np.int64),
                         chord_to_arc(chord[first]), float(max_km))


def build_geo(cities: CitySet, r: float, cutoff: float | None = None,
              pairs: PairDistances | None = None) -> SparseConnectivity:
    """Raw exponential kernel ``exp(-d / r)`` truncated at ``cutoff`` km (default 5r)."""
    if not r > 0:
        raise ValueError(f"range r must be positive, got {r}")
    cutoff = DEFAULT_CUTOFF_FACTOR * r if cutoff is None else cutoff
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    if pairs is None or pairs.max_km < cutoff:
        pairs = pair_distances(cities, cutoff)
    within = pairs.d <= cutoff
    m = sp.csr_matrix(
        (np.exp(-pairs.d[within] / r), (pairs.i[within], pairs.j[within])), shape=(pairs.n, pairs.n)
    )
    return SparseConnectivity(m, kind="geo", r=float(r), cutoff=float(cutoff))


def country_populations(cities: CitySet, year: int) -> dict[str, float]:
    pop = cities.pop[year]
    codes, inverse = np.unique(cities.country.astype(str), return_inverse=True)
    totals = np.bincount(inverse, weights=pop)
    return dict(zip(codes.tolist(), totals.tolist()))


def trade_estimate(cities: CitySet, c: int, c2: int, trade: TradeTable, year: int) -> float:
    """Trade attributed to a city pair by splitting the country flow on population shares."""
    totals = country_populations(cities, year)
    a, b = str(cities.country[c]), str(cities.country[c2])
    if not (totals.get(a, 0) > 0 and totals.get(b, 0) > 0):
        raise ValueError(f"zero population for country {a if not totals.get(a, 0) > 0 else b}")
    pop = cities.pop[year]
    return float(pop[c] / totals[a] * pop[c2] / totals[b] * trade(a, b))


def build_econ(cities: CitySet, trade: TradeTable, mode: str, year: int) -> TradeConnectivity:
    """Raw trade-split weights; ``mode`` keeps cross-country or same-country pairs."""
    if mode not in ("international", "national"):
        raise ValueError(f"mode must be 'international' or 'national', got {mode!r}")
    codes, cidx = np.unique(cities.country.astype(str), return_inverse=True)
    pop = cities.pop[year]
    country_pop = np.bincount(cidx, weights=pop, minlength=len(codes))
    if np.any(country_pop <= 0):
        raise ValueError(f"zero population for country {codes[np.argmin(country_pop)]}")
    amount, present = trade.matrix(codes.tolist())
    if mode == "international":
        M = amount.copy()
        np.fill_diagonal(M, 0.0)
    else:
        diag = np.diag(amount).copy()
        lacking = ~np.diag(present)
        if lacking.any():
            # population-product weights P_c P_c' = P_C^2 s_c s_c'
            diag[lacking] = country_pop[lacking] ** 2
            log.info("intra-country trade missing for %d countries; using population products", lacking.sum())
        M = np.diag(diag)
    return TradeConnectivity(
        share=pop / country_pop[cidx], country_index=cidx, countries=tuple(codes.tolist()),
        M=M, kind=f"econ_{mode}",
    )


def row_standardize(m: ConnectivityMatrix) -> ConnectivityMatrix:
    """Divide each row by its sum; all-zero rows stay zero."""
    sums = m.row_sums()
    if np.any(sums < 0):
        raise ValueError("row_standardize expects non-negative weights")
    scale = np.zeros_like(sums)
    nz = sums > 0
    scale[nz] = 1.0 / sums[nz]
    return m._scaled(scale)


def write_matrix(m: ConnectivityMatrix, ids, path: Path | str):
    coo = m.to_sparse().tocoo()
    order = np.lexsort((coo.col, coo.row))
    ids = np.asarray(ids)
    pd.DataFrame({
        "row_id": ids[coo.row[order]], "col_id": ids[coo.col[order]], "weight": coo.data[order],
    }).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
