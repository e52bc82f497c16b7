"""Long-format trial data container and CSV input/output."""

from __future__ import annotations

import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .design import Structure, TrialDesign
from .errors import DataError, DesignError

DEFAULT_SCHEMA = {"cluster": "cluster", "period": "period", "outcome": "y",
                  "individual": "individual", "sequence": "sequence",
                  "treatment": "treatment"}


@dataclass(frozen=True)
class ClusterBlock:
    """Rows of one cluster, sorted by (period, individual)."""

    cluster_id: int
    z: int
    periods: np.ndarray
    y: np.ndarray
    Q: np.ndarray
    sizes: np.ndarray
    columns: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class TrialData:
    """Observations of a longitudinal cluster trial, stored column-wise.

    Rows are held sorted by (cluster, period, individual).  ``sequence_of``
    maps each cluster id to its initial-treatment period.
    """

    design: TrialDesign
    cluster: np.ndarray
    period: np.ndarray
    individual: np.ndarray
    y: np.ndarray
    X: np.ndarray
    sequence_of: Mapping[int, int]
    covariate_names: tuple[str, ...] = ()
    notes: tuple[str, ...] = field(default=())

    # ------------------------------------------------------------------ build
    @classmethod
    def from_arrays(cls, design: TrialDesign, cluster, period, y, X=None, *,
                    sequence_of: Mapping[int, int], individual=None,
                    covariate_names: Sequence[str] | None = None,
                    assume_sorted: bool = False) -> "TrialData":
        cluster = np.asarray(cluster, dtype=np.int64)
        period = np.asarray(period, dtype=np.int64)
        y = np.asarray(y, dtype=float)
        n = cluster.shape[0]
        if period.shape != (n,) or y.shape != (n,):
            raise DataError("cluster, period and outcome arrays must share one length")
        if X is None:
            X = np.zeros((n, 0))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise DataError("covariate matrix has the wrong number of rows")
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(X.shape[1]))
        covariate_names = tuple(covariate_names)
        if len(covariate_names) != X.shape[1]:
            raise DataError("covariate_names does not match the covariate columns")

        if individual is None:
            individual = _within_cell_index(cluster, period)
        individual = np.asarray(individual, dtype=np.int64)

        bad = np.flatnonzero((period < 1) | (period > design.J))
        if bad.size:
            raise DataError(f"period {period[bad[0]]} outside 1..{design.J}",
                            row=int(bad[0]) + 1)
        bad = np.flatnonzero(~np.isfinite(y))
        if bad.size:
            raise DataError("outcome is missing or not finite", row=int(bad[0]) + 1)
        if X.size and not np.all(np.isfinite(X)):
            r = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise DataError("covariate is missing or not finite", row=r + 1)

        seq = {int(k): int(v) for k, v in sequence_of.items()}
        present = np.unique(cluster)
        for c in present:
            if int(c) not in seq:
                r = int(np.flatnonzero(cluster == c)[0])
                raise DataError(f"cluster {c} has no sequence assignment", row=r + 1)
            try:
                design.check_sequence(seq[int(c)])
            except DesignError as exc:
                r = int(np.flatnonzero(cluster == c)[0])
                raise DataError(f"cluster {c}: {exc}", row=r + 1) from None
        notes = []
        empty = sorted(set(seq) - set(int(c) for c in present))
        for c in empty:
            notes.append(f"cluster {c} has no enrolled observations and was dropped")
            warnings.warn(notes[-1], stacklevel=2)
            del seq[c]

        if not assume_sorted:
            order = np.lexsort((individual, period, cluster))
            if not np.all(order == np.arange(n)):
                cluster, period, individual = cluster[order], period[order], individual[order]
                y, X = y[order], X[order]
        return cls(design, cluster, period, individual, y, X, seq, covariate_names, tuple(notes))

    # ------------------------------------------------------------ properties
    @property
    def n(self) -> int:
        return int(self.cluster.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def cluster_ids(self) -> np.ndarray:
        return self._groups[0]

    @property
    def m(self) -> int:
        return int(self.cluster_ids.shape[0])

    @property
    def cluster_index(self) -> np.ndarray:
        """Position (0..m-1) of each row's cluster in ``cluster_ids``."""
        return self._groups[1]

    @property
    def offsets(self) -> np.ndarray:
        """Row offsets delimiting clusters; cluster k spans offsets[k]:offsets[k+1]."""
        return self._groups[2]

    @property
    def _groups(self):
        cache = self.__dict__.get("_group_cache")
        if cache is None:
            ids, start, counts = np.unique(self.cluster, return_index=True, return_counts=True)
            idx = np.repeat(np.arange(ids.shape[0]), counts)
            offsets = np.append(start, self.n)
            cache = (ids, idx, offsets)
            object.__setattr__(self, "_group_cache", cache)
        return cache

    @property
    def z(self) -> np.ndarray:
        """Sequence of each cluster, aligned with ``cluster_ids``."""
        return np.array([self.sequence_of[int(c)] for c in self.cluster_ids], dtype=np.int64)

    def sizes(self) -> np.ndarray:
        """m x J matrix of cluster-period sizes N_ij."""
        N = np.zeros((self.m, self.design.J))
        np.add.at(N, (self.cluster_index, self.period - 1), 1.0)
        return N

    def cluster_totals(self) -> np.ndarray:
        return np.diff(self.offsets).astype(float)

    # ------------------------------------------------------------ transforms
    def subset(self, mask: np.ndarray) -> "TrialData":
        mask = np.asarray(mask, dtype=bool)
        keep = set(int(c) for c in np.unique(self.cluster[mask]))
        seq = {c: z for c, z in self.sequence_of.items() if c in keep}
        return TrialData(self.design, self.cluster[mask], self.period[mask],
                         self.individual[mask], self.y[mask], self.X[mask], seq,
                         self.covariate_names, self.notes)

    def drop_cluster(self, cluster_id: int) -> "TrialData":
        if int(cluster_id) not in self.sequence_of:
            raise DataError(f"unknown cluster {cluster_id}")
        return self.subset(self.cluster != cluster_id)

    def with_outcome(self, y) -> "TrialData":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DataError("replacement outcome has the wrong length")
        return TrialData(self.design, self.cluster, self.period, self.individual, y, self.X,
                         self.sequence_of, self.covariate_names, self.notes)

    def select_covariates(self, names: Sequence[str]) -> "TrialData":
        idx = [self.covariate_names.index(n) for n in names]
        return TrialData(self.design, self.cluster, self.period, self.individual, self.y,
                         self.X[:, idx], self.sequence_of, tuple(names), self.notes)

    def treatment_block(self, structure: Structure | str) -> np.ndarray:
        """n x dim treatment-indicator rows for every observation."""
        structure = Structure.parse(structure)
        periods = self.design.analysis_periods(structure)
        pos = np.full(self.design.J + 1, -1)
        pos[list(periods)] = np.arange(len(periods))
        if np.any(pos[self.period] < 0):
            missing = sorted(set(self.period[pos[self.period] < 0].tolist()))
            raise DataError(f"periods {missing} must be dropped before a {structure.value} fit")
        table = self.design.treatment_table(structure)
        zs = self.z[self.cluster_index]
        out = np.zeros((self.n, self.design.structure_dim(structure)))
        for z, block in table.items():
            rows = zs == z
            out[rows] = block[pos[self.period[rows]]]
        return out

    def design_matrix(self, structure: Structure | str) -> tuple[np.ndarray, list[str]]:
        """Model rows Q: period indicators (reference = first analysis period),
        the treatment block and the covariates, with column labels."""
        structure = Structure.parse(structure)
        periods = self.design.analysis_periods(structure)
        P = (self.period[:, None] == np.asarray(periods[1:])[None, :]).astype(float)
        T = self.treatment_block(structure)
        cells = self.design.treatment_cells(structure)
        names = ([f"period{j}" for j in periods[1:]] + [_cell_name(structure, c) for c in cells]
                 + list(self.covariate_names))
        return np.hstack([P, T, self.X]), names

    def cluster_view(self, cluster_id: int, structure: Structure | str = Structure.Constant
                     ) -> ClusterBlock:
        """Ordered per-cluster block of outcomes, model rows and period sizes."""
        hits = np.flatnonzero(self.cluster_ids == cluster_id)
        if hits.size == 0:
            raise DataError(f"unknown cluster {cluster_id}")
        k = int(hits[0])
        sl = slice(self.offsets[k], self.offsets[k + 1])
        Q, names = self.design_matrix(structure)
        return ClusterBlock(int(cluster_id), int(self.sequence_of[int(cluster_id)]),
                            self.period[sl].copy(), self.y[sl].copy(), Q[sl].copy(),
                            self.sizes()[k], tuple(names))

    def __len__(self) -> int:
        return self.n


def _cell_name(structure: Structure, cell) -> str:
    if structure is Structure.Constant:
        return "Z"
    if structure is Structure.DurationSpecific:
        return f"Z_d{cell}"
    if structure is Structure.PeriodSpecific:
        return f"Z_j{cell}"
    return f"Z_j{cell[0]}_d{cell[1]}"


def _within_cell_index(cluster: np.ndarray, period: np.ndarray) -> np.ndarray:
    """Running count of rows within each (cluster, period) cell, in input order."""
    n = cluster.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), period, cluster))
    c, p = cluster[order], period[order]
    new = np.ones(n, dtype=bool)
    new[1:] = (c[1:] != c[:-1]) | (p[1:] != p[:-1])
    starts = np.flatnonzero(new)
    run = np.arange(n) - np.repeat(starts, np.diff(np.append(starts, n)))
    out = np.empty(n, dtype=np.int64)
    out[order] = run + 1
    return out


def drop_period(data: TrialData, j: int) -> TrialData:
    """Remove every observation of period ``j``."""
    if j < 1 or j > data.design.J or not np.any(data.period == j):
        raise DataError(f"period {j} is not present in the data")
    mask = data.period != j
    kept = np.bincount(data.cluster_index[mask], minlength=data.m)
    if np.any(kept == 0):
        c = int(data.cluster_ids[np.flatnonzero(kept == 0)[0]])
        raise DataError(f"dropping period {j} would leave cluster {c} without observations")
    return data.subset(mask)


def restrict_to_structure(data: TrialData, structure: Structure | str) -> TrialData:
    """Drop periods that a ``structure`` fit excludes (final SW period for P/S)."""
    periods = data.design.analysis_periods(structure)
    out = data
    for j in range(1, data.design.J + 1):
        if j not in periods and np.any(out.period == j):
            out = drop_period(out, j)
    return out


def _infer_sequences(design: TrialDesign, cluster: np.ndarray, period: np.ndarray,
                     treat: np.ndarray) -> dict[int, int]:
    seq = {}
    for c in np.unique(cluster):
        rows = cluster == c
        pattern = {}
        for j, t in zip(period[rows], treat[rows]):
            if pattern.setdefault(int(j), int(t)) != int(t):
                r = int(np.flatnonzero(rows & (period == j) & (treat != pattern[int(j)]))[0])
                raise DataError(f"cluster {c} has mixed treatment within period {j}", row=r + 1)
        matches = [z for z in design.sequences
                   if all(design.treated(j, z) == bool(t) for j, t in pattern.items())]
        if len(matches) != 1:
            r = int(np.flatnonzero(rows)[0])
            raise DataError(f"treatment path of cluster {c} does not identify a unique "
                            f"{design.kind.value} sequence", row=r + 1)
        seq[int(c)] = matches[0]
    return seq


def load_csv(path: str | Path, design: TrialDesign, schema: Mapping[str, str] | None = None,
             covariates: Sequence[str] | None = None) -> TrialData:
    """Read and validate a long-format CSV file.

    Required columns are the cluster, period and outcome columns named in
    ``schema``.  The sequence of each cluster is taken from the sequence
    column if present, otherwise inferred from a 0/1 treatment column.
    Covariates default to every column named ``x1``, ``x2``, ... .
    Row numbers in error messages count data rows from 1.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"could not parse {path}: {exc}") from None
    frame.columns = [c.strip() for c in frame.columns]
    for key in ("cluster", "period", "outcome"):
        if schema[key] not in frame.columns:
            raise DataError(f"missing required column {schema[key]!r}")
    if covariates is None:
        covariates = sorted((c for c in frame.columns
                             if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    for c in covariates:
        if c not in frame.columns:
            raise DataError(f"missing covariate column {c!r}")

    def numeric(col: str, integer: bool = False) -> np.ndarray:
        text = frame[col].str.strip()
        values = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if not bad.size:
            # pandas' parser is not correctly rounded; numpy's is
            values = np.asarray(text.to_numpy(dtype=str), dtype=float)
        if bad.size:
            raise DataError(f"non-numeric or missing value {frame[col].iloc[bad[0]]!r} in "
                            f"column {col!r}", row=int(bad[0]) + 1)
        if integer:
            frac = np.flatnonzero(values != np.round(values))
            if frac.size:
                raise DataError(f"column {col!r} must hold integers", row=int(frac[0]) + 1)
            return values.astype(np.int64)
        return values

    cluster = numeric(schema["cluster"], integer=True)
    period = numeric(schema["period"], integer=True)
    y = numeric(schema["outcome"])
    bad = np.flatnonzero((period < 1) | (period > design.J))
    if bad.size:
        raise DataError(f"period {period[bad[0]]} outside 1..{design.J}", row=int(bad[0]) + 1)
    X = np.column_stack([numeric(c) for c in covariates]) if covariates else None
    individual = (numeric(schema["individual"], integer=True)
                  if schema["individual"] in frame.columns else None)

    if schema["sequence"] in frame.columns:
        zcol = numeric(schema["sequence"], integer=True)
        seq: dict[int, int] = {}
        for r, (c, z) in enumerate(zip(cluster, zcol)):
            if seq.setdefault(int(c), int(z)) != int(z):
                raise DataError(f"cluster {c} is listed with two sequences", row=r + 1)
            if z not in design.sequences:
                raise DataError(f"cluster {c}: sequence {z} is not part of the "
                                f"{design.kind.value} design (valid: {list(design.sequences)})",
                                row=r + 1)
    elif schema["treatment"] in frame.columns:
        seq = _infer_sequences(design, cluster, period, numeric(schema["treatment"], integer=True))
    else:
        raise DataError(f"need either a {schema['sequence']!r} or a {schema['treatment']!r} "
                        "column to determine cluster sequences")
    return TrialData.from_arrays(design, cluster, period, y, X, sequence_of=seq,
                                 individual=individual, covariate_names=covariates)


def write_csv(data: TrialData, path: str | Path | None = None) -> str:
    """Write ``data`` in the format accepted by :func:`load_csv`.

    Returns the CSV text; also writes it when ``path`` is given.
    """
    frame = pd.DataFrame({"cluster": data.cluster, "period": data.period,
                          "individual": data.individual,
                          "sequence": data.z[data.cluster_index], "y": data.y})
    for k, name in enumerate(data.covariate_names):
        frame[name] = data.X[:, k]
    text = frame.to_csv(index=False, lineterminator="\n", float_format="%.17g")
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def validation_report(data: TrialData) -> dict:
    N = data.sizes()
    return {
        "schema_version": 1,
        "design": data.design.to_dict(),
        "n_observations": data.n,
        "n_clusters": data.m,
        "covariates": list(data.covariate_names),
        "clusters": [{"cluster": int(c), "sequence": int(z), "sizes": N[k].astype(int).tolist()}
                     for k, (c, z) in enumerate(zip(data.cluster_ids, data.z))],
        "notes": list(data.notes),
    }


__all__ = ["TrialData", "ClusterBlock", "load_csv", "write_csv", "drop_period",
           "restrict_to_structure", "validation_report"]
