"""Longitudinal trial designs and treatment-indicator algebra.

A design is identified by its kind, the number of periods ``J`` and the
number of clusters allocated to each sequence.  Sequences are labelled by
the period ``z`` in which treatment starts (``z = 0`` means never treated);
for crossover designs ``z = 1`` treats the odd periods and ``z = 2`` the
even ones.  Every treatment path is derived from ``(kind, J, z)`` on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property

import numpy as np

from .errors import CollinearityError, DesignError


class DesignKind(str, Enum):
    SteppedWedge = "sw"
    ParallelBaseline = "pb"
    Crossover = "xo"

    @classmethod
    def parse(cls, value: "DesignKind | str") -> "DesignKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "sw": cls.SteppedWedge, "stepped-wedge": cls.SteppedWedge,
            "steppedwedge": cls.SteppedWedge,
            "pb": cls.ParallelBaseline, "parallel-baseline": cls.ParallelBaseline,
            "parallelbaseline": cls.ParallelBaseline,
            "xo": cls.Crossover, "crossover": cls.Crossover,
        }
        if key not in aliases:
            raise DesignError(f"unknown design kind {value!r}")
        return aliases[key]


class Structure(str, Enum):
    """Working treatment-effect structure of a fixed-effects model."""

    Constant = "constant"
    DurationSpecific = "duration"
    PeriodSpecific = "period"
    Saturated = "saturated"

    @classmethod
    def parse(cls, value: "Structure | str") -> "Structure":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "constant": cls.Constant, "c": cls.Constant,
            "duration": cls.DurationSpecific, "duration-specific": cls.DurationSpecific,
            "d": cls.DurationSpecific,
            "period": cls.PeriodSpecific, "period-specific": cls.PeriodSpecific,
            "p": cls.PeriodSpecific,
            "saturated": cls.Saturated, "s": cls.Saturated,
        }
        if key not in aliases:
            raise DesignError(f"unknown treatment structure {value!r}")
        return aliases[key]


def _check_kind_J(kind: DesignKind, J: int) -> None:
    if not isinstance(J, (int, np.integer)) or J < 2:
        raise DesignError(f"J must be an integer >= 2, got {J!r}")
    if kind is DesignKind.SteppedWedge and J < 3:
        raise DesignError(f"stepped-wedge designs need J >= 3, got J={J}")
    if kind is DesignKind.Crossover and J % 2 != 0:
        raise DesignError(f"crossover designs need an even J, got J={J}")


def sequence_set(kind: DesignKind | str, J: int) -> tuple[int, ...]:
    """Initial-treatment periods of a complete design."""
    kind = DesignKind.parse(kind)
    _check_kind_J(kind, J)
    if kind is DesignKind.SteppedWedge:
        return tuple(range(2, J + 1))
    if kind is DesignKind.ParallelBaseline:
        return (0, 2)
    return (1, 2)


def exposure_duration(kind: DesignKind | str, j: int, z: int, J: int | None = None) -> int:
    """Number of periods cluster sequence ``z`` has been exposed by period ``j``.

    Returns 0 when the sequence is untreated in period ``j``.  ``J`` is only
    used for range checking and may be omitted.
    """
    kind = DesignKind.parse(kind)
    if j < 1 or (J is not None and j > J):
        raise DesignError(f"period index j={j} outside 1..{J if J is not None else 'J'}")
    if kind is DesignKind.SteppedWedge:
        if z == 0:
            return 0
        if z < 2 or (J is not None and z > J):
            raise DesignError(f"stepped-wedge sequence z={z} is not a valid start period")
        return j - z + 1 if z <= j else 0
    if kind is DesignKind.ParallelBaseline:
        if z not in (0, 2):
            raise DesignError(f"parallel-with-baseline sequence must be 0 or 2, got z={z}")
        return j - 1 if (z == 2 and j >= 2) else 0
    if z not in (1, 2):
        raise DesignError(f"crossover sequence must be 1 or 2, got z={z}")
    if z == 1 and j % 2 == 1:
        return (j + 1) // 2
    if z == 2 and j % 2 == 0:
        return j // 2
    return 0


@dataclass(frozen=True)
class TrialDesign:
    """A complete, equal-allocation longitudinal cluster trial design."""

    kind: DesignKind
    J: int
    clusters_per_sequence: int = 1
    sequences: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        kind = DesignKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        _check_kind_J(kind, self.J)
        object.__setattr__(self, "J", int(self.J))
        if int(self.clusters_per_sequence) < 1:
            raise DesignError("clusters_per_sequence must be >= 1")
        object.__setattr__(self, "clusters_per_sequence", int(self.clusters_per_sequence))
        object.__setattr__(self, "sequences", sequence_set(kind, self.J))

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_dict(cls, spec: dict) -> "TrialDesign":
        try:
            return cls(DesignKind.parse(spec["kind"]), int(spec["J"]),
                       int(spec.get("clusters_per_sequence", 1)))
        except KeyError as exc:
            raise DesignError(f"design specification lacks field {exc.args[0]!r}") from None

    @classmethod
    def from_json(cls, text: str) -> "TrialDesign":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "J": self.J,
                "clusters_per_sequence": self.clusters_per_sequence}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    # -- basic quantities -----------------------------------------------------
    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    @property
    def m(self) -> int:
        """Total number of clusters implied by the allocation."""
        return self.n_sequences * self.clusters_per_sequence

    def allocation(self) -> np.ndarray:
        """Sequence label of each cluster in canonical (sorted) order."""
        return np.repeat(np.asarray(self.sequences), self.clusters_per_sequence)

    def check_sequence(self, z: int) -> None:
        if z not in self.sequences:
            raise DesignError(f"sequence z={z} is not part of the {self.kind.value} design "
                              f"with J={self.J} (valid: {list(self.sequences)})")

    def duration(self, j: int, z: int) -> int:
        self.check_sequence(z)
        return exposure_duration(self.kind, j, z, self.J)

    def treated(self, j: int, z: int) -> bool:
        return self.duration(j, z) > 0

    @property
    def n_durations(self) -> int:
        if self.kind is DesignKind.Crossover:
            return (2 * self.J + 1 - (-1) ** self.J) // 4
        return self.J - 1

    # -- matrices -------------------------------------------------------------
    def delta_matrix(self, z: int) -> np.ndarray:
        """Diagonal matrix of treatment indicators over the J periods."""
        return np.diag([1.0 if self.treated(j, z) else 0.0 for j in range(1, self.J + 1)])

    def lambda_matrix(self, z: int, d: int) -> np.ndarray:
        """Diagonal indicator of having exposure duration exactly ``d``."""
        return np.diag([1.0 if self.duration(j, z) == d else 0.0
                        for j in range(1, self.J + 1)])

    def h_matrix(self, z: int) -> np.ndarray:
        """J x D matrix whose (j, d) entry flags exposure duration d in period j."""
        H = np.zeros((self.J, self.n_durations))
        for j in range(1, self.J + 1):
            d = self.duration(j, z)
            if d > 0:
                H[j - 1, d - 1] = 1.0
        return H

    def mean_h_matrix(self) -> np.ndarray:
        """Design average of H_Z over the (equally allocated) sequences."""
        return np.mean([self.h_matrix(z) for z in self.sequences], axis=0)

    def treated_share(self, exact: bool = False):
        shares = [Fraction(sum(self.treated(j, z) for z in self.sequences), self.n_sequences)
                  for j in range(1, self.J + 1)]
        return shares if exact else np.array([float(s) for s in shares])

    # -- structures -------------------------------------------------------------
    def analysis_periods(self, structure: Structure | str) -> tuple[int, ...]:
        """Periods entering a fixed-effects fit under ``structure``.

        Stepped-wedge period-specific and saturated fits drop the final,
        all-treated period because its effect is not separable from the
        period effect.
        """
        structure = Structure.parse(structure)
        self.check_structure(structure)
        if (self.kind is DesignKind.SteppedWedge
                and structure in (Structure.PeriodSpecific, Structure.Saturated)):
            return tuple(range(1, self.J))
        return tuple(range(1, self.J + 1))

    def check_structure(self, structure: Structure | str) -> None:
        structure = Structure.parse(structure)
        if (self.kind is DesignKind.Crossover
                and structure in (Structure.PeriodSpecific, Structure.Saturated)):
            raise CollinearityError(
                f"{structure.value} treatment effects are collinear with period and cluster "
                "effects in a crossover design; use constant or duration", columns=[])

    def treatment_cells(self, structure: Structure | str) -> list:
        """Labels of the treatment coefficients, in coefficient order.

        Constant -> ``["Z"]``; duration -> d values; period -> j values;
        saturated -> ``(j, d)`` pairs ordered by j, then d.
        """
        structure = Structure.parse(structure)
        self.check_structure(structure)
        if structure is Structure.Constant:
            return ["Z"]
        if structure is Structure.DurationSpecific:
            return list(range(1, self.n_durations + 1))
        periods = self.analysis_periods(structure)
        cells = sorted({(j, self.duration(j, z)) for z in self.sequences for j in periods
                        if self.duration(j, z) > 0})
        if structure is Structure.PeriodSpecific:
            return sorted({j for j, _ in cells})
        return cells

    def structure_dim(self, structure: Structure | str) -> int:
        return len(self.treatment_cells(structure))

    def treatment_indicator_row(self, structure: Structure | str, j: int, z: int) -> np.ndarray:
        """Row of the treatment coefficient block for sequence z in period j."""
        structure = Structure.parse(structure)
        cells = self.treatment_cells(structure)
        if j not in self.analysis_periods(structure):
            raise DesignError(f"period j={j} is excluded from {structure.value} fits "
                              f"of a {self.kind.value} design with J={self.J}")
        d = self.duration(j, z)
        row = np.zeros(len(cells))
        if d == 0:
            return row
        key = {Structure.Constant: "Z", Structure.DurationSpecific: d,
               Structure.PeriodSpecific: j, Structure.Saturated: (j, d)}[structure]
        row[cells.index(key)] = 1.0
        return row

    def treatment_table(self, structure: Structure | str) -> dict[int, np.ndarray]:
        """Map z -> (len(analysis_periods) x dim) block of indicator rows."""
        structure = Structure.parse(structure)
        periods = self.analysis_periods(structure)
        return {z: np.vstack([self.treatment_indicator_row(structure, j, z) for j in periods])
                for z in self.sequences}

    @cached_property
    def _tilting(self) -> tuple[Fraction, ...]:
        return tuple(p * (1 - p) for p in self.treated_share(exact=True))

    def tilting_weights(self, exact: bool = False):
        return tilting_weights(self, exact=exact)


def tilting_weights(design: TrialDesign, exact: bool = False):
    """Overlap weights lambda_j = pi_j (1 - pi_j) for each of the J periods.

    ``pi_j`` is the share of sequences treated in period j.  With
    ``exact=True`` the weights are returned as :class:`fractions.Fraction`.
    """
    lam = design._tilting
    if exact:
        return list(lam)
    return np.array([float(x) for x in lam])


def duration_weight_blocks(design: TrialDesign, z: int, sizes) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster duration weights for the duration-specific g-computation.

    Parameters
    ----------
    design : TrialDesign
    z : int
        Sequence of the cluster.
    sizes : array_like, length J
        Observed cluster-period sizes N_ij.

    Returns
    -------
    lam : ndarray, shape (D, D, J)
        ``lam[d-1]`` is the D x J matrix lambda_i(d) whose (d', j) entry is
        ``(H_Z - E[H_Z])[j, d'] * N_ij * 1{duration(j, z) = d}``.
    A : ndarray, shape (D, J, D)
        ``A[d-1]`` is J x D with its d-th column equal to one.
    """
    sizes = np.asarray(sizes, dtype=float)
    if sizes.shape != (design.J,):
        raise DesignError(f"sizes must have length J={design.J}, got shape {sizes.shape}")
    D = design.n_durations
    Hc = design.h_matrix(z) - design.mean_h_matrix()
    lam = np.zeros((D, D, design.J))
    for d in range(1, D + 1):
        ind = np.diag(design.lambda_matrix(z, d))
        lam[d - 1] = (Hc * (sizes * ind)[:, None]).T
    A = np.zeros((D, design.J, D))
    for d in range(D):
        A[d, :, d] = 1.0
    return lam, A
