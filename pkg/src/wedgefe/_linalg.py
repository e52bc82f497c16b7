"""Small numerical helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import CollinearityError

RANK_TOL = 1e-10
ZERO_COL_TOL = 1e-9


def group_sums(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` within contiguous groups delimited by ``offsets``."""
    starts = offsets[:-1]
    if values.shape[0] == 0:
        return np.zeros((len(starts),) + values.shape[1:])
    out = np.add.reduceat(values, starts, axis=0)
    empty = offsets[1:] == starts
    if np.any(empty):
        out[empty] = 0.0
    return out


def identify_columns(Qc: np.ndarray, Q: np.ndarray, names: list[str],
                     protected: tuple[int, ...] = ()) -> tuple[np.ndarray, list[str]]:
    """Pick the estimable columns of a within-centered design.

    Columns whose centered version vanishes (effects absorbed by the cluster
    intercepts) are dropped and reported.  Any further dependence is an
    error, raised with the names of the offending columns.  Returns the kept
    column indices and the names of the dropped columns.
    """
    k = Qc.shape[1]
    raw = np.linalg.norm(Q, axis=0)
    cen = np.linalg.norm(Qc, axis=0)
    zero = cen <= ZERO_COL_TOL * np.maximum(raw, 1.0)
    bad_zero = [names[c] for c in protected if zero[c]]
    if bad_zero:
        raise CollinearityError(
            f"columns {bad_zero} have no within-cluster variation", columns=bad_zero)
    cand = np.flatnonzero(~zero)
    dropped = [names[c] for c in np.flatnonzero(zero)]
    if cand.size == 0:
        return cand, dropped
    R = linalg.qr(Qc[:, cand], mode="r", pivoting=True)
    R, piv = R[0], R[1]
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0])) if diag.size else 0
    if rank < cand.size:
        dep = [names[cand[p]] for p in piv[rank:]]
        raise CollinearityError(
            f"design columns {dep} are linearly dependent on the remaining columns "
            "after removing cluster intercepts", columns=dep)
    return cand, dropped


def solve_psd(A: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve A x = b for symmetric positive definite A, refusing near-singular A."""
    try:
        c, low = linalg.cho_factor(A)
    except linalg.LinAlgError:
        raise CollinearityError(f"{what} is singular") from None
    d = np.diag(c) ** 2
    if d.min() <= 1e-13 * d.max():
        raise CollinearityError(f"{what} is numerically singular "
                                f"(condition ~ {d.max() / max(d.min(), 1e-300):.3g})")
    return linalg.cho_solve((c, low), b)
