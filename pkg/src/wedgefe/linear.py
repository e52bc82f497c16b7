"""Linear fixed-effects estimation through the within-cluster transformation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._linalg import group_sums, identify_columns, solve_psd
from .data import ClusterBlock, TrialData, restrict_to_structure
from .design import Structure
from .errors import CollinearityError, DegenerateClusterError


@dataclass(frozen=True)
class WithinTransform:
    """Cluster-centered outcome and design rows of one cluster."""

    y: np.ndarray
    Q: np.ndarray


def within_transform(block: ClusterBlock | tuple[np.ndarray, np.ndarray]) -> WithinTransform:
    """Subtract the cluster mean (over enrolled rows) from outcome and design."""
    if isinstance(block, ClusterBlock):
        y, Q = block.y, block.Q
    else:
        y, Q = block
    y = np.asarray(y, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if y.shape[0] < 2:
        raise DegenerateClusterError(
            f"cluster has {y.shape[0]} enrolled rows; at least 2 are needed for centering")
    return WithinTransform(y - y.mean(), Q - Q.mean(axis=0))


def _center(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(offsets).astype(float)
    means = group_sums(values, offsets) / counts.reshape((-1,) + (1,) * (values.ndim - 1))
    return values - np.repeat(means, np.diff(offsets), axis=0)


@dataclass(frozen=True, eq=False)
class LinearFitResult:
    """Within-transformed OLS fit.

    ``beta`` and the per-cluster arrays cover the estimable columns listed
    in ``names``; absorbed columns are reported in ``dropped``.
    """

    structure: Structure
    names: list[str]
    beta: np.ndarray
    alpha: np.ndarray
    residuals: np.ndarray
    per_cluster_score: np.ndarray
    bread: np.ndarray
    cluster_ids: np.ndarray
    treatment_index: np.ndarray
    cells: list
    dropped: list[str] = field(default_factory=list)
    gram_blocks: np.ndarray | None = field(default=None, repr=False)
    cross_blocks: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return int(self.cluster_ids.shape[0])

    @property
    def beta_z(self) -> np.ndarray:
        return self.beta[self.treatment_index]

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def normal_equations(self) -> np.ndarray:
        return self.per_cluster_score.sum(axis=0)

    def leave_one_out(self) -> np.ndarray:
        """Coefficients refit without each cluster in turn (m x k).

        The within transformation acts cluster by cluster, so deleting a
        cluster just removes its Gram and cross-product contributions; the
        refit below is an exact re-estimation of every coefficient.
        """
        G = self.gram_blocks.sum(axis=0)
        b = self.cross_blocks.sum(axis=0)
        out = np.empty((self.m, self.beta.shape[0]))
        for i in range(self.m):
            try:
                out[i] = solve_psd(G - self.gram_blocks[i], b - self.cross_blocks[i],
                                   what="leave-one-out normal matrix")
            except CollinearityError as exc:
                raise CollinearityError(
                    f"refit without cluster {self.cluster_ids[i]} is not identified: {exc}",
                    columns=exc.columns) from None
        return out


def fit_linear_fe(data: TrialData, structure: Structure | str = Structure.Constant
                  ) -> LinearFitResult:
    """Fit the linear fixed-effects model by OLS on within-transformed data.

    Stepped-wedge period-specific and saturated fits drop the final period
    first.  The period-1 indicator is the reference and never enters.
    """
    structure = Structure.parse(structure)
    data.design.check_structure(structure)
    data = restrict_to_structure(data, structure)
    counts = data.cluster_totals()
    if np.any(counts < 2):
        c = int(data.cluster_ids[np.flatnonzero(counts < 2)[0]])
        raise DegenerateClusterError(f"cluster {c} has fewer than 2 enrolled rows")

    Q, names = data.design_matrix(structure)
    n_period = len(data.design.analysis_periods(structure)) - 1
    n_trt = data.design.structure_dim(structure)
    offsets = data.offsets
    Qc = _center(Q, offsets)
    yc = _center(data.y, offsets)
    trt_cols = tuple(range(n_period, n_period + n_trt))
    keep, dropped = identify_columns(Qc, Q, names, protected=trt_cols)
    Qk = Qc[:, keep]

    qmat, rmat, piv = linalg.qr(Qk, mode="economic", pivoting=True)
    coef = np.empty(keep.size)
    coef[piv] = linalg.solve_triangular(rmat, qmat.T @ yc)

    resid_c = yc - Qk @ coef
    m = data.m
    gram = np.einsum("ni,nj->nij", Qk, Qk)
    gram_blocks = group_sums(gram, offsets)
    cross_blocks = group_sums(Qk * yc[:, None], offsets)
    score = group_sums(Qk * resid_c[:, None], offsets)
    bread = gram_blocks.sum(axis=0) / m

    raw_resid = data.y - Q[:, keep] @ coef
    alpha = group_sums(raw_resid, offsets) / counts
    residuals = raw_resid - np.repeat(alpha, np.diff(offsets))
    kept_names = [names[c] for c in keep]
    tidx = np.array([k for k, c in enumerate(keep) if c in trt_cols], dtype=int)
    return LinearFitResult(structure, kept_names, coef, alpha, residuals, score, bread,
                           data.cluster_ids.copy(), tidx,
                           data.design.treatment_cells(structure), dropped,
                           gram_blocks, cross_blocks)


def fit_dummy_ols(data: TrialData, structure: Structure | str = Structure.Constant
                  ) -> tuple[np.ndarray, list[str]]:
    """Reference OLS with one explicit intercept column per cluster.

    Only the structural coefficients are returned.  Used to cross-check the
    within estimator; absorbed time-invariant covariates are removed first
    in the same way, since with explicit dummies they are not estimable.
    """
    structure = Structure.parse(structure)
    data = restrict_to_structure(data, structure)
    Q, names = data.design_matrix(structure)
    Qc = _center(Q, data.offsets)
    n_period = len(data.design.analysis_periods(structure)) - 1
    n_trt = data.design.structure_dim(structure)
    keep, _ = identify_columns(Qc, Q, names,
                               protected=tuple(range(n_period, n_period + n_trt)))
    D = (data.cluster_index[:, None] == np.arange(data.m)[None, :]).astype(float)
    full = np.hstack([Q[:, keep], D])
    sol, *_ = linalg.lstsq(full, data.y, lapack_driver="gelsy")
    return sol[:keep.size], [names[c] for c in keep]


@dataclass(frozen=True)
class PeriodAverage:
    estimate: float
    contrast: np.ndarray
    full_contrast: np.ndarray
    label: str


def average_contrast(structure: Structure, n_cells: int) -> tuple[np.ndarray, str]:
    if structure is Structure.Constant:
        raise ValueError("a constant structure has a single effect; no average is defined")
    label = {Structure.DurationSpecific: "D-avg", Structure.PeriodSpecific: "P-avg",
             Structure.Saturated: "S-avg"}[structure]
    return np.full(n_cells, 1.0 / n_cells), label


def period_average(fit: LinearFitResult, structure: Structure | str | None = None
                   ) -> PeriodAverage:
    """Equal-weight average of the identified treatment coefficients."""
    structure = fit.structure if structure is None else Structure.parse(structure)
    if structure is not fit.structure:
        raise ValueError("structure does not match the fit")
    c, label = average_contrast(structure, fit.treatment_index.size)
    full = np.zeros(fit.beta.shape[0])
    full[fit.treatment_index] = c
    return PeriodAverage(float(full @ fit.beta), c, full, label)
