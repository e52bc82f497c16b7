"""Log-link fixed-effects fits and g-computation.

The cluster intercepts are profiled out in closed form,

    alpha_i(beta) = log(sum_k Y_ik) - log(sum_k exp(Q_ik beta)),

so the Newton iterations only run over the structural coefficients.  The
resulting score is the conditional (multinomial) Poisson score, under which
each cluster's fitted means sum to its observed total at every iterate.

Internally, rows sharing a cluster and an identical model row are merged
into one weighted row.  All sums are unchanged by the merge; it only makes
repeated refits (jackknife, simulation studies) cheaper.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse

from ._linalg import group_sums, identify_columns
from .data import TrialData, restrict_to_structure
from .design import Structure, tilting_weights, duration_weight_blocks
from .errors import CollinearityError, ConvergenceError, DataError, SeparationError

MAX_ITERS = 100
GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_HALVINGS = 30
DIVERGENCE_BOUND = 30.0
SEPARATION_SCREEN = 10.0


# ---------------------------------------------------------------------------
# compressed likelihood problem
# ---------------------------------------------------------------------------
def _merge_rows(key: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group identical rows; returns the first row of each group (in sorted
    key order, so the leading cluster column stays sorted) and the group of
    every row."""
    code = np.zeros(key.shape[0], dtype=np.int64)
    radix = 1
    for col in key.T[::-1]:
        _, c = np.unique(col, return_inverse=True)
        width = int(c.max()) + 1 if c.size else 1
        if radix > np.iinfo(np.int64).max // max(width, 1):
            _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
            return first, inv.ravel()
        code += c.ravel().astype(np.int64) * radix
        radix *= width
    _, first, inv = np.unique(code, return_index=True, return_inverse=True)
    return first, inv.ravel()


class _Problem:
    """Weighted, cluster-sorted rows of the concentrated Poisson likelihood."""

    def __init__(self, Q, w, ys, cidx, m):
        self.Q = Q
        self.w = w
        self.ys = ys
        self.cidx = cidx
        self.m = m
        counts = np.bincount(cidx, minlength=m)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.Y = np.bincount(cidx, weights=ys, minlength=m)

    @classmethod
    def build(cls, Qk: np.ndarray, y: np.ndarray, cidx: np.ndarray, m: int) -> "_Problem":
        first, inv = _merge_rows(np.column_stack([cidx.astype(float), Qk]))
        w = np.bincount(inv, minlength=first.size).astype(float)
        ys = np.bincount(inv, weights=y, minlength=first.size)
        return cls(Qk[first], w, ys, cidx[first].astype(np.int64), m)

    def without(self, i: int) -> "_Problem":
        keep = self.cidx != i
        cidx = self.cidx[keep]
        cidx = cidx - (cidx > i)
        return _Problem(self.Q[keep], self.w[keep], self.ys[keep], cidx, self.m - 1)

    def profile(self, beta: np.ndarray):
        """Per-row relative exponentials and per-cluster log normalizers."""
        eta = self.Q @ beta
        cmax = np.full(self.m, -np.inf)
        starts = self.offsets[:-1]
        nonempty = self.offsets[1:] > starts
        if self.Q.shape[0]:
            cmax[nonempty] = np.maximum.reduceat(eta, starts[nonempty])
        cmax = np.where(np.isfinite(cmax), cmax, 0.0)
        e = self.w * np.exp(eta - cmax[self.cidx])
        S = np.bincount(self.cidx, weights=e, minlength=self.m)
        with np.errstate(divide="ignore"):
            logS = np.log(S) + cmax
        return eta, e, S, logS

    def alpha(self, beta: np.ndarray) -> np.ndarray:
        _, _, _, logS = self.profile(beta)
        with np.errstate(divide="ignore"):
            return np.where(self.Y > 0, np.log(self.Y) - logS, -np.inf)

    def evaluate(self, beta: np.ndarray, hessian: bool = True):
        eta, e, S, logS = self.profile(beta)
        active = self.Y > 0
        ll = float(self.ys @ eta - np.sum(self.Y[active] * logS[active]))
        ratio = np.where(S > 0, self.Y / np.where(S > 0, S, 1.0), 0.0)
        mu = e * ratio[self.cidx]
        grad = self.Q.T @ (self.ys - mu)
        if not hessian:
            return ll, grad, None, mu
        Mq = group_sums(mu[:, None] * self.Q, self.offsets)
        inv = np.where(active, 1.0 / np.where(active, self.Y, 1.0), 0.0)
        H = (self.Q * mu[:, None]).T @ self.Q - (Mq * inv[:, None]).T @ Mq
        return ll, grad, H, mu

    def newton(self, beta0: np.ndarray, max_iters: int = MAX_ITERS):
        beta = np.array(beta0, dtype=float)
        ll, grad, H, _ = self.evaluate(beta)
        for it in range(1, max_iters + 1):
            gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
            if gnorm < GRAD_TOL:
                return beta, it - 1, gnorm
            try:
                step = linalg.solve(H, grad, assume_a="sym")
            except linalg.LinAlgError:
                raise ConvergenceError("singular information matrix during Newton iterations",
                                       grad_norm=gnorm) from None
            t = 1.0
            slack = 1e-12 * max(1.0, abs(ll))
            for _ in range(MAX_HALVINGS + 1):
                cand = beta + t * step
                ll_new, grad_new, H_new, _ = self.evaluate(cand)
                if np.isfinite(ll_new) and ll_new >= ll - slack:
                    break
                t *= 0.5
            else:
                raise ConvergenceError("step halving failed to improve the concentrated "
                                       f"likelihood (gradient norm {gnorm:.3g})", grad_norm=gnorm)
            beta, ll, grad, H = cand, ll_new, grad_new, H_new
            if np.max(np.abs(beta)) > DIVERGENCE_BOUND:
                raise SeparationError(
                    "coefficients diverge; some indicator cell has no events "
                    f"(max |beta| = {np.max(np.abs(beta)):.3g})", grad_norm=gnorm)
            if float(np.max(np.abs(t * step))) < STEP_TOL:
                gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
                return beta, it, gnorm
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        raise ConvergenceError(f"no convergence after {max_iters} Newton iterations "
                               f"(gradient norm {gnorm:.3g})", grad_norm=gnorm)


@dataclass(frozen=True, eq=False)
class PoissonFitResult:
    """Concentrated conditional-Poisson fixed-effects fit."""

    structure: Structure
    names: list[str]
    beta: np.ndarray
    alpha: np.ndarray
    fitted_means: np.ndarray
    per_cluster_score: np.ndarray
    bread: np.ndarray
    newton_iters: int
    converged: bool
    grad_norm: float
    cluster_ids: np.ndarray
    treatment_index: np.ndarray
    period_index: dict
    covariate_index: np.ndarray
    cells: list
    data: TrialData = field(repr=False)
    excluded: list[int] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    problem: _Problem | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return int(self.cluster_ids.shape[0])

    @property
    def beta_z(self) -> np.ndarray:
        return self.beta[self.treatment_index]

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def leave_one_out_beta(self, i: int) -> np.ndarray:
        """Structural coefficients refit without cluster position ``i``."""
        sub = self.problem.without(i)
        beta, _, _ = sub.newton(self.beta)
        return beta


def _check_separation(problem: _Problem, names: list[str], cols: list[int]) -> None:
    active = problem.Y[problem.cidx] > 0
    for c in cols:
        col = problem.Q[:, c]
        if not np.all((col == 0) | (col == 1)):
            continue
        sel = active & (col == 1)
        if sel.any() and problem.ys[sel].sum() == 0:
            raise SeparationError(f"no events in rows with {names[c]} = 1; its coefficient "
                                  "diverges to -infinity")
        # Clusters holding the indicator's rows: if none of their events fall
        # outside those rows, shifting their intercepts down and the
        # coefficient up increases the likelihood without bound.
        owners = np.zeros(problem.m, dtype=bool)
        owners[problem.cidx[sel]] = True
        rest = owners[problem.cidx] & (col == 0)
        if rest.any() and problem.ys[rest].sum() == 0:
            raise SeparationError(f"every event of the clusters with {names[c]} = 1 occurs in "
                                  "those rows; its coefficient diverges to +infinity")


def _separation_direction(problem: _Problem) -> np.ndarray | None:
    """Direction in coefficient space along which the likelihood keeps rising.

    The Poisson MLE fails to exist exactly when some direction v (over the
    structural coefficients and the cluster intercepts) leaves every row
    with events unchanged and lowers at least one zero row, with no row
    raised.  Found by a linear program; returns the coefficient part of v,
    or None when the MLE exists.
    """
    active = np.flatnonzero(problem.Y > 0)
    use = np.isin(problem.cidx, active)
    remap = np.full(problem.m, -1)
    remap[active] = np.arange(active.size)
    Q = sparse.csr_matrix(problem.Q[use])
    n = Q.shape[0]
    D = sparse.csr_matrix((np.ones(n), (np.arange(n), remap[problem.cidx[use]])),
                          shape=(n, active.size))
    X = sparse.hstack([Q, D], format="csr")
    pos = problem.ys[use] > 0
    if pos.all():
        return None
    X0, X1 = X[~pos], X[pos]
    c = np.asarray(X0.sum(axis=0)).ravel()
    res = optimize.linprog(c, A_ub=sparse.vstack([X0, -X0], format="csr"),
                           b_ub=np.concatenate([np.zeros(X0.shape[0]), np.ones(X0.shape[0])]),
                           A_eq=X1 if X1.shape[0] else None,
                           b_eq=np.zeros(X1.shape[0]) if X1.shape[0] else None,
                           bounds=(None, None), method="highs")
    if res.status != 0 or res.fun > -1e-7:
        return None
    return res.x[:problem.Q.shape[1]]


def fit_poisson_fe(data: TrialData, structure: Structure | str = Structure.Constant, *,
                   max_iters: int = MAX_ITERS) -> PoissonFitResult:
    """Fit the log-link fixed-effects model by concentrated Newton iterations."""
    structure = Structure.parse(structure)
    data.design.check_structure(structure)
    data = restrict_to_structure(data, structure)
    if np.any(data.y < 0):
        r = int(np.flatnonzero(data.y < 0)[0])
        raise DataError("log-link fits need nonnegative outcomes", row=r)

    Q, names = data.design_matrix(structure)
    periods = data.design.analysis_periods(structure)
    n_period = len(periods) - 1
    n_trt = data.design.structure_dim(structure)
    offsets = data.offsets
    counts = np.diff(offsets).astype(float)
    means = group_sums(Q, offsets) / counts[:, None]
    Qc = Q - np.repeat(means, np.diff(offsets), axis=0)
    trt_cols = tuple(range(n_period, n_period + n_trt))
    keep, dropped = identify_columns(Qc, Q, names, protected=trt_cols)
    Qk = Q[:, keep]
    kept_names = [names[c] for c in keep]

    problem = _Problem.build(Qk, data.y, data.cluster_index, data.m)
    excluded = [int(data.cluster_ids[i]) for i in np.flatnonzero(problem.Y == 0)]
    if excluded:
        warnings.warn(f"clusters {excluded} have no events and carry no information for the "
                      "log-link fit; they are excluded from estimation", stacklevel=2)
    if len(excluded) == data.m:
        raise DataError("every cluster has an all-zero outcome")
    indicator_cols = [k for k, c in enumerate(keep) if c < n_period + n_trt]
    _check_separation(problem, kept_names, indicator_cols)

    beta, iters, gnorm = problem.newton(np.zeros(keep.size), max_iters=max_iters)
    if beta.size and np.max(np.abs(beta)) > SEPARATION_SCREEN:
        v = _separation_direction(problem)
        if v is not None:
            cols = [kept_names[k] for k in np.flatnonzero(np.abs(v) > 1e-6 * np.max(np.abs(v)))]
            raise SeparationError(f"the log-link MLE does not exist: coefficients {cols} "
                                  "diverge (some cells have no events)", grad_norm=gnorm)
    _, grad, H, mu_c = problem.evaluate(beta)
    alpha = problem.alpha(beta)
    with np.errstate(invalid="ignore"):
        fitted = np.exp(alpha[data.cluster_index] + Qk @ beta)
    fitted = np.where(np.isfinite(fitted), fitted, 0.0)
    score = group_sums(problem.Q * (problem.ys - mu_c)[:, None], problem.offsets)

    tidx = np.array([k for k, c in enumerate(keep) if c in trt_cols], dtype=int)
    pidx = {}
    for k, c in enumerate(keep):
        if c < n_period:
            pidx[periods[c + 1]] = k
    cidx = np.array([k for k, c in enumerate(keep) if c >= n_period + n_trt], dtype=int)
    return PoissonFitResult(structure, kept_names, beta, alpha, fitted, score, H / data.m,
                            iters, True, gnorm, data.cluster_ids.copy(), tidx, pidx, cidx,
                            data.design.treatment_cells(structure), data, excluded, dropped,
                            problem)


def fit_dummy_poisson(data: TrialData, structure: Structure | str = Structure.Constant,
                      tol: float = 1e-12, max_iters: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Unconditional Poisson MLE with one explicit intercept per cluster.

    Plain Newton-Raphson over all (m + k) parameters, no profiling.  Kept
    deliberately separate from :func:`fit_poisson_fe` as a reference.
    Returns the structural coefficients and the cluster intercepts.
    """
    structure = Structure.parse(structure)
    data = restrict_to_structure(data, structure)
    Q, names = data.design_matrix(structure)
    offsets = data.offsets
    counts = np.diff(offsets).astype(float)
    means = group_sums(Q, offsets) / counts[:, None]
    Qc = Q - np.repeat(means, np.diff(offsets), axis=0)
    keep, _ = identify_columns(Qc, Q, names)
    Y = np.bincount(data.cluster_index, weights=data.y, minlength=data.m)
    use = Y[data.cluster_index] > 0
    cl = data.cluster_index[use]
    active = np.flatnonzero(Y > 0)
    remap = np.full(data.m, -1)
    remap[active] = np.arange(active.size)
    D = (remap[cl][:, None] == np.arange(active.size)[None, :]).astype(float)
    X = np.hstack([Q[use][:, keep], D])
    y = data.y[use]
    theta = np.zeros(X.shape[1])
    theta[keep.size:] = np.log(Y[active] / counts[active])
    def loglik(t):
        eta = X @ t
        with np.errstate(over="ignore"):
            return float(y @ eta - np.exp(eta).sum())

    ll = loglik(theta)
    for _ in range(max_iters):
        mu = np.exp(X @ theta)
        g = X.T @ (y - mu)
        H = (X * mu[:, None]).T @ X
        step = np.linalg.solve(H, g)
        for _ in range(60):
            cand = theta + step
            ll_new = loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        theta, ll = cand, ll_new
        if np.max(np.abs(step)) < tol:
            break
    alpha = np.full(data.m, -np.inf)
    alpha[active] = theta[keep.size:]
    return theta[:keep.size], alpha


# ---------------------------------------------------------------------------
# g-computation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GCompReport:
    """Standardized potential-outcome means and the contrasts built from them.

    ``mu_hat`` maps ``(period, arm)`` to the standardized mean, where arm 0
    is control and other arms are treatment-cell labels of the structure.
    """

    structure: Structure
    mu_hat: dict
    cells: list
    deltas: np.ndarray
    weights: np.ndarray
    label: str

    def delta(self, cell) -> float:
        return float(self.deltas[self.cells.index(cell)])

    def average(self) -> float:
        return float(np.mean(self.deltas))

    def to_dict(self) -> dict:
        return {
            "structure": self.structure.value,
            "label": self.label,
            "cells": [_json_cell(c) for c in self.cells],
            "deltas": self.deltas.tolist(),
            "mu_hat": [{"period": int(j), "arm": _json_cell(a), "value": float(v)}
                       for (j, a), v in self.mu_hat.items()],
            "weights": np.asarray(self.weights).tolist(),
        }


def _json_cell(c):
    if isinstance(c, tuple):
        return list(c)
    if isinstance(c, (np.integer,)):
        return int(c)
    return c


def _cell_label(c) -> str:
    if isinstance(c, tuple):
        return ",".join(str(int(v)) for v in c)
    return str(_json_cell(c))


def arm_keys(design, structure: Structure) -> list[tuple[int, object]]:
    """(period, arm) pairs of the standardized means each structure needs."""
    periods = design.analysis_periods(structure)
    cells = design.treatment_cells(structure)
    if structure is Structure.Constant:
        return [(j, "Z") for j in periods] + [(j, 0) for j in periods]
    if structure is Structure.DurationSpecific:
        return [(j, d) for d in cells for j in periods] + [(j, 0) for j in periods]
    if structure is Structure.PeriodSpecific:
        return [(j, j) for j in cells] + [(j, 0) for j in cells]
    used = sorted({j for j, _ in cells})
    return [(c[0], c) for c in cells] + [(j, 0) for j in used]


class _GComp:
    """Pieces of the standardized means that depend on the fit."""

    def __init__(self, fit: PoissonFitResult):
        self.fit = fit
        design = fit.data.design
        self.design = design
        self.structure = fit.structure
        self.periods = design.analysis_periods(fit.structure)
        self.keys = arm_keys(design, fit.structure)
        self.k = fit.beta.shape[0]
        for j in self.periods[1:]:
            if j not in fit.period_index:
                raise CollinearityError(f"period {j} effect is not estimable; cannot standardize")
        if fit.treatment_index.size != len(fit.cells):
            raise CollinearityError("some treatment coefficients are not estimable")

    def row_vector(self, j: int, arm) -> np.ndarray:
        """Model-row indicator part (period + treatment) for (j, arm)."""
        u = np.zeros(self.k)
        if j in self.fit.period_index:
            u[self.fit.period_index[j]] = 1.0
        if arm != 0:
            u[self.fit.treatment_index[self.fit.cells.index(arm)]] = 1.0
        return u

    def cluster_terms(self, problem: _Problem, beta: np.ndarray, alpha: np.ndarray):
        """E_i = exp(alpha_i) sum_k exp(x_ik beta_X) and its covariate moments."""
        cov = self.fit.covariate_index
        xb = problem.Q[:, cov] @ beta[cov] if cov.size else np.zeros(problem.Q.shape[0])
        ea = np.where(np.isfinite(alpha), np.exp(np.where(np.isfinite(alpha), alpha, 0.0)), 0.0)
        r = problem.w * np.exp(xb) * ea[problem.cidx]
        E = np.bincount(problem.cidx, weights=r, minlength=problem.m)
        F = np.zeros((problem.m, self.k))
        if cov.size:
            F[:, cov] = group_sums(problem.Q[:, cov] * r[:, None], problem.offsets)
        return E, F

    def mu_values(self, problem: _Problem, beta: np.ndarray, alpha: np.ndarray,
                  Ncal: np.ndarray) -> np.ndarray:
        E, _ = self.cluster_terms(problem, beta, alpha)
        tot = E.sum() / Ncal.sum()
        return np.array([math.exp(self.row_vector(j, a) @ beta) * tot for j, a in self.keys])


def _contrasts(design, structure: Structure, keys, mu: np.ndarray, z: np.ndarray,
               sizes: np.ndarray):
    """Assemble treatment contrasts from standardized means."""
    lookup = dict(zip(keys, mu))
    periods = design.analysis_periods(structure)
    cells = design.treatment_cells(structure)
    if structure is Structure.Constant:
        lam = tilting_weights(design)[np.asarray(periods) - 1]
        diff = np.array([lookup[(j, "Z")] - lookup[(j, 0)] for j in periods])
        return np.array([lam @ diff / lam.sum()]), lam
    if structure is Structure.DurationSpecific:
        B, rhs = _duration_system(design, cells, lookup, z, sizes)
        try:
            delta = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError:
            raise CollinearityError("duration weighting matrix is singular") from None
        if np.linalg.cond(B) > 1e12:
            raise CollinearityError("duration weighting matrix is singular")
        return delta, B
    arms = cells
    per = [c if structure is Structure.PeriodSpecific else c[0] for c in cells]
    delta = np.array([lookup[(j, a)] - lookup[(j, 0)] for j, a in zip(per, arms)])
    return delta, np.ones(len(cells))


def _duration_system(design, cells, lookup, z, sizes):
    D = len(cells)
    J = design.J
    diffs = np.array([[lookup[(j, d)] - lookup[(j, 0)] for j in range(1, J + 1)]
                      for d in cells])  # D x J
    B = np.zeros((D, D))
    rhs = np.zeros(D)
    for zi, Ni in zip(z, sizes):
        lam, A = duration_weight_blocks(design, int(zi), Ni)
        for d in range(D):
            B += lam[d] @ A[d]
            rhs += lam[d] @ diffs[d]
    return B, rhs


def _label(design, structure: Structure) -> str:
    return {Structure.Constant: "P-ATO", Structure.DurationSpecific: "D",
            Structure.PeriodSpecific: "P", Structure.Saturated: "S"}[structure]


def g_compute(fit: PoissonFitResult, data: TrialData | None = None,
              structure: Structure | str | None = None) -> GCompReport:
    """Standardize fitted means over every enrolled row and form contrasts.

    ``data`` and ``structure`` default to the ones used by the fit; when
    given they must agree with it.
    """
    if structure is not None and Structure.parse(structure) is not fit.structure:
        raise ValueError("structure does not match the fit")
    if data is not None:
        data = restrict_to_structure(data, fit.structure)
        if data.n != fit.data.n:
            raise ValueError("data does not match the fit")
    gc = _GComp(fit)
    d = fit.data
    Ncal = d.cluster_totals()
    mu = gc.mu_values(fit.problem, fit.beta, fit.alpha, Ncal)
    deltas, weights = _contrasts(d.design, fit.structure, gc.keys, mu, d.z, d.sizes())
    return GCompReport(fit.structure, dict(zip(gc.keys, mu.tolist())), fit.cells, deltas,
                       weights, _label(d.design, fit.structure))


def gcomp_leave_one_out(fit: PoissonFitResult, return_mu: bool = False):
    """g-computation contrasts recomputed with each cluster left out (m x cells).

    With ``return_mu=True`` the standardized means (m x len(arm_keys)) are
    returned as a second array.

    Each left-out fit re-estimates every structural coefficient and cluster
    intercept of the remaining clusters; Newton is warm-started at the
    full-data estimate.
    """
    gc = _GComp(fit)
    d = fit.data
    Ncal = d.cluster_totals()
    z = d.z
    sizes = d.sizes()
    out, mus = [], []
    for i in range(fit.m):
        sub = fit.problem.without(i)
        try:
            beta, _, _ = sub.newton(fit.beta)
        except ConvergenceError as exc:
            raise ConvergenceError(f"leave-one-out fit without cluster {fit.cluster_ids[i]} "
                                   f"failed: {exc}", grad_norm=exc.grad_norm) from None
        alpha = sub.alpha(beta)
        keep = np.arange(fit.m) != i
        mu = gc.mu_values(sub, beta, alpha, Ncal[keep])
        deltas, _ = _contrasts(d.design, fit.structure, gc.keys, mu, z[keep], sizes[keep])
        out.append(deltas)
        mus.append(mu)
    if return_mu:
        return np.array(out), np.array(mus)
    return np.array(out)


# ---------------------------------------------------------------------------
# summary measures
# ---------------------------------------------------------------------------
MEASURES = ("difference", "ratio", "log-odds")


def measure_value(f: str, x: float, y: float) -> float:
    if f == "difference":
        return x - y
    if f == "ratio":
        if y <= 0:
            raise DataError(f"ratio needs a positive control mean, got {y}")
        return x / y
    if f == "log-odds":
        for v in (x, y):
            if not 0 < v < 1:
                raise DataError(f"log-odds needs means in (0, 1), got {v}")
        return math.log(x / (1 - x)) - math.log(y / (1 - y))
    raise ValueError(f"unknown summary measure {f!r}; choose from {MEASURES}")


def measure_gradient(f: str, x: float, y: float) -> tuple[float, float]:
    """Partial derivatives of the measure in (treated mean, control mean)."""
    if f == "difference":
        return 1.0, -1.0
    if f == "ratio":
        return 1.0 / y, -x / y ** 2
    return 1.0 / (x * (1 - x)), -1.0 / (y * (1 - y))


def summary_measure(fit: PoissonFitResult, data: TrialData | None = None,
                    structure: Structure | str = Structure.Saturated,
                    f: str = "difference") -> dict:
    """Per-cell measure f(mu_j(beta_jZd), mu_j(0)) for the saturated fit."""
    structure = Structure.parse(structure)
    if structure is not Structure.Saturated or fit.structure is not Structure.Saturated:
        raise ValueError("summary measures are defined on a saturated fit")
    if f not in MEASURES:
        raise ValueError(f"unknown summary measure {f!r}; choose from {MEASURES}")
    rep = g_compute(fit, data)
    out = {}
    for cell in rep.cells:
        j = cell[0]
        x, y = rep.mu_hat[(j, cell)], rep.mu_hat[(j, 0)]
        try:
            out[cell] = measure_value(f, x, y)
        except DataError as exc:
            raise DataError(f"cell (j={cell[0]}, d={cell[1]}): {exc}") from None
    return out


# ---------------------------------------------------------------------------
# stacked estimating equations
# ---------------------------------------------------------------------------
class StackedScore:
    """Per-cluster stacked estimating functions of the g-computation estimator.

    The parameter vector is ``theta = (Delta block, standardized means,
    beta)``.  ``profiled=True`` differentiates through the closed-form
    cluster intercepts; ``profiled=False`` holds them at the fitted values.
    """

    def __init__(self, fit: PoissonFitResult, profiled: bool = True):
        self.fit = fit
        self.profiled = profiled
        self.gc = _GComp(fit)
        d = fit.data
        self.design = d.design
        self.structure = fit.structure
        self.keys = self.gc.keys
        self.cells = list(fit.cells)
        self.problem = fit.problem
        self.Ncal = d.cluster_totals()
        self.z = d.z
        self.sizes = d.sizes()
        self.n_delta = len(self.cells)
        self.n_mu = len(self.keys)
        self.k = fit.beta.shape[0]
        self.U = np.array([self.gc.row_vector(j, a) for j, a in self.keys])
        self._alpha_hat = fit.alpha.copy()
        rep = g_compute(fit)
        self.theta_hat = np.concatenate([rep.deltas, [rep.mu_hat[k] for k in self.keys],
                                         fit.beta])
        self.names = ([f"Delta[{_cell_label(c)}]" for c in self.cells]
                      + [f"mu[{j},{_cell_label(a)}]" for j, a in self.keys] + list(fit.names))
        self._delta_setup()

    @property
    def dim(self) -> int:
        return self.n_delta + self.n_mu + self.k

    def split(self, theta):
        a = self.n_delta
        b = a + self.n_mu
        return theta[:a], theta[a:b], theta[b:]

    def _delta_setup(self):
        """Linear map psi1 = W_delta Delta + W_mu mu, per cluster."""
        m, nd, nm = self.fit.m, self.n_delta, self.n_mu
        pos = {k: i for i, k in enumerate(self.keys)}
        Wd = np.zeros((m, nd, nd))
        Wm = np.zeros((m, nd, nm))
        s = self.structure
        if s is Structure.Constant:
            lam = tilting_weights(self.design)
            for j in self.design.analysis_periods(s):
                Wd[:, 0, 0] += lam[j - 1]
                Wm[:, 0, pos[(j, "Z")]] -= lam[j - 1]
                Wm[:, 0, pos[(j, 0)]] += lam[j - 1]
        elif s is Structure.DurationSpecific:
            for i in range(m):
                lam, A = duration_weight_blocks(self.design, int(self.z[i]), self.sizes[i])
                for di, d in enumerate(self.cells):
                    Wd[i] += lam[di] @ A[di]
                    for j in range(1, self.design.J + 1):
                        Wm[i, :, pos[(j, d)]] -= lam[di][:, j - 1]
                        Wm[i, :, pos[(j, 0)]] += lam[di][:, j - 1]
        else:
            for ci, c in enumerate(self.cells):
                j = c if s is Structure.PeriodSpecific else c[0]
                Wd[:, ci, ci] = 1.0
                Wm[:, ci, pos[(j, c)]] = -1.0
                Wm[:, ci, pos[(j, 0)]] = 1.0
        self.Wd, self.Wm = Wd, Wm

    def _alpha(self, beta):
        return self.problem.alpha(beta) if self.profiled else self._alpha_hat

    def psi(self, theta) -> np.ndarray:
        """m x dim matrix of estimating functions evaluated at ``theta``."""
        theta = np.asarray(theta, dtype=float)
        delta, mu, beta = self.split(theta)
        P = self.problem
        alpha = self._alpha(beta)
        psi1 = self.Wd @ delta + self.Wm @ mu
        E, _ = self.gc.cluster_terms(P, beta, alpha)
        scale = np.exp(self.U @ beta)
        psi2 = self.Ncal[:, None] * mu[None, :] - E[:, None] * scale[None, :]
        ea = np.where(np.isfinite(alpha), np.exp(np.where(np.isfinite(alpha), alpha, 0.0)), 0.0)
        mu_rows = P.w * np.exp(P.Q @ beta) * ea[P.cidx]
        psi3 = group_sums(P.Q * (P.ys - mu_rows)[:, None], P.offsets)
        return np.hstack([psi1, psi2, psi3])

    def jacobian(self, theta) -> np.ndarray:
        """Analytic m x dim x dim per-cluster derivative d psi_i / d theta^T."""
        theta = np.asarray(theta, dtype=float)
        delta, mu, beta = self.split(theta)
        P = self.problem
        m, nd, nm, k = self.fit.m, self.n_delta, self.n_mu, self.k
        alpha = self._alpha(beta)
        ea = np.where(np.isfinite(alpha), np.exp(np.where(np.isfinite(alpha), alpha, 0.0)), 0.0)
        mu_rows = P.w * np.exp(P.Q @ beta) * ea[P.cidx]
        if self.profiled:
            _, e, S, _ = P.profile(beta)
            Qbar = group_sums(P.Q * e[:, None], P.offsets) / np.where(S > 0, S, 1.0)[:, None]
        else:
            Qbar = np.zeros((m, k))
        E, F = self.gc.cluster_terms(P, beta, alpha)
        scale = np.exp(self.U @ beta)

        Jac = np.zeros((m, self.dim, self.dim))
        a, b = nd, nd + nm
        Jac[:, :a, :a] = self.Wd
        Jac[:, :a, a:b] = self.Wm
        idx = np.arange(nm)
        Jac[:, a + idx, a + idx] = self.Ncal[:, None]
        # d/d beta of E_i exp(u beta) = exp(u beta) (E_i (u - Qbar_i) + F_i)
        dh = scale[None, :, None] * (E[:, None, None] * (self.U[None, :, :] - Qbar[:, None, :])
                                     + F[:, None, :])
        Jac[:, a:b, b:] = -dh
        Qcen = P.Q - Qbar[P.cidx]
        Jac[:, b:, b:] = -group_sums(np.einsum("r,ri,rj->rij", mu_rows, P.Q, Qcen), P.offsets)
        return Jac

    def bread(self, theta=None) -> np.ndarray:
        theta = self.theta_hat if theta is None else theta
        return self.jacobian(theta).mean(axis=0)


def stacked_score(fit: PoissonFitResult, data: TrialData | None = None,
                  structure: Structure | str | None = None, profiled: bool = True
                  ) -> StackedScore:
    """Stacked g-computation estimating equations at the fitted parameters."""
    if structure is not None and Structure.parse(structure) is not fit.structure:
        raise ValueError("structure does not match the fit")
    return StackedScore(fit, profiled=profiled)
