"""Cluster-robust sandwich and leave-one-cluster-out jackknife inference."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import TrialData
from .errors import CollinearityError, ConvergenceError, DataError


def sandwich_cr0(scores: np.ndarray, bread: np.ndarray) -> np.ndarray:
    """Finite-sample CR0 covariance of the M-estimator.

    Parameters
    ----------
    scores : (m, q) array
        Per-cluster estimating functions at the estimate.
    bread : (q, q) array
        Average per-cluster derivative ``m^-1 sum_i d psi_i / d theta^T``.

    Returns
    -------
    (q, q) array equal to ``V / m`` where ``V = m^-1 sum_i IF_i IF_i^T``
    and ``IF_i = bread^-1 psi_i``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    bread = np.atleast_2d(np.asarray(bread, dtype=float))
    m = scores.shape[0]
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1e14:
        raise CollinearityError(f"bread matrix is singular (condition number {cond:.3g})")
    infl = np.linalg.solve(bread, scores.T).T
    V = infl.T @ infl / m
    cov = V / m
    return (cov + cov.T) / 2


def influence_rows(scores: np.ndarray, bread: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.atleast_2d(bread), np.atleast_2d(scores).T).T


def jackknife_variance(loo: np.ndarray) -> np.ndarray:
    """Tukey jackknife covariance ((m-1)/m) sum_i (t_(-i) - t_bar)(...)^T."""
    loo = np.asarray(loo, dtype=float)
    if loo.ndim == 1:
        loo = loo[:, None]
    m = loo.shape[0]
    if m < 3:
        raise DataError(f"the jackknife with t(m-2) intervals needs m >= 3 clusters, got {m}")
    dev = loo - loo.mean(axis=0)
    cov = (m - 1) / m * dev.T @ dev
    return (cov + cov.T) / 2


@dataclass(frozen=True)
class JackknifeResult:
    estimate: np.ndarray
    loo: np.ndarray
    variance: np.ndarray
    df: int

    def ci(self, level: float = 0.95) -> np.ndarray:
        q = stats.t.ppf(0.5 + level / 2, self.df)
        se = np.sqrt(np.diag(self.variance))
        return np.column_stack([self.estimate - q * se, self.estimate + q * se])


def jackknife(data: TrialData, fit_fn: Callable[[TrialData], np.ndarray],
              target: np.ndarray | Callable | None = None) -> JackknifeResult:
    """Leave-one-cluster-out jackknife around an arbitrary estimator.

    ``fit_fn`` maps a dataset to a parameter vector; ``target`` is either a
    contrast matrix/vector applied to that vector or a callable.  Clusters
    are processed in increasing id order.
    """
    m = data.m
    if m < 3:
        raise DataError(f"the jackknife with t(m-2) intervals needs m >= 3 clusters, got {m}")

    def apply(theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if target is None:
            return theta
        if callable(target):
            return np.atleast_1d(np.asarray(target(theta), dtype=float))
        return np.atleast_1d(np.asarray(target, dtype=float) @ theta)

    full = apply(fit_fn(data))
    rows = []
    for c in data.cluster_ids:
        try:
            rows.append(apply(fit_fn(data.drop_cluster(int(c)))))
        except ConvergenceError as exc:
            raise ConvergenceError(f"leave-one-out fit without cluster {int(c)} failed: {exc}",
                                   grad_norm=exc.grad_norm) from None
    loo = np.array(rows)
    return JackknifeResult(full, loo, jackknife_variance(loo), m - 2)


@dataclass(frozen=True)
class ContrastInference:
    estimate: float
    se_cr0: float
    se_jk: float | None
    ci_normal: tuple[float, float]
    ci_t: tuple[float, float] | None
    df: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se_cr0": self.se_cr0, "se_jk": self.se_jk,
                "ci_normal": list(self.ci_normal),
                "ci_t": list(self.ci_t) if self.ci_t is not None else None, "df": self.df}


@dataclass(frozen=True)
class VarianceReport:
    """Estimates with CR0 and (optionally) jackknife covariances."""

    theta: np.ndarray
    names: list[str]
    cr0: np.ndarray
    jackknife: np.ndarray | None
    influence_rows: np.ndarray
    m: int
    level: float = 0.95

    @property
    def df_t(self) -> int:
        return self.m - 2

    def ci_normal(self) -> np.ndarray:
        q = stats.norm.ppf(0.5 + self.level / 2)
        se = np.sqrt(np.clip(np.diag(self.cr0), 0, None))
        return np.column_stack([self.theta - q * se, self.theta + q * se])

    def ci_t(self) -> np.ndarray | None:
        if self.jackknife is None:
            return None
        q = stats.t.ppf(0.5 + self.level / 2, self.df_t)
        se = np.sqrt(np.clip(np.diag(self.jackknife), 0, None))
        return np.column_stack([self.theta - q * se, self.theta + q * se])


def contrast_inference(report: VarianceReport, c) -> ContrastInference:
    """Inference for c^T theta under both variance estimators."""
    c = np.asarray(c, dtype=float)
    if c.shape != report.theta.shape:
        raise ValueError(f"contrast has length {c.shape}, expected {report.theta.shape}")
    est = float(c @ report.theta)
    se0 = float(np.sqrt(max(c @ report.cr0 @ c, 0.0)))
    zq = stats.norm.ppf(0.5 + report.level / 2)
    ci_n = (est - zq * se0, est + zq * se0)
    se_jk = ci_t = None
    if report.jackknife is not None:
        se_jk = float(np.sqrt(max(c @ report.jackknife @ c, 0.0)))
        tq = stats.t.ppf(0.5 + report.level / 2, report.df_t)
        ci_t = (est - tq * se_jk, est + tq * se_jk)
    return ContrastInference(est, se0, se_jk, ci_n, ci_t, report.df_t)
