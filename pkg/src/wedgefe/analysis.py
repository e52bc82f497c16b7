"""One-call estimation: fit, contrasts and both variance estimators."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import TrialData
from .design import DesignKind, Structure
from .inference import (ContrastInference, VarianceReport, contrast_inference,
                        influence_rows, jackknife_variance, sandwich_cr0)
from .linear import average_contrast, fit_linear_fe
from .loglink import (arm_keys, fit_poisson_fe, gcomp_leave_one_out, measure_gradient,
                      measure_value, stacked_score)

SCHEMA_VERSION = 1


def target_label(kind: DesignKind, structure: Structure) -> str:
    """Name of the marginal estimand a structure's headline contrast targets."""
    if structure is Structure.Constant:
        return "P-ATO"
    if kind is DesignKind.ParallelBaseline:
        return "P-avg"
    return {Structure.DurationSpecific: "D-avg", Structure.PeriodSpecific: "P-avg",
            Structure.Saturated: "S-avg"}[structure]


@dataclass(frozen=True)
class EstimateRow:
    name: str
    inference: ContrastInference

    def to_dict(self) -> dict:
        return {"name": self.name, **self.inference.to_dict()}


@dataclass(frozen=True)
class EstimandReport:
    """Point estimates with CR0-normal and jackknife-t(m-2) intervals."""

    link: str
    structure: Structure
    target: str
    m: int
    rows: list[EstimateRow]
    diagnostics: dict = field(default_factory=dict)

    def row(self, name: str) -> EstimateRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def headline(self) -> EstimateRow:
        return self.row(self.target)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "link": self.link,
                "structure": self.structure.value, "target": self.target, "m": self.m,
                "df_t": self.m - 2, "rows": [r.to_dict() for r in self.rows],
                "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("name,estimate,se_cr0,se_jk,ci_normal_lo,ci_normal_hi,ci_t_lo,ci_t_hi\n")
        for r in self.rows:
            i = r.inference
            t = i.ci_t if i.ci_t is not None else (float("nan"), float("nan"))
            se_jk = i.se_jk if i.se_jk is not None else float("nan")
            vals = [i.estimate, i.se_cr0, se_jk, *i.ci_normal, *t]
            buf.write(r.name + "," + ",".join(f"{v:.10g}" for v in vals) + "\n")
        return buf.getvalue()


def _rows(report: VarianceReport, labels: list[str], index: np.ndarray, structure: Structure,
          target: str) -> list[EstimateRow]:
    q = report.theta.shape[0]
    rows = []
    for lab, k in zip(labels, index):
        c = np.zeros(q)
        c[k] = 1.0
        rows.append(EstimateRow(lab, contrast_inference(report, c)))
    c = np.zeros(q)
    if structure is Structure.Constant:
        c[index[0]] = 1.0
    else:
        avg, _ = average_contrast(structure, len(index))
        c[index] = avg
    rows.append(EstimateRow(target, contrast_inference(report, c)))
    return rows


def analyze(data: TrialData, structure: Structure | str = Structure.Constant,
            link: str = "identity", *, jackknife: bool = True, profiled: bool = True,
            measure: str | None = None) -> EstimandReport:
    """Fit a fixed-effects model and report inference for its treatment contrasts.

    ``link="identity"`` fits the linear model; ``link="log"`` fits the
    conditional-Poisson model and reports g-computation contrasts.
    ``measure`` (log link, saturated structure only) adds per-cell
    summary measures (difference, ratio or log-odds).
    """
    structure = Structure.parse(structure)
    target = target_label(data.design.kind, structure)
    if link == "identity":
        if measure is not None:
            raise ValueError("summary measures need the log link")
        fit = fit_linear_fe(data, structure)
        cov = sandwich_cr0(fit.per_cluster_score, fit.bread)
        jk = jackknife_variance(fit.leave_one_out()) if jackknife else None
        rep = VarianceReport(fit.beta, fit.names, cov, jk,
                             influence_rows(fit.per_cluster_score, fit.bread), fit.m)
        labels = [fit.names[k] for k in fit.treatment_index]
        rows = _rows(rep, labels, fit.treatment_index, structure, target)
        diag = {"dropped_columns": fit.dropped,
                "coefficients": dict(zip(fit.names, fit.beta.tolist()))}
        return EstimandReport("identity", structure, target, fit.m, rows, diag)
    if link != "log":
        raise ValueError(f"unknown link {link!r}; use 'identity' or 'log'")

    fit = fit_poisson_fe(data, structure)
    st = stacked_score(fit, profiled=profiled)
    theta = st.theta_hat
    psi = st.psi(theta)
    bread = st.bread(theta)
    cov = sandwich_cr0(psi, bread)
    jk = None
    loo_mu = None
    if jackknife:
        loo_delta, loo_mu = gcomp_leave_one_out(fit, return_mu=True)
        loo_theta = np.hstack([loo_delta, loo_mu])
        jk = np.zeros_like(cov)
        a = st.n_delta + st.n_mu
        jk[:a, :a] = jackknife_variance(loo_theta)
    rep = VarianceReport(theta, st.names, cov, jk, influence_rows(psi, bread), fit.m)
    labels = st.names[:st.n_delta]
    rows = _rows(rep, labels, np.arange(st.n_delta), structure, target)
    if measure is not None:
        rows += _measure_rows(st, rep, measure, loo_mu)
    diag = {"newton_iterations": fit.newton_iters, "gradient_norm": fit.grad_norm,
            "excluded_clusters": fit.excluded, "dropped_columns": fit.dropped,
            "coefficients": dict(zip(fit.names, fit.beta.tolist())),
            "standardized_means": {st.names[st.n_delta + i]: float(v)
                                   for i, v in enumerate(theta[st.n_delta:st.n_delta + st.n_mu])}}
    return EstimandReport("log", structure, target, fit.m, rows, diag)


def _measure_rows(st, rep: VarianceReport, measure: str, loo_mu) -> list[EstimateRow]:
    if st.structure is not Structure.Saturated:
        raise ValueError("summary measures are defined on a saturated fit")
    from scipy import stats

    keys = arm_keys(st.design, st.structure)
    pos = {k: st.n_delta + i for i, k in enumerate(keys)}
    out = []
    for cell in st.cells:
        j = cell[0]
        a, b = pos[(j, cell)], pos[(j, 0)]
        x, y = rep.theta[a], rep.theta[b]
        est = measure_value(measure, x, y)
        gx, gy = measure_gradient(measure, x, y)
        g = np.zeros(rep.theta.shape[0])
        g[a], g[b] = gx, gy
        se0 = float(np.sqrt(max(g @ rep.cr0 @ g, 0.0)))
        zq = stats.norm.ppf(0.975)
        se_jk = ci_t = None
        if loo_mu is not None:
            vals = np.array([measure_value(measure, r[a - st.n_delta], r[b - st.n_delta])
                             for r in loo_mu])
            se_jk = float(np.sqrt(jackknife_variance(vals)[0, 0]))
            tq = stats.t.ppf(0.975, rep.df_t)
            ci_t = (est - tq * se_jk, est + tq * se_jk)
        inf = ContrastInference(est, se0, se_jk, (est - zq * se0, est + zq * se0), ci_t, rep.df_t)
        out.append(EstimateRow(f"{measure}[{j},{cell[1]}]", inf))
    return out
