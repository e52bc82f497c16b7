"""Simulation scenarios, estimand oracles and the Monte Carlo study loop.

Scenario presets
----------------
1. Stepped-wedge trial, binary outcome from a logit model with a constant
   log-odds effect (period-specific risk differences).  J = 4 for m < 100
   clusters and J = 6 otherwise.
2. Parallel-with-baseline quasi-experiment, continuous outcome,
   period-varying effects and cluster-level confounding (J = 4).
3. Crossover trial, continuous outcome with nonlinear covariate effects
   and effect heterogeneity by a cluster-level covariate (J = 4).
4. Stepped-wedge trial, negative-binomial counts from a log model (J = 6).

Random numbers come from counter-based Philox streams keyed by
``(seed, replicate, purpose)``, so every replicate can be regenerated on
its own and results do not depend on how replicates are scheduled.
"""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats

from .analysis import analyze
from .data import TrialData
from .design import DesignKind, Structure, TrialDesign, tilting_weights
from .errors import QuadratureError, WedgeFEError

PURPOSES = {"assignment": 0, "enrollment": 1, "cluster": 2, "outcome": 3, "oracle": 4}
TAU2_SMALL = 0.05 / (1 - 0.05)

DEFAULT_PARAMS = {
    1: dict(mu0=1.5, period_slope=0.2, beta_z=0.7, delta_var=0.7 ** 2 / 100, beta_x1=1.5,
            x1_a=6.0, x1_b=4.0, tau2=0.176, gamma_ratio=0.25),
    2: dict(mu0=1.5, period_slope=0.2, beta_z=0.7, effect_slope=0.6,
            delta_var=0.7 ** 2 / 100, beta_x1=1.5, x1_a=6.0, x1_b=4.0, beta_x2=0.02,
            x2_shape=0.5, x2_scale=200.0, tau2=TAU2_SMALL, kappa_ratio=0.1, decay=0.5,
            sigma2=1.0, confounding=0.5, randomized=False),
    3: dict(mu0=1.5, period_slope=0.2, beta_z=0.7, effect_slope=0.6,
            delta_var=0.7 ** 2 / 100, x2_heterogeneity=1.0, beta_x1=1.5, x1_a=6.0, x1_b=4.0,
            beta_x21=2.0, beta_x22=7.0, x2_shape=0.5, x2_scale=200.0, tau2=TAU2_SMALL,
            kappa_ratio=0.1, decay=0.5, sigma2=1.0),
    4: dict(mu0=1.5, period_slope=1.0, beta_z=0.7, delta_var=0.7 ** 2 / 100, beta_x1=1.5,
            x1_a=6.0, x1_b=4.0, tau2=0.176, gamma_ratio=0.25, nb_r=50.0),
}

DESIGN_KIND = {1: DesignKind.SteppedWedge, 2: DesignKind.ParallelBaseline,
               3: DesignKind.Crossover, 4: DesignKind.SteppedWedge}


@dataclass(frozen=True)
class ScenarioSpec:
    """A simulation scenario preset plus optional parameter overrides."""

    scenario: int
    m: int
    J: int | None = None
    mean_cluster_period_size: float = 100.0
    seed: int = 0
    replicates: int = 1000
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in DEFAULT_PARAMS:
            raise WedgeFEError(f"unknown scenario {self.scenario}; choose 1-4")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.scenario])
        if unknown:
            raise WedgeFEError(f"unknown scenario-{self.scenario} parameters {sorted(unknown)}")
        if self.J is None:
            J = {1: 4 if self.m < 100 else 6, 2: 4, 3: 4, 4: 6}[self.scenario]
            object.__setattr__(self, "J", J)
        self.design  # validates allocation

    @property
    def p(self) -> dict:
        return {**DEFAULT_PARAMS[self.scenario], **self.params}

    @property
    def design(self) -> TrialDesign:
        kind = DESIGN_KIND[self.scenario]
        n_seq = len(TrialDesign(kind, self.J).sequences)
        if self.m % n_seq:
            raise WedgeFEError(f"m={self.m} is not a multiple of the {n_seq} sequences of a "
                               f"{kind.value} design with J={self.J}")
        return TrialDesign(kind, self.J, self.m // n_seq)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(int(d["scenario"]), int(d["m"]), d.get("J"),
                   float(d.get("mean_cluster_period_size", 100.0)), int(d.get("seed", 0)),
                   int(d.get("replicates", 1000)), dict(d.get("params", {})))

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "m": self.m, "J": self.J,
                "mean_cluster_period_size": self.mean_cluster_period_size, "seed": self.seed,
                "replicates": self.replicates, "params": dict(self.params)}


class ReplicateStreams:
    """Independent generators for each purpose within one replicate."""

    def __init__(self, seed: int, replicate: int = 0):
        self.seed = int(seed)
        self.replicate = int(replicate)

    def get(self, purpose: str) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.replicate, PURPOSES[purpose]))
        return np.random.Generator(np.random.Philox(ss))


def _streams(rng, spec: ScenarioSpec) -> ReplicateStreams | None:
    if rng is None:
        return ReplicateStreams(spec.seed, 0)
    if isinstance(rng, ReplicateStreams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return ReplicateStreams(spec.seed, int(rng))
    return None


class _Draws:
    """Access generators by purpose, or share one user-supplied generator."""

    def __init__(self, rng, spec):
        self.streams = _streams(rng, spec)
        self.single = rng if self.streams is None else None

    def __call__(self, purpose: str) -> np.random.Generator:
        return self.single if self.single is not None else self.streams.get(purpose)


def draw_sizes(rng: np.random.Generator, m: int, J: int, mean: float) -> np.ndarray:
    """Cluster-period sizes ~ Poisson(mean) truncated at >= 1."""
    N = rng.poisson(mean, size=(m, J))
    while np.any(N < 1):
        bad = N < 1
        N[bad] = rng.poisson(mean, size=int(bad.sum()))
    return N


def _skeleton(design: TrialDesign, z: np.ndarray, N: np.ndarray):
    m, J = N.shape
    cl = np.repeat(np.repeat(np.arange(m), J), N.ravel())
    pe = np.repeat(np.tile(np.arange(1, J + 1), m), N.ravel())
    dur = np.array([[design.duration(j, int(zi)) for j in range(1, J + 1)] for zi in z])
    treated = (dur[cl, pe - 1] > 0).astype(float)
    return cl, pe, treated


def _assemble(design, cl, pe, y, X, names, z) -> TrialData:
    seq = {int(i): int(zi) for i, zi in enumerate(z)}
    return TrialData.from_arrays(design, cl, pe, y, X, sequence_of=seq,
                                 covariate_names=names, assume_sorted=True)


def _random_assignment(design: TrialDesign, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(design.allocation())


def _ar_cov(J: int, kappa2: float, decay: float) -> np.ndarray:
    idx = np.arange(J)
    return kappa2 * np.exp(-decay * np.abs(idx[:, None] - idx[None, :]))


def generate_scenario1(spec: ScenarioSpec, rng=None) -> TrialData:
    """Stepped-wedge binary outcomes from a random-intercept logit model.

    ``rng`` may be a replicate index, a :class:`ReplicateStreams` or a
    single ``numpy.random.Generator``.
    """
    p, design, draw = spec.p, spec.design, _Draws(rng, spec)
    m, J = spec.m, spec.J
    z = _random_assignment(design, draw("assignment"))
    N = draw_sizes(draw("enrollment"), m, J, spec.mean_cluster_period_size)
    g = draw("cluster")
    delta = g.normal(0.0, math.sqrt(p["delta_var"]), m)
    x1_i = g.beta(p["x1_a"], p["x1_b"], m)
    alpha = g.normal(0.0, math.sqrt(p["tau2"]), m)
    gamma = g.normal(0.0, math.sqrt(p["tau2"] * p["gamma_ratio"]), (m, J))
    cl, pe, b = _skeleton(design, z, N)
    o = draw("outcome")
    x1 = (o.random(cl.shape[0]) < x1_i[cl]).astype(float)
    eta = (p["mu0"] + p["period_slope"] * pe + p["beta_z"] * (1 + delta[cl]) * b
           + p["beta_x1"] * x1 + alpha[cl] + gamma[cl, pe - 1])
    y = (o.random(cl.shape[0]) < special.expit(eta)).astype(float)
    return _assemble(design, cl, pe, y, x1[:, None], ("x1",), z)


def _confounded_cluster_draws(p, m, g, randomized, design, assign_rng):
    rho = p["confounding"]
    u = g.standard_normal(m)
    e = g.standard_normal((m, 3))
    lat = rho * u[:, None] + math.sqrt(1 - rho ** 2) * e
    tau = math.sqrt(p["tau2"])
    alpha = tau * lat[:, 0]
    x1_i = stats.beta.ppf(stats.norm.cdf(lat[:, 1]), p["x1_a"], p["x1_b"])
    x2_i = stats.gamma.ppf(stats.norm.cdf(lat[:, 2]), p["x2_shape"], scale=p["x2_scale"])
    if randomized:
        z = _random_assignment(design, assign_rng)
    else:
        z = np.zeros(m, dtype=np.int64)
        z[np.argsort(-u, kind="stable")[: m // 2]] = 2
    return z, alpha, x1_i, x2_i


def scenario2_effects(p: dict, J: int) -> np.ndarray:
    """Period-specific effects beta_jZ for j = 1..J (zero in period 1)."""
    j = np.arange(1, J + 1)
    centre = np.mean(np.arange(2, J + 1))
    eff = p["beta_z"] * (1 + p["effect_slope"] * (j - centre))
    eff[0] = 0.0
    return eff


def scenario3_effects(p: dict, J: int) -> np.ndarray:
    j = np.arange(1, J + 1)
    return p["beta_z"] * (1 + p["effect_slope"] * (j - (J + 1) / 2))


def generate_scenario2(spec: ScenarioSpec, rng=None) -> TrialData:
    """Parallel-with-baseline continuous outcomes with cluster-level confounding.

    The treated half of the clusters is the half with the largest latent
    score u_i, on which the cluster intercept and both covariate means load
    positively (Gaussian-copula coupling, correlation ``confounding``).
    Setting ``randomized=True`` assigns sequences at random instead.
    """
    p, design, draw = spec.p, spec.design, _Draws(rng, spec)
    m, J = spec.m, spec.J
    g = draw("cluster")
    z, alpha, x1_i, x2_i = _confounded_cluster_draws(p, m, g, p["randomized"], design,
                                                     draw("assignment"))
    delta = g.normal(0.0, math.sqrt(p["delta_var"]), m)
    kappa2 = p["tau2"] * p["kappa_ratio"] ** 2
    gamma = g.multivariate_normal(np.zeros(J), _ar_cov(J, kappa2, p["decay"]), m,
                                  method="cholesky")
    N = draw_sizes(draw("enrollment"), m, J, spec.mean_cluster_period_size)
    cl, pe, b = _skeleton(design, z, N)
    o = draw("outcome")
    n = cl.shape[0]
    x1 = (o.random(n) < x1_i[cl]).astype(float)
    x2 = o.poisson(x2_i[cl]).astype(float)
    eff = scenario2_effects(p, J)
    y = (p["mu0"] + p["period_slope"] * pe + eff[pe - 1] * (1 + delta[cl]) * b
         + p["beta_x1"] * x1 + p["beta_x2"] * np.sqrt(x2) + alpha[cl] + gamma[cl, pe - 1]
         + o.normal(0.0, math.sqrt(p["sigma2"]), n))
    return _assemble(design, cl, pe, y, np.column_stack([x1, x2]), ("x1", "x2"), z)


def generate_scenario3(spec: ScenarioSpec, rng=None) -> TrialData:
    """Crossover continuous outcomes with nonlinear covariate effects."""
    p, design, draw = spec.p, spec.design, _Draws(rng, spec)
    m, J = spec.m, spec.J
    z = _random_assignment(design, draw("assignment"))
    g = draw("cluster")
    delta = g.normal(0.0, math.sqrt(p["delta_var"]), m)
    x1_i = g.beta(p["x1_a"], p["x1_b"], m)
    x2_i = g.gamma(p["x2_shape"], p["x2_scale"], m)
    alpha = g.normal(0.0, math.sqrt(p["tau2"]), m)
    kappa2 = p["tau2"] * p["kappa_ratio"] ** 2
    gamma = g.multivariate_normal(np.zeros(J), _ar_cov(J, kappa2, p["decay"]), m,
                                  method="cholesky")
    N = draw_sizes(draw("enrollment"), m, J, spec.mean_cluster_period_size)
    cl, pe, b = _skeleton(design, z, N)
    o = draw("outcome")
    n = cl.shape[0]
    x1 = (o.random(n) < x1_i[cl]).astype(float)
    x2 = o.poisson(x2_i[cl]).astype(float)
    ex2 = p["x2_shape"] * p["x2_scale"]
    mult = 1 + delta + p["x2_heterogeneity"] * (x2_i - ex2) / ex2
    eff = scenario3_effects(p, J)
    y = (p["mu0"] + p["period_slope"] * pe + eff[pe - 1] * mult[cl] * b
         + p["beta_x1"] * np.sin(pe * x1) + p["beta_x21"] * np.sqrt(x2)
         + p["beta_x22"] * np.cos(x2) + alpha[cl] + gamma[cl, pe - 1]
         + o.normal(0.0, math.sqrt(p["sigma2"]), n))
    return _assemble(design, cl, pe, y, np.column_stack([x1, x2]), ("x1", "x2"), z)


def generate_scenario4(spec: ScenarioSpec, rng=None) -> TrialData:
    """Stepped-wedge negative-binomial counts from a log-linear mean."""
    p, design, draw = spec.p, spec.design, _Draws(rng, spec)
    m, J = spec.m, spec.J
    z = _random_assignment(design, draw("assignment"))
    N = draw_sizes(draw("enrollment"), m, J, spec.mean_cluster_period_size)
    g = draw("cluster")
    delta = g.normal(0.0, math.sqrt(p["delta_var"]), m)
    x1_i = g.beta(p["x1_a"], p["x1_b"], m)
    alpha = g.normal(0.0, math.sqrt(p["tau2"]), m)
    gamma = g.normal(0.0, math.sqrt(p["tau2"] * p["gamma_ratio"]), (m, J))
    cl, pe, b = _skeleton(design, z, N)
    o = draw("outcome")
    x1 = (o.random(cl.shape[0]) < x1_i[cl]).astype(float)
    mean = np.exp(p["mu0"] + p["period_slope"] * pe + p["beta_z"] * (1 + delta[cl]) * b
                  + p["beta_x1"] * x1 + alpha[cl] + gamma[cl, pe - 1])
    r = p["nb_r"]
    y = o.negative_binomial(r, r / (mean + r)).astype(float)
    return _assemble(design, cl, pe, y, x1[:, None], ("x1",), z)


GENERATORS = {1: generate_scenario1, 2: generate_scenario2, 3: generate_scenario3,
              4: generate_scenario4}


def generate(spec: ScenarioSpec, replicate: int = 0) -> TrialData:
    return GENERATORS[spec.scenario](spec, ReplicateStreams(spec.seed, replicate))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class OracleResult:
    scenario: int
    J: int
    effects: dict
    p_avg: float
    p_ato: float
    method: str
    error: float
    arm_means: dict = field(default_factory=dict)
    average_label: str = "P-avg"

    def to_dict(self) -> dict:
        return {"schema_version": 1, "scenario": self.scenario, "J": self.J,
                "effects": {str(k): v for k, v in self.effects.items()},
                self.average_label: self.p_avg, "P-ATO": self.p_ato, "method": self.method,
                "numeric_error": self.error,
                "arm_means": {f"{j},{b}": v for (j, b), v in self.arm_means.items()}}


def _gh(n: int):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / math.sqrt(2 * math.pi)


def scenario1_arm_mean(p: dict, j: int, b: int, order: int) -> float:
    """E[expit(...)] by a tensor Gauss-Hermite rule over (delta, alpha, gamma)
    and exact summation over the Bernoulli covariate."""
    x, w = _gh(order)
    sd_d = math.sqrt(p["delta_var"]) if b else 0.0
    sd_a = math.sqrt(p["tau2"])
    sd_g = math.sqrt(p["tau2"] * p["gamma_ratio"])
    t1, t2, t3 = np.meshgrid(x, x, x, indexing="ij")
    W = w[:, None, None] * w[None, :, None] * w[None, None, :]
    px1 = p["x1_a"] / (p["x1_a"] + p["x1_b"])
    base = (p["mu0"] + p["period_slope"] * j + p["beta_z"] * (1 + sd_d * t1) * b
            + sd_a * t2 + sd_g * t3)
    total = 0.0
    for xv, pr in ((0.0, 1 - px1), (1.0, px1)):
        total += pr * float(np.sum(W * special.expit(base + p["beta_x1"] * xv)))
    return total


def _scenario1_oracle(spec: ScenarioSpec, tol: float = 1e-4) -> OracleResult:
    p, J = spec.p, spec.J
    means, err = {}, 0.0
    for j in range(1, J + 1):
        for b in (0, 1):
            prev = None
            for order in (8, 16, 32, 64):
                val = scenario1_arm_mean(p, j, b, order)
                if prev is not None and abs(val - prev) < tol * 1e-3:
                    break
                prev = val
            e = abs(val - prev)
            if e > tol:
                raise QuadratureError(f"quadrature for period {j}, arm {b} reached only "
                                      f"{e:.2g}", achieved=e)
            means[(j, b)] = val
            err = max(err, e)
    return _summarize(spec, means, "quadrature", 2 * err)


def _summarize(spec, means, method, err) -> OracleResult:
    design = spec.design
    J = spec.J
    lam = tilting_weights(design)
    eff = {j: means[(j, 1)] - means[(j, 0)] for j in range(1, J + 1)}
    if design.kind is DesignKind.SteppedWedge:
        avg_periods = range(2, J)
        label = "P-avg"
    elif design.kind is DesignKind.ParallelBaseline:
        avg_periods = range(2, J + 1)
        label = "P-avg"
    else:
        avg_periods = range(1, J + 1)
        label = "S-avg"
    p_avg = float(np.mean([eff[j] for j in avg_periods]))
    p_ato = float(sum(lam[j - 1] * eff[j] for j in range(1, J + 1)) / lam.sum())
    shown = {j: eff[j] for j in avg_periods}
    return OracleResult(spec.scenario, J, shown, p_avg, p_ato, method, err, means, label)


def scenario4_arm_mean(p: dict, j: int, b: int) -> float:
    """Closed form of E[Y_ijk(b)] for scenario 4 (log-normal mixed moments)."""
    bz = p["beta_z"]
    mgf_delta = math.exp(bz * b + 0.5 * (bz * b) ** 2 * p["delta_var"])
    px1 = p["x1_a"] / (p["x1_a"] + p["x1_b"])
    ex1 = 1 - px1 + px1 * math.exp(p["beta_x1"])
    return (math.exp(p["mu0"] + p["period_slope"] * j) * mgf_delta * ex1
            * math.exp(0.5 * p["tau2"]) * math.exp(0.5 * p["tau2"] * p["gamma_ratio"]))


def scenario4_mc_oracle(spec: ScenarioSpec, n_draws: int = 10 ** 7, seed: int = 12345,
                        chunk: int = 10 ** 6) -> dict:
    """Brute-force Monte Carlo of the scenario-4 effects.

    Draws every random input of one individual's mean (delta, X1_i, X1,
    alpha, gamma) and averages exp(...)(b=1) - exp(...)(b=0).  Returns
    effect estimates and standard errors for each period, P-avg and P-ATO.
    """
    p, J = spec.p, spec.J
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    s1 = s2 = 0.0
    done = 0
    while done < n_draws:
        k = min(chunk, n_draws - done)
        delta = g.normal(0, math.sqrt(p["delta_var"]), k)
        x1_i = g.beta(p["x1_a"], p["x1_b"], k)
        x1 = (g.random(k) < x1_i).astype(float)
        a = g.normal(0, math.sqrt(p["tau2"]), k)
        gm = g.normal(0, math.sqrt(p["tau2"] * p["gamma_ratio"]), k)
        common = np.exp(p["beta_x1"] * x1 + a + gm)
        diff = common * (np.exp(p["beta_z"] * (1 + delta)) - 1.0)
        s1 += diff.sum()
        s2 += (diff ** 2).sum()
        done += k
    mean = s1 / n_draws
    sd = math.sqrt(max(s2 / n_draws - mean ** 2, 0.0))
    se = sd / math.sqrt(n_draws)
    scale = {j: math.exp(p["mu0"] + p["period_slope"] * j) for j in range(1, J + 1)}
    lam = tilting_weights(spec.design)
    effects = {j: (scale[j] * mean, scale[j] * se) for j in range(1, J + 1)}
    avg_scale = np.mean([scale[j] for j in range(2, J)])
    ato_scale = sum(lam[j - 1] * scale[j] for j in range(1, J + 1)) / lam.sum()
    return {"effects": effects, "P-avg": (avg_scale * mean, avg_scale * se),
            "P-ATO": (ato_scale * mean, ato_scale * se), "n_draws": n_draws}


def oracle_estimands(spec: ScenarioSpec) -> OracleResult:
    """True values of the period-specific, average and overlap-weighted effects."""
    p, J = spec.p, spec.J
    if spec.scenario == 1:
        return _scenario1_oracle(spec)
    if spec.scenario in (2, 3):
        eff = scenario2_effects(p, J) if spec.scenario == 2 else scenario3_effects(p, J)
        means = {}
        for j in range(1, J + 1):
            means[(j, 0)] = 0.0
            means[(j, 1)] = float(eff[j - 1])
        return _summarize(spec, means, "closed-form", 0.0)
    means = {(j, b): scenario4_arm_mean(p, j, b) for j in range(1, J + 1) for b in (0, 1)}
    return _summarize(spec, means, "closed-form", 0.0)


# ---------------------------------------------------------------------------
# study loop
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EstimatorSpec:
    method: str          # "linear" or "gcomp"
    structure: Structure
    jackknife: bool = True

    @property
    def label(self) -> str:
        return ("linear FE" if self.method == "linear" else "g-comp")


def default_menu(scenario: int) -> list[EstimatorSpec]:
    lin = [EstimatorSpec("linear", Structure.Constant),
           EstimatorSpec("linear", Structure.PeriodSpecific)]
    log = [EstimatorSpec("gcomp", Structure.Constant),
           EstimatorSpec("gcomp", Structure.PeriodSpecific)]
    if scenario in (1, 4):
        return lin + log
    if scenario == 2:
        return lin
    return lin[:1]


def estimand_for(spec: ScenarioSpec, est: EstimatorSpec, oracle: OracleResult
                 ) -> tuple[str, float]:
    if est.structure is Structure.Constant:
        if spec.design.kind is DesignKind.SteppedWedge:
            return "P-ATO", oracle.p_ato
        return oracle.average_label, oracle.p_avg
    return oracle.average_label, oracle.p_avg


def run_replicate(spec: ScenarioSpec, replicate: int, menu: list[EstimatorSpec],
                  jackknife: bool = True) -> list[tuple]:
    """Estimate, CR0 variance and JK variance for each estimator (NaN on failure)."""
    data = generate(spec, replicate)
    out = []
    for est in menu:
        try:
            rep = analyze(data, est.structure, "identity" if est.method == "linear" else "log",
                          jackknife=jackknife and est.jackknife)
            h = rep.headline.inference
            out.append((h.estimate, h.se_cr0 ** 2,
                        h.se_jk ** 2 if h.se_jk is not None else math.nan, ""))
        except WedgeFEError as exc:
            out.append((math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    return out


def _worker(args):
    spec, r, menu, jackknife = args
    return run_replicate(spec, r, menu, jackknife)


@dataclass
class StudyResult:
    spec: ScenarioSpec
    menu: list[EstimatorSpec]
    oracle: OracleResult
    estimates: np.ndarray      # reps x estimators x 3 (estimate, cr0, jk)
    failures: list[list[str]]
    table: list[dict]

    def table_csv(self) -> str:
        cols = ["scenario", "m", "J", "model", "estimand", "structure", "truth", "bias_pct",
                "emp_var", "mean_cr0", "mean_jk", "cp_cr0", "cp_jk", "mc_se_mean", "n_ok",
                "n_fail"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in self.table:
            buf.write(",".join(_fmt(row[c]) for c in cols) + "\n")
        return buf.getvalue()

    def replicates_csv(self) -> str:
        buf = io.StringIO()
        buf.write("replicate,model,structure,estimate,var_cr0,var_jk,error\n")
        for r in range(self.estimates.shape[0]):
            for k, est in enumerate(self.menu):
                e = self.estimates[r, k]
                msg = self.failures[r][k].replace(",", ";").replace("\n", " ")
                buf.write(f"{r},{est.label},{est.structure.value},{_fmt(e[0])},"
                          f"{_fmt(e[1])},{_fmt(e[2])},{msg}\n")
        return buf.getvalue()

    def plot_csv(self) -> str:
        metrics = ["bias_pct", "emp_var", "mean_cr0", "mean_jk", "cp_cr0", "cp_jk"]
        buf = io.StringIO()
        buf.write("estimator,estimand,metric,value\n")
        for row in self.table:
            name = f"{row['model']} ({row['structure']})"
            for mtr in metrics:
                buf.write(f"{name},{row['estimand']},{mtr},{_fmt(row[mtr])}\n")
        return buf.getvalue()

    def row(self, model: str, structure: str) -> dict:
        for r in self.table:
            if r["model"] == model and r["structure"] == structure:
                return r
        raise KeyError((model, structure))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def summarize(spec: ScenarioSpec, menu, oracle, est: np.ndarray, fails) -> list[dict]:
    m = spec.m
    zq = stats.norm.ppf(0.975)
    tq = stats.t.ppf(0.975, m - 2)
    rows = []
    for k, e in enumerate(menu):
        name, truth = estimand_for(spec, e, oracle)
        vals = est[:, k, :]
        ok = np.isfinite(vals[:, 0])
        th, v0, vj = vals[ok, 0], vals[ok, 1], vals[ok, 2]
        n_ok = int(ok.sum())
        mean = float(th.mean()) if n_ok else math.nan
        emp = float(th.var(ddof=1)) if n_ok > 1 else math.nan
        cp0 = float(np.mean(np.abs(th - truth) <= zq * np.sqrt(v0))) if n_ok else math.nan
        has_jk = np.isfinite(vj)
        cpj = (float(np.mean(np.abs(th[has_jk] - truth) <= tq * np.sqrt(vj[has_jk])))
               if has_jk.any() else math.nan)
        rows.append({
            "scenario": spec.scenario, "m": m, "J": spec.J, "model": e.label,
            "estimand": name, "structure": e.structure.value, "truth": float(truth),
            "mean": mean,
            "bias_pct": 100 * (mean - truth) / truth if truth else math.nan,
            "emp_var": emp, "mean_cr0": float(v0.mean()) if n_ok else math.nan,
            "mean_jk": float(vj[has_jk].mean()) if has_jk.any() else math.nan,
            "cp_cr0": cp0, "cp_jk": cpj,
            "mc_se_mean": math.sqrt(emp / n_ok) if n_ok > 1 else math.nan,
            "n_ok": n_ok, "n_fail": int((~ok).sum()),
        })
    return rows


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("WEDGEFE_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def run_study(spec: ScenarioSpec, menu: list[EstimatorSpec] | None = None, *,
              threads: int | None = None, jackknife: bool = True,
              oracle: OracleResult | None = None) -> StudyResult:
    """Replicate loop producing bias, variance and coverage summaries.

    Replicates are independent and seeded by index, so the output is
    identical for any ``threads`` value.
    """
    menu = default_menu(spec.scenario) if menu is None else list(menu)
    oracle = oracle_estimands(spec) if oracle is None else oracle
    threads = resolve_threads(threads)
    tasks = [(spec, r, menu, jackknife) for r in range(spec.replicates)]
    if threads > 1 and spec.replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        results = [_worker(t) for t in tasks]
    est = np.array([[r[:3] for r in res] for res in results], dtype=float)
    est = est.reshape(spec.replicates, len(menu), 3)
    fails = [[r[3] for r in res] for res in results]
    table = summarize(spec, menu, oracle, est, fails)
    return StudyResult(spec, menu, oracle, est, fails, table)


def with_params(spec: ScenarioSpec, **params) -> ScenarioSpec:
    return replace(spec, params={**spec.params, **params})
