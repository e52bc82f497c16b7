"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
Simulation studies run once per session and are shared between the
criteria that read them.
"""

import math
import time
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_design, random_trial, valid_structures
from wedgefe.design import DesignKind, Structure, TrialDesign, tilting_weights
from wedgefe.errors import SeparationError
from wedgefe.linear import fit_dummy_ols, fit_linear_fe
from wedgefe.loglink import fit_dummy_poisson, fit_poisson_fe, stacked_score
from wedgefe.sim import (EstimatorSpec, ScenarioSpec, oracle_estimands, run_study,
                         scenario4_mc_oracle, with_params)

SEED = 20261014
REPS = 1000


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


@lru_cache(maxsize=None)
def study(name: str):
    lin = EstimatorSpec("linear", Structure.Constant)
    lin_nojk = EstimatorSpec("linear", Structure.Constant, jackknife=False)
    if name == "s1-m100":
        spec = ScenarioSpec(1, 100, seed=SEED, replicates=REPS)
        menu = [lin, EstimatorSpec("gcomp", Structure.Constant, jackknife=False)]
    elif name == "s1-m6":
        spec = ScenarioSpec(1, 6, seed=SEED, replicates=REPS)
        menu = [lin]
    elif name == "s2-m6":
        spec = ScenarioSpec(2, 6, seed=SEED, replicates=REPS)
        menu = [lin_nojk]
    elif name == "s2-m100":
        spec = ScenarioSpec(2, 100, seed=SEED, replicates=REPS)
        menu = [lin_nojk]
    elif name == "s4-m100":
        spec = ScenarioSpec(4, 100, seed=SEED, replicates=REPS)
        menu = [lin_nojk]
    elif name == "s2-randomized":
        spec = with_params(ScenarioSpec(2, 20, seed=SEED, replicates=REPS), randomized=True)
        menu = [lin_nojk, EstimatorSpec("linear", Structure.Saturated, jackknife=False)]
    else:
        raise KeyError(name)
    return run_study(spec, menu)


def test_criterion_01_within_equals_dummy():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst, fits = 0.0, 0
    for _ in range(200):
        data = random_trial(rng)
        for s in valid_structures(data.design.kind):
            fit = fit_linear_fe(data, s)
            ref, _ = fit_dummy_ols(data, s)
            worst = max(worst, float(np.max(np.abs(fit.beta - ref))) if ref.size else 0.0)
            fits += 1
    elapsed = time.perf_counter() - t0
    record("1", worst < 1e-8 and elapsed < 30,
           f"200 instances ({fits} fits), max |within - dummy| = {worst:.2e} < 1e-8, "
           f"runtime {elapsed:.1f}s < 30s")


def test_criterion_02_conditional_poisson():
    # datasets without a finite MLE (separation) have nothing to compare and
    # are redrawn; the count of redraws is reported
    rng = np.random.default_rng(SEED + 2)
    done = redrawn = 0
    worst_stat = worst_beta = 0.0
    while done < 100:
        design = random_design(rng)
        data = random_trial(rng, design, outcome="count")
        s = valid_structures(design.kind)[rng.integers(len(valid_structures(design.kind)))]
        try:
            fit = fit_poisson_fe(data, s)
        except SeparationError:
            redrawn += 1
            continue
        mu = np.bincount(fit.data.cluster_index, weights=fit.fitted_means, minlength=fit.m)
        Y = np.bincount(fit.data.cluster_index, weights=fit.data.y, minlength=fit.m)
        keep = Y > 0
        worst_stat = max(worst_stat, float(np.max(np.abs(mu[keep] - Y[keep]) / Y[keep])))
        ref, _ = fit_dummy_poisson(data, s)
        worst_beta = max(worst_beta, float(np.max(np.abs(fit.beta - ref))))
        done += 1
    record("2", worst_stat < 1e-8 and worst_beta < 1e-6,
           f"100 datasets ({redrawn} separated draws replaced), max rel |sum mu - sum Y| = "
           f"{worst_stat:.2e} < 1e-8, max |beta - dummy MLE| = {worst_beta:.2e} < 1e-6")


def test_criterion_03_tilting_weights():
    four = tilting_weights(TrialDesign("sw", 4), exact=True)
    ok = four == [0, Fraction(2, 9), Fraction(2, 9), 0]
    ends = all(tilting_weights(TrialDesign("sw", J), exact=True)[0] == 0
               and tilting_weights(TrialDesign("sw", J), exact=True)[-1] == 0
               for J in range(3, 21))
    record("3", ok and ends, f"SW J=4 weights {[str(x) for x in four]}; "
           f"lambda_1 = lambda_J = 0 for J = 3..20: {ends}")


def test_criterion_04_scenario1_m100():
    res = study("s1-m100")
    lin = res.row("linear FE", "constant")
    gc = res.row("g-comp", "constant")
    ok = (abs(lin["bias_pct"]) < 1.0 and 0.93 <= lin["cp_jk"] <= 0.965
          and abs(gc["bias_pct"] - 0.157) < 1.0)
    record("4", ok,
           f"m=100 J=6, {REPS} reps: linear FE bias {lin['bias_pct']:.3f}% (|.| < 1), "
           f"JK-t coverage {lin['cp_jk']:.3f} in [0.93, 0.965], g-comp bias "
           f"{gc['bias_pct']:.3f}% within 1 point of 0.157%; failed fits "
           f"{lin['n_fail']}/{gc['n_fail']}")


def test_criterion_05_scenario1_m6():
    row = study("s1-m6").row("linear FE", "constant")
    ok = 0.78 <= row["cp_cr0"] <= 0.88 and 0.94 <= row["cp_jk"] <= 0.985
    record("5", ok, f"m=6, {REPS} reps: CR0-normal coverage {row['cp_cr0']:.3f} in "
           f"[0.78, 0.88], JK-t coverage {row['cp_jk']:.3f} in [0.94, 0.985]")


def test_criterion_06_scenario2_unbiased():
    small = study("s2-m6").row("linear FE", "constant")
    large = study("s2-m100").row("linear FE", "constant")
    ok = abs(small["bias_pct"]) < 3.0 and abs(large["bias_pct"]) < 0.5
    record("6", ok, f"confounded PB: bias {small['bias_pct']:.3f}% at m=6 (|.| < 3), "
           f"{large['bias_pct']:.4f}% at m=100 (|.| < 0.5)")


@pytest.mark.xfail(strict=True, reason="exact moments give 841.18 and 904.87, not the "
                   "reference values 843 and 907; recorded in the decisions ledger")
def test_criterion_07a_scenario4_rounding():
    o = oracle_estimands(ScenarioSpec(4, 100))
    got = (round(o.p_ato), round(o.p_avg))
    record("7a", got == (843, 907), f"closed form P-ATO {o.p_ato:.2f}, P-avg {o.p_avg:.2f} "
           f"round to {got}, target (843, 907) [expected failure, ledgered]")


def test_criterion_07b_scenario4_mc_agreement():
    spec = ScenarioSpec(4, 100)
    o = oracle_estimands(spec)
    mc = scenario4_mc_oracle(spec, n_draws=10 ** 7, seed=SEED)
    z_ato = abs(mc["P-ATO"][0] - o.p_ato) / mc["P-ATO"][1]
    z_avg = abs(mc["P-avg"][0] - o.p_avg) / mc["P-avg"][1]
    record("7b", z_ato < 3 and z_avg < 3,
           f"1e7-draw MC P-ATO {mc['P-ATO'][0]:.2f} +/- {mc['P-ATO'][1]:.2f} ({z_ato:.2f} SE), "
           f"P-avg {mc['P-avg'][0]:.2f} +/- {mc['P-avg'][1]:.2f} ({z_avg:.2f} SE)")


def test_criterion_07c_scenario4_linear_bias():
    row = study("s4-m100").row("linear FE", "constant")
    record("7c", abs(row["bias_pct"]) < 2.5,
           f"m=100, {REPS} reps: linear FE Constant bias {row['bias_pct']:.3f}% vs P-ATO "
           f"{row['truth']:.2f} (|.| < 2.5)")


def test_criterion_08_variance_concordance():
    row = study("s1-m100").row("linear FE", "constant")
    r0 = row["mean_cr0"] / row["emp_var"] - 1
    rj = row["mean_jk"] / row["emp_var"] - 1
    record("8", abs(r0) < 0.15 and abs(rj) < 0.15,
           f"empirical variance {row['emp_var']:.3e}; mean CR0 {row['mean_cr0']:.3e} "
           f"({100 * r0:+.1f}%), mean JK {row['mean_jk']:.3e} ({100 * rj:+.1f}%), within 15%")


def test_criterion_09_pb_structure_robustness():
    res = study("s2-randomized")
    est = res.estimates[:, :, 0]
    ok_rows = np.all(np.isfinite(est), axis=1)
    diff = est[ok_rows, 0] - est[ok_rows, 1]
    se = float(diff.std(ddof=1) / math.sqrt(diff.size))
    gap = float(diff.mean())
    c, s = res.row("linear FE", "constant"), res.row("linear FE", "saturated")
    record("9", abs(gap) < 3 * se,
           f"randomized PB m=20, {REPS} reps: Constant mean {c['mean']:.5f}, Saturated-average "
           f"mean {s['mean']:.5f}, paired difference {gap:.2e} with MC SE {se:.2e} (< 3 SE)")


def test_criterion_10_stacked_jacobian():
    rng = np.random.default_rng(SEED + 10)
    worst, n = 0.0, 0
    while n < 20:
        kind = list(DesignKind)[n % 3]
        J = {DesignKind.SteppedWedge: 4, DesignKind.ParallelBaseline: 3,
             DesignKind.Crossover: 4}[kind]
        data = random_trial(rng, TrialDesign(kind, J), m=int(rng.integers(4, 9)),
                            p=int(rng.integers(0, 3)), outcome="count", max_size=10)
        try:
            st = stacked_score(fit_poisson_fe(data, "constant"))
        except SeparationError:
            continue
        theta = st.theta_hat + 0.01 * rng.normal(size=st.dim)
        ana = st.jacobian(theta)
        num = np.zeros_like(ana)
        for k in range(st.dim):
            h = 1e-6 * max(1.0, abs(theta[k]))
            e = np.zeros(st.dim)
            e[k] = h
            num[:, :, k] = (st.psi(theta + e) - st.psi(theta - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(ana - num) / np.maximum(np.abs(num), 1.0))))
        n += 1
    record("10", worst < 1e-5, f"20 instances across SW/PB/XO, max relative error "
           f"|analytic - central difference| = {worst:.2e} < 1e-5")
