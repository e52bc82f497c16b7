import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_trial, valid_structures
from wedgefe.data import TrialData, restrict_to_structure
from wedgefe.design import Structure, TrialDesign, duration_weight_blocks, tilting_weights
from wedgefe.errors import DataError, SeparationError
from wedgefe.loglink import (_Problem, fit_dummy_poisson, fit_poisson_fe, g_compute,
                             gcomp_leave_one_out, measure_value, stacked_score,
                             summary_measure)


def _count_trial(seed, **kw):
    rng = np.random.default_rng(seed)
    return random_trial(rng, outcome="count", **kw)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_concentrated_fit_matches_dummy_mle(seed):
    data = _count_trial(seed, max_size=8)
    for s in valid_structures(data.design.kind):
        try:
            fit = fit_poisson_fe(data, s)
        except SeparationError:
            continue
        ref, alpha = fit_dummy_poisson(data, s)
        np.testing.assert_allclose(fit.beta, ref, atol=1e-6, rtol=0)
        ok = np.isfinite(alpha)
        np.testing.assert_allclose(fit.alpha[ok], alpha[ok], atol=1e-6)


def test_sufficient_statistic_per_cluster():
    data = _count_trial(5, m=8, p=2)
    fit = fit_poisson_fe(data, "duration")
    mu = np.bincount(fit.data.cluster_index, weights=fit.fitted_means, minlength=fit.m)
    Y = np.bincount(fit.data.cluster_index, weights=fit.data.y, minlength=fit.m)
    np.testing.assert_allclose(mu, Y, rtol=1e-10)


def test_alpha_closed_form():
    data = _count_trial(6, m=6, p=1)
    fit = fit_poisson_fe(data)
    Q, names = fit.data.design_matrix(fit.structure)
    Q = Q[:, [names.index(n) for n in fit.names]]
    e = np.exp(Q @ fit.beta)
    num = np.bincount(fit.data.cluster_index, weights=fit.data.y)
    den = np.bincount(fit.data.cluster_index, weights=e)
    np.testing.assert_allclose(fit.alpha, np.log(num / den), rtol=1e-12)


def test_two_cell_hand_solution():
    # one cluster, one row per period, totals (2, 4): beta_period2 = ln 2;
    # Newton stops once the score is below 1e-8
    Q = np.array([[0.0], [1.0]])
    prob = _Problem.build(Q, np.array([2.0, 4.0]), np.array([0, 0]), 1)
    beta, _, gnorm = prob.newton(np.zeros(1))
    assert gnorm < 1e-8
    assert beta[0] == pytest.approx(math.log(2), abs=1e-8)
    assert prob.alpha(beta)[0] == pytest.approx(math.log(2), abs=1e-8)


def test_constant_outcome_gives_zero_coefficients(rng):
    data = random_trial(rng, TrialDesign("sw", 4), m=6, p=1)
    data = data.with_outcome(np.full(data.n, 3.0))
    fit = fit_poisson_fe(data, "period")
    np.testing.assert_allclose(fit.beta, 0, atol=1e-10)
    np.testing.assert_allclose(fit.alpha, math.log(3), atol=1e-10)
    rep = g_compute(fit)
    np.testing.assert_allclose(rep.deltas, 0, atol=1e-10)


def test_zero_outcome_cluster_is_excluded_with_warning():
    data = _count_trial(11, m=7, p=0, design=TrialDesign("pb", 3))
    c = int(data.cluster_ids[0])
    y = data.y.copy()
    y[data.cluster == c] = 0
    with pytest.warns(UserWarning, match="no events"):
        fit = fit_poisson_fe(data.with_outcome(y))
    assert fit.excluded == [c]


def test_separation_is_reported():
    design = TrialDesign("pb", 2)
    cl = np.repeat([1, 2, 3, 4], 6)
    pe = np.tile([1, 1, 1, 2, 2, 2], 4)
    y = np.where((pe == 2) & np.isin(cl, [3, 4]), 0.0, 2.0)
    data = TrialData.from_arrays(design, cl, pe, y, sequence_of={1: 0, 2: 0, 3: 2, 4: 2})
    with pytest.raises(SeparationError, match="Z"):
        fit_poisson_fe(data)


def test_negative_outcome_rejected(rng):
    data = random_trial(rng, m=4)
    with pytest.raises(DataError, match="nonnegative"):
        fit_poisson_fe(data.with_outcome(data.y - 100))


def _brute_force_mu(fit, j, arm):
    """Average of exp(alpha_i + u(j, arm) beta + x beta_X) over every row."""
    data = fit.data
    s = fit.structure
    Q, names = data.design_matrix(s)
    Q = Q[:, [names.index(n) for n in fit.names]]
    cf = Q.copy()
    periods = data.design.analysis_periods(s)
    n_period = len(periods) - 1
    cf[:, :n_period] = 0
    if j != periods[0]:
        cf[:, fit.names.index(f"period{j}")] = 1
    trt = [k for k, n in enumerate(fit.names) if n == "Z" or n.startswith("Z_")]
    cf[:, trt] = 0
    if arm != 0:
        cf[:, trt[fit.cells.index(arm)]] = 1
    return float(np.mean(np.exp(fit.alpha[data.cluster_index] + cf @ fit.beta)))


@pytest.mark.parametrize("kind,J,structure", [
    ("sw", 4, "constant"), ("sw", 5, "duration"), ("sw", 5, "period"), ("sw", 4, "saturated"),
    ("pb", 3, "constant"), ("pb", 4, "duration"), ("xo", 4, "constant"), ("xo", 4, "duration"),
])
def test_standardized_means_match_brute_force(kind, J, structure):
    data = _count_trial(21, design=TrialDesign(kind, J), m=8, p=2)
    fit = fit_poisson_fe(data, structure)
    rep = g_compute(fit)
    for (j, arm), v in rep.mu_hat.items():
        assert v == pytest.approx(_brute_force_mu(fit, j, arm), rel=1e-12)


def test_constant_contrast_by_hand():
    data = _count_trial(2, design=TrialDesign("sw", 4), m=9, p=1)
    fit = fit_poisson_fe(data)
    rep = g_compute(fit)
    d = {j: rep.mu_hat[(j, "Z")] - rep.mu_hat[(j, 0)] for j in (2, 3)}
    expected = (2 / 9 * d[2] + 2 / 9 * d[3]) / (4 / 9)
    assert rep.deltas[0] == pytest.approx(expected, rel=1e-13)
    np.testing.assert_allclose(rep.weights, tilting_weights(data.design))


def test_duration_contrast_solves_weighted_system():
    data = _count_trial(3, design=TrialDesign("sw", 5), m=8, p=1)
    fit = fit_poisson_fe(data, "duration")
    rep = g_compute(fit)
    D = data.design.n_durations
    B = np.zeros((D, D))
    rhs = np.zeros(D)
    N = data.sizes()
    for i, z in enumerate(data.z):
        lam, A = duration_weight_blocks(data.design, int(z), N[i])
        for d in range(1, D + 1):
            diff = np.array([rep.mu_hat[(j, d)] - rep.mu_hat[(j, 0)] for j in range(1, 6)])
            B += lam[d - 1] @ A[d - 1]
            rhs += lam[d - 1] @ diff
    np.testing.assert_allclose(B @ rep.deltas, rhs, rtol=1e-10, atol=1e-12)


def test_period_and_saturated_contrasts_are_plain_differences():
    data = _count_trial(4, design=TrialDesign("sw", 5), m=8, p=0)
    for s in ("period", "saturated"):
        rep = g_compute(fit_poisson_fe(data, s))
        for cell, dlt in zip(rep.cells, rep.deltas):
            j = cell if s == "period" else cell[0]
            assert dlt == pytest.approx(rep.mu_hat[(j, cell)] - rep.mu_hat[(j, 0)])


def test_summary_measures():
    assert measure_value("ratio", 0.2, 0.1) == pytest.approx(2.0)
    assert measure_value("log-odds", 0.2, 0.1) == pytest.approx(math.log(2.25))
    assert measure_value("difference", 0.2, 0.1) == pytest.approx(0.1)
    with pytest.raises(DataError):
        measure_value("log-odds", 1.5, 0.1)
    data = _count_trial(8, design=TrialDesign("sw", 4), m=6, p=0)
    fit = fit_poisson_fe(data, "saturated")
    diff = summary_measure(fit, f="difference")
    rep = g_compute(fit)
    for cell, v in zip(rep.cells, rep.deltas):
        assert diff[cell] == v
    with pytest.raises(ValueError):
        summary_measure(fit_poisson_fe(data, "period"))


def test_gcomp_leave_one_out_matches_refit():
    data = _count_trial(9, design=TrialDesign("sw", 4), m=12, p=1)
    fit = fit_poisson_fe(data, "duration")
    loo = gcomp_leave_one_out(fit)
    for i, c in enumerate(data.cluster_ids):
        ref = g_compute(fit_poisson_fe(data.drop_cluster(int(c)), "duration"))
        np.testing.assert_allclose(loo[i], ref.deltas, rtol=1e-7)


@pytest.mark.parametrize("structure", ["constant", "duration", "period", "saturated"])
def test_stacked_score_sums_to_zero(structure):
    data = _count_trial(13, design=TrialDesign("sw", 4), m=9, p=1)
    st_ = stacked_score(fit_poisson_fe(data, structure))
    total = st_.psi(st_.theta_hat).sum(axis=0)
    assert np.max(np.abs(total)) < 1e-6


def test_restricted_data_is_used_for_period_fits():
    data = _count_trial(14, design=TrialDesign("sw", 4), m=6, p=0)
    fit = fit_poisson_fe(data, "period")
    assert fit.data.n == restrict_to_structure(data, "period").n
    assert 4 not in fit.data.period
