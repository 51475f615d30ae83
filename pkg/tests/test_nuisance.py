import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edid.errors import EdidWarning, EstimationError, ValidationError
from edid.nuisance import (NuisanceConfig, SieveBasis, _diff_matrix, conditional_covariance, default_grid,
                           fit_cell_means, fit_inverse_propensity, fit_nuisance, fit_outcome_regression,
                           fit_propensity_ratio, group_covariance, kernel_weights, monomial_exponents, n_monomials,
                           select_sieve_dim)
from edid.panel import NEVER, PanelDataset

from conftest import random_panel


def _with_x(rng, n=200, T=3, cohorts=(3,), d=1):
    return random_panel(rng, n=n, T=T, cohorts=cohorts, d=d)


# ---------------------------------------------------------------------------
# Sieve basis
# ---------------------------------------------------------------------------


def test_monomials_graded_order():
    assert monomial_exponents(2, 6) == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    assert monomial_exponents(1, 4) == ((0,), (1,), (2,), (3,))


@pytest.mark.parametrize("d, deg", [(1, 2), (2, 2), (3, 3)])
def test_monomial_count(d, deg):
    assert len(monomial_exponents(d, n_monomials(d, deg))) == math.comb(d + deg, deg)


def test_basis_first_column_is_constant(rng):
    X = rng.normal(size=(10, 2))
    P = SieveBasis.from_data(X)(X, 3)
    assert np.all(P[:, 0] == 1.0)
    assert P[:, 1].mean() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Outcome regressions
# ---------------------------------------------------------------------------


def test_cell_means_toy(toy):
    treated, control = fit_cell_means(toy, [(2, 2, 1), (NEVER, 2, 1)])
    assert treated.value == 4.0
    assert control.value == 1.0


def test_cell_means_antisymmetric(rng):
    ds = random_panel(rng)
    a, b = fit_cell_means(ds, [(3, 4, 2), (3, 2, 4)])
    assert a.value == -b.value


def test_cell_means_match_loop(rng):
    ds = random_panel(rng, T=6, cohorts=(3, 5))
    for g in (3.0, 5.0, NEVER):
        for t in range(1, 7):
            for tp in range(1, 7):
                vals = [ds.outcomes[i, t - 1] - ds.outcomes[i, tp - 1] for i in range(ds.n) if ds.cohort[i] == g]
                assert fit_cell_means(ds, [(g, t, tp)])[0].value == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_constant_regression_equals_cell_mean(rng):
    ds = _with_x(rng)
    m = fit_outcome_regression(ds, 3, 3, 1, K=1)
    assert m(ds.covariates)[0] == pytest.approx(fit_cell_means(ds, [(3, 3, 1)])[0].value, abs=1e-12)


@pytest.mark.parametrize("degree", [1, 2])
def test_regression_recovers_polynomial(rng, degree):
    n, d = 80, 2
    X = rng.normal(size=(n, d))
    signal = 1 + 2 * X[:, 0] - X[:, 1] + (0.5 * X[:, 0] * X[:, 1] if degree == 2 else 0)
    Y = np.column_stack([np.zeros(n), signal])
    ds = PanelDataset(range(n), [1, 2], Y, np.full(n, NEVER), covariates=X)
    m = fit_outcome_regression(ds, NEVER, 2, 1, K=n_monomials(d, degree))
    assert np.max(np.abs(m(X) - signal)) < 1e-8


def test_regression_errors(rng):
    ds = random_panel(rng)
    with pytest.raises(ValidationError) as exc:
        fit_outcome_regression(ds, 3, 3, 1, K=2)
    assert exc.value.code == "NO_COVARIATES"
    ds = random_panel(rng, n=12, d=1)
    with pytest.raises(EstimationError) as exc:
        fit_outcome_regression(ds, 3, 3, 1, K=20)
    assert exc.value.code == "SMALL_COHORT"


# ---------------------------------------------------------------------------
# Propensity ratios
# ---------------------------------------------------------------------------


def test_ratio_count_example():
    G = np.array([2.0] * 30 + [NEVER] * 60)
    ds = PanelDataset(range(90), [1, 2], np.zeros((90, 2)), G)
    assert fit_propensity_ratio(ds, 2, NEVER).value == 0.5


def test_ratio_constant_basis_is_count_ratio(rng):
    ds = _with_x(rng, cohorts=(2, 3))
    r = fit_propensity_ratio(ds, 2, NEVER, K=1)
    n2, ninf = np.sum(ds.cohort == 2), np.sum(ds.cohort == NEVER)
    assert np.max(np.abs(r(ds.covariates) - n2 / ninf)) < 1e-12


def test_self_ratio_is_one(rng):
    ds = _with_x(rng)
    assert fit_propensity_ratio(ds, 3, 3, K=1).value == 1.0


@pytest.mark.filterwarnings("ignore::edid.errors.EdidWarning")
def test_ratio_mse_falls_with_sieve_dimension():
    rng = np.random.default_rng(7)
    n = 2000
    x = rng.normal(size=n)
    logits = np.column_stack([np.zeros(n), 0.8 * x - 0.3])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    G = np.where(rng.random(n) < p[:, 1], 2.0, NEVER)
    ds = PanelDataset(range(n), [1, 2], np.zeros((n, 2)), G, covariates=x[:, None])
    truth = p[:, 1] / p[:, 0]
    mse = [np.mean((fit_propensity_ratio(ds, 2, NEVER, K=K)(ds.covariates) - truth) ** 2) for K in (1, 2, 4)]
    assert mse[0] > mse[1] > mse[2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000), K=st.integers(2, 4))
def test_ratio_minimises_convex_loss(seed, K):
    rng = np.random.default_rng(seed)
    ds = _with_x(rng, n=60, cohorts=(2,))
    r = fit_propensity_ratio(ds, 2, NEVER, K=K, floor=-np.inf)
    P = r.basis(ds.covariates, K)
    num, den = ds.indicator(2), ds.indicator(NEVER)

    def loss(b):
        f = P @ b
        return np.mean(den * f ** 2 - 2 * num * f)

    base = loss(r.coef)
    for _ in range(10):
        assert loss(r.coef + 1e-3 * rng.normal(size=K)) >= base - 1e-12


def test_selection_large_penalty_picks_smallest(rng):
    ds = _with_x(rng, cohorts=(2,))
    assert select_sieve_dim(ds, 2, NEVER, grid=(1, 2, 3), C_n=1e9).K == 1


def test_selection_ties_go_to_smaller_K(rng):
    ds = _with_x(rng, cohorts=(2,))
    # identical numerator and denominator: the constant fits exactly at every K
    sel = select_sieve_dim(ds, 2, 2, grid=(1, 2, 3), C_n=0.0)
    assert sel.K == 1


@pytest.mark.parametrize("crit", ["aic", "bic", 3.0])
def test_selection_returns_grid_member(rng, crit):
    ds = _with_x(rng, cohorts=(2,))
    sel = select_sieve_dim(ds, 2, NEVER, grid=(1, 2, 3), C_n=crit)
    assert sel.K in (1, 2, 3) and len(sel.table) == 3


def test_default_grid():
    assert default_grid(1000, 1) == tuple(range(1, 11))
    assert default_grid(1000, 0) == (1,)


def test_inverse_propensity_constant(rng):
    ds = random_panel(rng, n=30)
    r = fit_inverse_propensity(ds, NEVER)
    assert r.value == pytest.approx(30 / np.sum(ds.cohort == NEVER), abs=1e-12)
    ds_all = PanelDataset(range(5), [1, 2], np.zeros((5, 2)), [NEVER] * 5)
    assert fit_inverse_propensity(ds_all, NEVER).value == 1.0


def test_ratio_floor_counts_and_warns():
    rng = np.random.default_rng(3)
    n = 300
    x = rng.normal(size=n)
    G = np.where(x > 0.8, 2.0, NEVER)
    ds = PanelDataset(range(n), [1, 2], np.zeros((n, 2)), G, covariates=x[:, None])
    with pytest.warns(EdidWarning):
        r = fit_propensity_ratio(ds, 2, NEVER, K=2, floor=0.01)
    assert r.n_floored > 0
    assert np.min(r(ds.covariates)) >= 0.01


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------


def test_group_covariance_two_unit_example():
    Y = np.array([[0.0, 0.0, 0.0], [0.0, 2.0, 4.0]])
    ds = PanelDataset(range(2), [1, 2, 3], Y, [NEVER, NEVER])
    S = group_covariance(ds, NEVER, [(2, 1), (3, 1)])
    assert S[0, 1] == pytest.approx(2.0)


def test_group_covariance_constant_is_zero():
    ds = PanelDataset(range(3), [1, 2, 3], np.ones((3, 3)), [NEVER] * 3)
    assert np.all(group_covariance(ds, NEVER, [(2, 1), (3, 2)]) == 0)


def test_group_covariance_matches_loop(rng):
    ds = random_panel(rng, T=4)
    pairs = [(4, 1), (4, 2), (3, 1)]
    S = group_covariance(ds, 3, pairs)
    rows = [i for i in range(ds.n) if ds.cohort[i] == 3]
    for a, (t1, s1) in enumerate(pairs):
        for b, (t2, s2) in enumerate(pairs):
            u = [ds.outcomes[i, t1 - 1] - ds.outcomes[i, s1 - 1] for i in rows]
            v = [ds.outcomes[i, t2 - 1] - ds.outcomes[i, s2 - 1] for i in rows]
            mu, mv = sum(u) / len(u), sum(v) / len(v)
            ref = sum((x - mu) * (y - mv) for x, y in zip(u, v)) / len(u)
            assert S[a, b] == pytest.approx(ref, abs=1e-12)


def test_group_covariance_single_unit():
    ds = PanelDataset(range(3), [1, 2], np.zeros((3, 2)), [2, NEVER, NEVER])
    with pytest.raises(EstimationError):
        group_covariance(ds, 2, [(2, 1)])


def test_kernel_weights_rows_sum_to_one(rng):
    W, empty = kernel_weights(rng.normal(size=(5, 2)), rng.normal(size=(20, 2)), 0.5)
    assert np.allclose(W.sum(axis=1), 1.0) and not empty.any()


def test_kernel_weights_zero_mass_falls_back():
    W, empty = kernel_weights(np.array([[100.0]]), np.array([[0.0], [1.0]]), 1e-3)
    assert empty[0] and np.allclose(W, 0.5)


def test_nw_huge_bandwidth_equals_group_covariance(rng):
    ds = _with_x(rng, n=80, T=4)
    fits = fit_nuisance(ds, NuisanceConfig(mode="cond", outcome_degree=0))
    S = group_covariance(ds, NEVER, [(4, 1), (4, 2)])
    c = conditional_covariance(ds, fits, NEVER, 4, 1, 2, ds.covariates[0], h=1e6)
    assert c == pytest.approx(S[0, 1], abs=1e-8)


def test_nw_duplicate_covariate_cell():
    # units share x in pairs; a tiny bandwidth isolates each pair
    X = np.repeat([0.0, 5.0, 10.0], 2)[:, None]
    Y = np.array([[0, 1, 3], [0, 3, 1], [0, 2, 2], [0, 6, 6], [0, 0, 5], [0, 4, 1]], dtype=float)
    ds = PanelDataset(range(6), [1, 2, 3], Y, [NEVER] * 6, covariates=X)
    fits = fit_nuisance(ds, NuisanceConfig(mode="cond", outcome_degree=0))
    m2, m3 = fits.m_at(NEVER, 3, 1, X[:1])[0], fits.m_at(NEVER, 3, 2, X[:1])[0]
    ea = (Y[:2, 2] - Y[:2, 0]) - m2
    eb = (Y[:2, 2] - Y[:2, 1]) - m3
    c = conditional_covariance(ds, fits, NEVER, 3, 1, 2, [0.0], h=1e-3)
    assert c == pytest.approx(np.mean(ea * eb), abs=1e-12)


# ---------------------------------------------------------------------------
# Bundled first stage
# ---------------------------------------------------------------------------


def test_uncond_fit_matches_cell_quantities(rng):
    ds = random_panel(rng, T=5, cohorts=(3, 4))
    f = fit_nuisance(ds)
    assert f.m(3.0, 4, 1)[0] == pytest.approx(fit_cell_means(ds, [(3, 4, 1)])[0].value, abs=1e-12)
    pairs = [(t, 1) for t in range(2, 6)]
    C = _diff_matrix(5, pairs)
    assert np.allclose(C.T @ f.second_moments(NEVER) @ C, group_covariance(ds, NEVER, pairs), atol=1e-12)
    assert f.ratio(3.0, NEVER)[0] == pytest.approx(np.sum(ds.cohort == 3) / np.sum(ds.cohort == NEVER))
    assert f.ratio(3.0, 3.0)[0] == 1.0


@pytest.mark.filterwarnings("ignore::edid.errors.EdidWarning")
def test_cond_fit_shapes(rng):
    ds = _with_x(rng, n=120, T=4, cohorts=(3,))
    f = fit_nuisance(ds, NuisanceConfig(mode="cond", criterion="bic"))
    assert f.second_moments(NEVER).shape == (120, 4, 4)
    assert f.ratio(3.0, NEVER).shape == (120,)
    assert np.all(f.inverse_propensity(NEVER) > 0)


def test_cond_mode_requires_covariates(rng):
    with pytest.raises(ValidationError) as exc:
        fit_nuisance(random_panel(rng), NuisanceConfig(mode="cond"))
    assert exc.value.code == "NO_COVARIATES"


def test_config_rejects_unknown_mode():
    with pytest.raises(ValidationError):
        NuisanceConfig(mode="semiparametric")


def test_missing_cohort_raises(rng):
    f = fit_nuisance(random_panel(rng))
    with pytest.raises(EstimationError) as exc:
        f.m(7.0, 2, 1)
    assert exc.value.code == "MISSING_NUISANCE"

