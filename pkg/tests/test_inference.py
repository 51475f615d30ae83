import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edid.errors import EstimationError, ValidationError
from edid.estimators import EfficientModel, estimate_cs, estimate_es_avg
from edid.inference import (BootstrapConfig, are, attach_bootstrap, cluster_bootstrap, hausman_statistic,
                            hausman_test, holm, holm_incremental_selection, multiplier_bootstrap, placebo_pretrends,
                            simultaneous_bands)
from edid.panel import NEVER, PanelDataset
from edid.simulation import StaggeredDgp, gen_staggered

from conftest import random_panel


def _staggered(seed, n=300, rho=0.0):
    return gen_staggered(StaggeredDgp(n=n, rho=rho), seed)[0]


# ---------------------------------------------------------------------------
# Relative efficiency
# ---------------------------------------------------------------------------


def test_are_example():
    assert are(1.0, 1.284) == pytest.approx(1.65, abs=5e-3)
    assert are(2.0, 2.0) == 1.0


# ---------------------------------------------------------------------------
# Hausman
# ---------------------------------------------------------------------------


def _orthonormal_influence(n=8, k=3):
    H = np.array([[1, 1, 1, 1, 1, 1, 1, 1], [1, -1, 1, -1, 1, -1, 1, -1], [1, 1, -1, -1, 1, 1, -1, -1],
                  [1, -1, -1, 1, 1, -1, -1, 1]], dtype=float).T
    return H[:n, 1:k + 1]  # E_n[D D'] = I


def test_hausman_critical_value_gives_five_percent():
    D = _orthonormal_influence()
    d = np.array([np.sqrt(7.815 / 8), 0.0, 0.0])
    res = hausman_statistic(d, D)
    assert res.statistic == pytest.approx(7.815, abs=1e-10)
    assert res.df == 3
    assert res.pvalue == pytest.approx(0.05, abs=1e-3)
    assert not res.repaired


def test_hausman_zero_when_identical():
    res = hausman_statistic(np.zeros(3), np.zeros((10, 3)))
    assert res.statistic == 0.0 and res.pvalue == 1.0 and not res.reject


def test_hausman_rank_deficient_is_repaired():
    D = _orthonormal_influence()[:, :2]
    D = np.column_stack([D, D[:, 0]])
    res = hausman_statistic(np.array([0.1, 0.2, 0.1]), D)
    assert res.repaired and res.df == 2


def test_hausman_on_panel_and_relabel_invariance():
    ds = _staggered(1)
    res = hausman_test(ds)
    assert res.statistic >= 0 and res.df == len(res.detail)
    relabelled = dataclasses.replace(ds, periods=tuple(2000 + 3 * p for p in ds.periods))
    assert hausman_test(relabelled).statistic == pytest.approx(res.statistic, rel=1e-10)
    d = res.to_dict()
    assert set(d) == {"stat", "df", "pvalue", "repaired", "alpha", "reject", "detail"}


def test_hausman_identical_models_give_zero(rng):
    # one cohort with baseline g-1 only: both estimators use the same single entry
    ds = random_panel(rng, n=40, T=3, cohorts=(2,))
    res = hausman_test(ds)
    assert res.statistic == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Holm
# ---------------------------------------------------------------------------


def test_holm_hand_example():
    assert holm([0.001, 0.2], 0.05).tolist() == [True, False]
    assert holm([0.2, 0.001], 0.05).tolist() == [False, True]


@pytest.mark.parametrize("p, expected", [([1.0, 1.0, 1.0], [False] * 3), ([0.0, 0.0], [True, True]),
                                         ([0.01, 0.04, 0.03], [True, False, False]),
                                         ([0.01, 0.02, 0.025], [True, True, True])])
def test_holm_cases(p, expected):
    assert holm(p, 0.05).tolist() == expected


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_holm_monotone_in_alpha(p, a1, a2):
    lo, hi = sorted((a1, a2))
    assert np.all(holm(p, lo) <= holm(p, hi))


def test_holm_selection_partitions_candidates():
    ds = _staggered(2, n=300)
    res = holm_incremental_selection(ds, 0.05)
    assert set(res.selected) | set(res.rejected) == set(res.candidates)
    assert res.pvalues == sorted(res.pvalues)
    assert res.to_dict()["alpha"] == 0.05


# ---------------------------------------------------------------------------
# Bootstrap and bands
# ---------------------------------------------------------------------------


def test_bootstrap_config_validation():
    with pytest.raises(ValidationError):
        BootstrapConfig(B=1)
    with pytest.raises(ValidationError):
        BootstrapConfig(scheme="wild")


def test_cluster_bootstrap_is_deterministic_across_threads(rng):
    ds = random_panel(rng, n=40, T=4, cohorts=(3,))
    fn = lambda d: estimate_cs(d, 3, 4)  # noqa: E731
    a = cluster_bootstrap(ds, fn, BootstrapConfig(B=30, seed=4))
    b = cluster_bootstrap(ds, fn, BootstrapConfig(B=30, seed=4, threads=3))
    assert np.array_equal(a.draws, b.draws)
    c = cluster_bootstrap(ds, fn, BootstrapConfig(B=30, seed=5))
    assert not np.array_equal(a.draws, c.draws)


def test_bootstrap_degenerate_panel_has_zero_se():
    Y = np.tile([0.0, 1.0, 2.0], (10, 1))
    ds = PanelDataset(range(10), [1, 2, 3], Y, [3] * 5 + [NEVER] * 5)
    res = cluster_bootstrap(ds, lambda d: estimate_cs(d, 3, 3), BootstrapConfig(B=20))
    assert np.all(res.se == 0)


def test_bootstrap_se_close_to_analytic():
    ds = _staggered(3, n=400)
    est = estimate_es_avg(ds)
    res = cluster_bootstrap(ds, estimate_es_avg, BootstrapConfig(B=200, seed=1))
    assert res.se[0] == pytest.approx(est.se, rel=0.25)
    attach_bootstrap(est, res, "percentile")
    d = est.to_dict()
    assert d["se_bootstrap"] == res.se[0]
    assert (d["ci_lo"], d["ci_hi"]) == tuple(res.ci_percentile[0])


def test_multiplier_se_close_to_analytic(rng):
    ds = random_panel(rng, n=200, T=4, cohorts=(3,))
    est = estimate_cs(ds, 3, 4)
    res = multiplier_bootstrap([est], BootstrapConfig(scheme="multiplier", B=4000, seed=2))
    assert res.se[0] == pytest.approx(est.se, rel=0.06)


def test_bands_single_estimate_is_pointwise(rng):
    est = estimate_cs(random_panel(rng, n=60, T=4, cohorts=(3,)), 3, 4)
    b = simultaneous_bands([est])
    lo, hi = est.ci()
    assert b.lower[0] == pytest.approx(lo) and b.upper[0] == pytest.approx(hi)


def test_bands_contain_pointwise_intervals():
    ds = _staggered(4)
    model = EfficientModel(ds)
    ests = [model.target(e=e) for e in model.idx.event_times]
    b = simultaneous_bands(ests, B=500, seed=1)
    assert b.critical_value >= 1.959
    for j, e in enumerate(ests):
        lo, hi = e.ci()
        assert b.lower[j] <= lo + 1e-12 and b.upper[j] >= hi - 1e-12


# ---------------------------------------------------------------------------
# Placebo
# ---------------------------------------------------------------------------


def test_placebo_rejects_post_periods(rng):
    ds = random_panel(rng, n=40, T=5, cohorts=(4,))
    with pytest.raises(EstimationError) as exc:
        placebo_pretrends(ds, 4, 4)
    assert exc.value.code == "NOT_A_PLACEBO"


def test_placebo_default_baseline_and_hand_value(rng):
    ds = random_panel(rng, n=40, T=5, cohorts=(4,))
    est = placebo_pretrends(ds, 4, 2)
    assert est.weights[0]["base_t"] == 3
    G, Gi = ds.cohort == 4, ds.cohort == NEVER
    dy = ds.outcomes[:, 1] - ds.outcomes[:, 2]
    assert est.point == pytest.approx(dy[G].mean() - dy[Gi].mean(), abs=1e-12)
    assert placebo_pretrends(ds, 4, 3).weights[0]["base_t"] == 2


@pytest.mark.parametrize("comparison", ["never", "notyet"])
def test_placebo_near_zero_under_parallel_trends(comparison):
    ds = _staggered(5, n=400)
    est = placebo_pretrends(ds, 8, 5, comparison=comparison)
    assert abs(est.point) < 4 * est.se
