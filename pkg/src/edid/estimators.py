"""Point estimators with influence-function standard errors.

Efficient estimators for ``ATT(g, t)``, ``ES(e)`` and ``ES_avg``; the
baselines used for comparison (static and dynamic TWFE, group-time DiD with
never-treated or not-yet-treated comparisons, imputation); and the
instrumented ``LATT``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import stats

from .design import IfIndex, PtRegime, if_index
from .eif import (analytic_se, eif_att, eif_es, generated_outcomes, omega_direct, omega_star,
                  optimal_weights)
from .errors import EstimationError, ValidationError
from .nuisance import (NuisanceConfig, NuisanceFit, _outcome_K, _solve_psd, fit_nuisance,
                       fit_propensity_ratio)
from .panel import NEVER, PanelDataset, cohort_index, format_cohort

Z975 = float(stats.norm.ppf(0.975))
WEAK_TOL = 1e-8


@dataclass
class Estimate:
    """A point estimate with its per-unit influence function.

    ``se`` is ``sqrt(mean(eif^2) / n)``. ``weights`` holds one row per stacked
    entry: ``target_g, target_t, comp_g, base_t, weight`` (unit-averaged weight
    in conditional mode).
    """

    estimand: str
    point: float
    eif: np.ndarray
    se: float
    weights: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    se_bootstrap: Optional[float] = None
    ci_bootstrap: Optional[tuple] = None

    @property
    def n(self) -> int:
        return int(self.eif.shape[0])

    def ci(self, level: float = 0.95) -> tuple:
        z = float(stats.norm.ppf(0.5 + level / 2))
        return (self.point - z * self.se, self.point + z * self.se)

    def to_dict(self, periods: Optional[tuple] = None) -> dict:
        """JSON-ready summary; ``periods`` maps internal periods back to labels."""

        def lab(t):
            if t is None or (isinstance(t, float) and math.isinf(t)):
                return "inf"
            return periods[int(t) - 1] if periods else int(t)

        lo, hi = self.ci()
        if self.ci_bootstrap is not None:
            lo, hi = self.ci_bootstrap
        out = {
            "estimand": self.estimand,
            "point": self.point,
            "se_analytic": self.se,
            "ci_lo": lo,
            "ci_hi": hi,
            "n": self.n,
            "weights": [
                {"target_g": lab(r["target_g"]), "target_t": lab(r["target_t"]),
                 "comp_g": lab(r["comp_g"]), "base_t": lab(r["base_t"]), "weight": r["weight"]}
                for r in self.weights
            ],
        }
        if self.se_bootstrap is not None:
            out["se_bootstrap"] = self.se_bootstrap
        return out


def _estimate(label, point, eif, weights=(), **meta) -> Estimate:
    eif = np.asarray(eif, dtype=float)
    return Estimate(label, float(point), eif, analytic_se(eif), list(weights), meta)


def write_weight_table(estimates, path) -> None:
    """CSV of unit-averaged efficiency weights (columns for heatmaps)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target_g", "target_t", "comp_g", "base_t", "mean_weight"])
        for est in estimates:
            for r in est.weights:
                wr.writerow([format_cohort(r["target_g"]), r["target_t"], format_cohort(r["comp_g"]),
                             r["base_t"], repr(float(r["weight"]))])


# ---------------------------------------------------------------------------
# Aggregation shared by every group-time estimator
# ---------------------------------------------------------------------------


class _GroupTime:
    """Caches ``(att, eif, weight rows)`` per ``(g, t)`` and aggregates them."""

    def __init__(self, ds: PanelDataset, att_fn: Callable, group=None, label="att"):
        self.ds = ds
        self.group = ds.cohort if group is None else group
        self.idx = cohort_index(ds, self.group)
        self._fn = att_fn
        self._cache: dict = {}
        self.label = label

    def att(self, g: int, t: int) -> tuple:
        key = (int(g), int(t))
        if key not in self._cache:
            self._cache[key] = self._fn(*key)
        return self._cache[key]

    def att_estimate(self, g: int, t: int) -> Estimate:
        a, e, rows = self.att(g, t)
        est = _estimate(f"{self.label}({g},{t})", a, e, rows)
        est.components = {(g, t): a}
        return est

    def es(self, e: int) -> tuple:
        cohorts = self.idx.treated_at(e) if e >= 0 else ()
        if not cohorts:
            raise EstimationError("NO_COHORT_AT_HORIZON", f"no treated cohort is observed at event time {e}")
        atts, eifs, rows = {}, {}, []
        for g in cohorts:
            a, f, r = self.att(g, g + e)
            atts[g], eifs[g] = a, f
            rows.extend(r)
        point, eif = eif_es(atts, eifs, self.group, e, self.idx)
        return point, eif, rows, {(g, g + e): atts[g] for g in cohorts}

    def es_estimate(self, e: int) -> Estimate:
        p, f, rows, comp = self.es(e)
        est = _estimate(f"es({e})", p, f, rows)
        est.components = comp
        return est

    def es_avg_estimate(self) -> Estimate:
        horizons = self.idx.event_times
        if not horizons:
            raise EstimationError("NO_TREATED_VARIATION", "no treated cohorts")
        pts, eifs, rows, comp = [], [], [], {}
        for e in horizons:
            p, f, r, c = self.es(e)
            pts.append(p)
            eifs.append(f)
            rows.extend(r)
            comp.update(c)
        est = _estimate("es_avg", float(np.mean(pts)), np.mean(eifs, axis=0), rows)
        est.components = {"es": dict(zip(horizons, pts)), "att": comp}
        return est

    def target(self, g=None, t=None, e=None) -> Estimate:
        if e is None:
            if g is None or t is None:
                raise ValidationError("CONFIG", "specify (g, t) or an event time")
            return self.att_estimate(g, t)
        if e == "avg":
            return self.es_avg_estimate()
        return self.es_estimate(int(e))


# ---------------------------------------------------------------------------
# Efficient estimator
# ---------------------------------------------------------------------------


def _config(mode, config) -> NuisanceConfig:
    if config is None:
        return NuisanceConfig(mode=mode or "uncond")
    if mode is not None and NuisanceConfig(mode=mode).mode != config.mode:
        return NuisanceConfig(**{**config.as_dict(), "mode": mode,
                                 "ratio_grid": tuple(config.ratio_grid) if config.ratio_grid else None})
    return config


class EfficientModel(_GroupTime):
    """Efficient group-time estimator sharing one first-stage fit across targets.

    Parameters
    ----------
    ds : PanelDataset
    regime : PtRegime or str
    mode : {"uncond", "cond"}, optional
    config : NuisanceConfig, optional
    entry_filter : callable, optional
        Keeps a subset of stacked entries (intermediate parallel-trends
        assumptions); the own ``(g, g-1)`` entry is always kept.
    omega : {"star", "direct"}
        Model-based or direct covariance for the weights.
    fits : NuisanceFit, optional
        Pre-computed first stage.
    """

    def __init__(self, ds, regime="pt-all", mode=None, config=None, entry_filter=None,
                 omega="star", fits: Optional[NuisanceFit] = None):
        self.config = _config(mode, config)
        self.fits = fits or fit_nuisance(ds, self.config)
        self.regime = PtRegime.parse(regime)
        self.entry_filter = entry_filter
        self.omega = omega
        super().__init__(ds, self._att, label="att")
        self.indices: dict = {}
        self.weight_vectors: dict = {}

    def index(self, g, t) -> IfIndex:
        return if_index(g, t, self.regime, self.idx, self.entry_filter)

    def _att(self, g, t):
        ix = self.index(g, t)
        gen = generated_outcomes(self.fits, ix)
        if self.omega == "direct":
            om = omega_direct(gen)
        else:
            om = omega_star(self.fits, ix)
        w = optimal_weights(om)
        att, eif = eif_att(gen, w)
        self.indices[(g, t)] = ix
        self.weight_vectors[(g, t)] = w
        wm = w.mean(axis=0) if w.ndim == 2 else w
        rows = [{"target_g": g, "target_t": t, "comp_g": en.comp, "base_t": en.base, "weight": float(wk)}
                for en, wk in zip(ix.entries, wm)]
        return att, eif, rows

    def _meta(self, est: Estimate) -> Estimate:
        est.metadata.update(regime=self.regime.value, mode=self.config.mode, nuisance=self.config.as_dict(),
                            estimator="efficient")
        return est

    def target(self, g=None, t=None, e=None) -> Estimate:
        return self._meta(super().target(g, t, e))


def estimate_att_efficient(ds, g, t, regime="pt-all", mode=None, config=None, **kw) -> Estimate:
    """Efficient ``ATT(g, t)``: unit average of optimally weighted generated outcomes."""
    return EfficientModel(ds, regime, mode, config, **kw).target(g, t)


def estimate_es(ds, e, regime="pt-all", mode=None, config=None, **kw) -> Estimate:
    """Efficient ``ES(e) = sum_g q_{g,e} ATT(g, g+e)``."""
    return EfficientModel(ds, regime, mode, config, **kw).target(e=int(e))


def estimate_es_avg(ds, regime="pt-all", mode=None, config=None, **kw) -> Estimate:
    """Efficient ``ES_avg``, the mean of ``ES(e)`` over post-treatment horizons."""
    return EfficientModel(ds, regime, mode, config, **kw).target(e="avg")


# ---------------------------------------------------------------------------
# Group-time DiD with a single baseline
# ---------------------------------------------------------------------------


class CsModel(_GroupTime):
    """Group-time DiD with baseline ``g-1``.

    ``comparison="never"`` is the just-identified efficient estimator (one
    stacked entry). ``"notyet"`` pools never-treated units with cohorts not
    yet treated at ``t``, each unit weighted equally.
    """

    def __init__(self, ds, comparison="never", mode=None, config=None, fits=None):
        self.comparison = comparison
        self.config = _config(mode, config)
        if comparison == "never":
            self._eff = EfficientModel(ds, "pt-post", config=self.config, fits=fits)
            fn = self._eff._att
        elif comparison == "notyet":
            self.fits = fits or fit_nuisance(ds, self.config)
            fn = self._notyet
        else:
            raise ValidationError("CONFIG", f"unknown comparison {comparison!r}")
        super().__init__(ds, fn, label=f"cs_{comparison}")

    def _notyet(self, g, t):
        ds, f = self.ds, self.fits
        if g not in self.idx.cohorts_treated:
            raise EstimationError("EMPTY_COHORT", f"cohort {g} is not a treated cohort in the data")
        if t < g or t > ds.T:
            raise EstimationError("POST_TREATMENT_ONLY", f"ATT({g},{t}) requires g <= t <= T")
        b = g - 1
        Gg = (self.group == g).astype(float)
        Gc = (self.group > t).astype(float)
        if Gc.sum() == 0:
            raise EstimationError("NO_UNTREATED_CELLS", f"no never- or not-yet-treated units at period {t}")
        dy = ds.outcomes[:, t - 1] - ds.outcomes[:, b - 1]
        pi = Gg.mean()
        if f.conditional:
            rows = np.flatnonzero(Gc > 0)
            P = f.basis(ds.covariates, _outcome_K(ds.d, f.config.outcome_degree, rows.size))
            coef = _solve_psd(P[rows].T @ P[rows], P[rows].T @ dy[rows], "pooled outcome regression")
            m = P @ coef
            r = fit_propensity_ratio(ds, g, NEVER, grid=f.config.ratio_grid, C_n=f.config.criterion,
                                     floor=f.config.ratio_floor, basis=f.basis,
                                     num_mask=Gg, den_mask=Gc)(ds.covariates)
        else:
            m = np.full(ds.n, dy[Gc > 0].mean())
            r = np.full(ds.n, pi / Gc.mean())
        psi = (Gg * (dy - m) - r * Gc * (dy - m)) / pi
        att = float(psi.mean())
        rows_w = [{"target_g": g, "target_t": t, "comp_g": NEVER, "base_t": b, "weight": 1.0}]
        return att, psi - Gg / pi * att, rows_w

    def target(self, g=None, t=None, e=None) -> Estimate:
        est = super().target(g, t, e)
        est.metadata.update(estimator=f"cs-{self.comparison}", mode=self.config.mode)
        return est


def estimate_cs(ds, g=None, t=None, comparison="never", mode=None, config=None, e=None) -> Estimate:
    """Group-time DiD at baseline ``g-1`` against never- or not-yet-treated units.

    ``e`` (an event time or ``"avg"``) aggregates with cohort-share weights.
    """
    return CsModel(ds, comparison, mode, config).target(g, t, e)


# ---------------------------------------------------------------------------
# Two-way fixed effects
# ---------------------------------------------------------------------------


def _two_way_demean(A: np.ndarray) -> np.ndarray:
    """Remove unit and period means from an ``n x T (x k)`` array (balanced panel)."""
    return A - A.mean(axis=1, keepdims=True) - A.mean(axis=0, keepdims=True) + A.mean(axis=(0, 1), keepdims=True)


def _cluster_ols(Xt: np.ndarray, Yt: np.ndarray):
    """Within-regression coefficients and per-unit influence functions.

    ``Xt`` is ``n x T x k`` and ``Yt`` is ``n x T``, both demeaned.
    """
    n = Yt.shape[0]
    X2 = Xt.reshape(-1, Xt.shape[2])
    XtX = X2.T @ X2
    if np.linalg.matrix_rank(XtX) < XtX.shape[0]:
        raise EstimationError("NO_TREATED_VARIATION", "treatment regressors are collinear with the fixed effects")
    inv = np.linalg.inv(XtX)
    beta = inv @ (X2.T @ Yt.reshape(-1))
    resid = Yt - Xt @ beta
    scores = np.einsum("itk,it->ik", Xt, resid)
    infl = n * scores @ inv
    return beta, infl


def estimate_twfe_static(ds: PanelDataset) -> Estimate:
    """Within estimator of ``Y_it = a_i + l_t + b D_it + e_it``; SE clustered by unit."""
    D = ds.treated_matrix()
    Dt = _two_way_demean(D)
    if np.sum(Dt ** 2) <= 1e-12 * D.size:
        raise EstimationError("NO_TREATED_VARIATION", "treatment indicator has no within variation")
    beta, infl = _cluster_ols(Dt[:, :, None], _two_way_demean(ds.outcomes))
    return _estimate("twfe_static", beta[0], infl[:, 0], estimator="twfe-static")


def event_time_matrix(ds: PanelDataset) -> np.ndarray:
    """``t - G_i`` per cell, NaN for never-treated units."""
    t = np.arange(1, ds.T + 1)
    with np.errstate(invalid="ignore"):
        k = t[None, :] - ds.cohort[:, None]
    return np.where(np.isfinite(k), k, np.nan)


def estimate_twfe_dynamic(ds: PanelDataset, e: Union[int, str]) -> Estimate:
    """Event-time coefficient ``beta_e`` from the saturated TWFE regression.

    Every observed relative period except ``-1`` gets a dummy. ``e="avg"``
    returns the mean of ``beta_e`` over ``e >= 0``. SE clustered by unit.
    """
    if e != "avg" and int(e) == -1:
        raise EstimationError("OMITTED_CATEGORY", "event time -1 is the omitted reference period")
    K = event_time_matrix(ds)
    ks = sorted(int(v) for v in np.unique(K[np.isfinite(K)]) if v != -1)
    if not any(k >= 0 for k in ks):
        raise EstimationError("NO_TREATED_VARIATION", "no treated cells")
    X = np.stack([(K == k).astype(float) for k in ks], axis=2)
    beta, infl = _cluster_ols(_two_way_demean(X), _two_way_demean(ds.outcomes))
    if e == "avg":
        sel = [j for j, k in enumerate(ks) if k >= 0]
        return _estimate("twfe_dynamic(avg)", beta[sel].mean(), infl[:, sel].mean(axis=1),
                         estimator="twfe-dynamic")
    if int(e) not in ks:
        raise EstimationError("NO_COHORT_AT_HORIZON", f"event time {e} not observed")
    j = ks.index(int(e))
    return _estimate(f"twfe_dynamic({int(e)})", beta[j], infl[:, j], estimator="twfe-dynamic")


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------


@dataclass
class ImputationFit:
    """Unit and period effects fitted on untreated cells."""

    alpha: np.ndarray
    lam: np.ndarray
    untreated: np.ndarray  # n x T boolean
    M_pinv: np.ndarray
    active: np.ndarray  # periods with untreated cells

    def tau(self, Y: np.ndarray) -> np.ndarray:
        return Y - self.alpha[:, None] - self.lam[None, :]


def fit_imputation(ds: PanelDataset) -> ImputationFit:
    """Least squares ``Y_it = a_i + l_t`` over cells with ``t < G_i``.

    Unit effects are concentrated out, leaving a ``T x T`` system for the
    period effects solved by pseudo-inverse (they are identified up to a
    constant absorbed by the unit effects).
    """
    U = ~ds.treated_matrix().astype(bool)
    Uf = U.astype(float)
    n_i = Uf.sum(axis=1)
    if np.any(n_i == 0):
        raise EstimationError("NO_UNTREATED_CELLS", "some units have no untreated periods")
    Y = ds.outcomes
    ybar = (Y * Uf).sum(axis=1) / n_i
    N_t = Uf.sum(axis=0)
    active = N_t > 0
    M = np.diag(N_t) - (Uf / n_i[:, None]).T @ Uf
    b = (Uf * (Y - ybar[:, None])).sum(axis=0)
    Ma = M[np.ix_(active, active)]
    Mp = np.zeros_like(M)
    Mp[np.ix_(active, active)] = np.linalg.pinv(Ma, hermitian=True)
    lam = Mp @ b
    alpha = ybar - (Uf * lam[None, :]).sum(axis=1) / n_i
    lam = np.where(active, lam, np.nan)
    return ImputationFit(alpha, lam, U, Mp, active)


def _imputation_from_weights(ds: PanelDataset, fit: ImputationFit, w: np.ndarray, label: str) -> Estimate:
    """Weighted average of imputed effects with its influence representation.

    The estimate is linear in outcomes, ``sum_it v_it Y_it``; ``v`` equals ``w``
    on treated cells and ``-W_i/n_i + k_t - mean_i(k)`` on untreated cells with
    ``k = M^+ c``. The cluster score of unit ``i`` is ``sum_t v_it e_it`` with
    ``e`` the fixed-effect residual (untreated) or the imputed effect minus its
    cohort-period mean (treated).
    """
    U = fit.untreated
    Uf = U.astype(float)
    tr = ~U
    if np.any((w != 0) & ~fit.active[None, :]):
        raise EstimationError("NO_UNTREATED_CELLS", "a target period has no untreated comparison cells")
    Y = ds.outcomes
    tau = np.where(tr & fit.active[None, :], fit.tau(Y), 0.0)
    point = float((w * tau).sum())
    n_i = Uf.sum(axis=1)
    W_i = w.sum(axis=1)
    omega = w.sum(axis=0)
    c = (Uf * (W_i / n_i)[:, None]).sum(axis=0) - omega
    kappa = fit.M_pinv @ c
    kbar = (Uf * kappa[None, :]).sum(axis=1) / n_i
    v = np.where(U, -(W_i / n_i)[:, None] + kappa[None, :] - kbar[:, None], w)
    resid = np.where(U, Y - fit.alpha[:, None] - np.nan_to_num(fit.lam)[None, :], 0.0)
    for g in np.unique(ds.cohort[np.isfinite(ds.cohort)]):
        rows = ds.cohort == g
        for k in range(ds.T):
            cell = rows & tr[:, k]
            if cell.any():
                resid[cell, k] = tau[cell, k] - tau[cell, k].mean()
    psi = (v * resid).sum(axis=1)
    return _estimate(label, point, ds.n * psi, estimator="imputation")


def estimate_imputation(ds: PanelDataset, g=None, t=None, e=None) -> Estimate:
    """Imputation estimator of ``ATT(g, t)``, ``ES(e)`` or ``ES_avg`` (``e="avg"``).

    Target cells of an event-study horizon are weighted equally, so cohorts
    enter in proportion to their size.
    """
    fit = fit_imputation(ds)
    tr = ~fit.untreated
    K = event_time_matrix(ds)
    w = np.zeros((ds.n, ds.T))
    if e is None:
        if g is None or t is None:
            raise ValidationError("CONFIG", "specify (g, t) or an event time")
        cell = (ds.cohort == g)[:, None] & (np.arange(1, ds.T + 1) == t)[None, :] & tr
        if not cell.any():
            raise EstimationError("EMPTY_COHORT", f"no treated cells for ({g},{t})")
        w[cell] = 1.0 / cell.sum()
        label = f"imputation({g},{t})"
    else:
        horizons = sorted(int(k) for k in np.unique(K[np.isfinite(K)]) if k >= 0)
        if e != "avg":
            if int(e) not in horizons:
                raise EstimationError("NO_COHORT_AT_HORIZON", f"no treated cohort is observed at event time {e}")
            horizons = [int(e)]
        for k in horizons:
            cell = K == k
            w[cell] += 1.0 / (cell.sum() * len(horizons))
        label = "imputation(avg)" if e == "avg" else f"imputation(es {int(e)})"
    return _imputation_from_weights(ds, fit, w, label)


# ---------------------------------------------------------------------------
# Instrumented DiD
# ---------------------------------------------------------------------------


@dataclass
class LattEstimate:
    numerator: float
    denominator: float
    point: float
    eif: np.ndarray
    se: float
    weights_num: np.ndarray
    weights_den: np.ndarray
    entries: list

    @property
    def n(self) -> int:
        return int(self.eif.shape[0])

    def as_estimate(self, g, t) -> Estimate:
        rows = [{"target_g": g, "target_t": t, "comp_g": NEVER, "base_t": b, "weight": float(w),
                 "role": role} for (role, b), w in zip(self.entries, self.weights_num)]
        est = Estimate(f"latt({g},{t})", self.point, self.eif, self.se, rows,
                       {"numerator": self.numerator, "denominator": self.denominator,
                        "estimator": "latt"})
        return est


def _stack(Gg, Ginf, Z: np.ndarray):
    """Generated outcomes ``(1/pi)(G_g - r G_inf)(Z - mean_inf Z)`` and ``V*``."""
    pi, pinf = Gg.mean(), Ginf.mean()
    mg = Z[Gg > 0].mean(axis=0)
    minf = Z[Ginf > 0].mean(axis=0)
    gen = ((Gg - pi / pinf * Ginf)[:, None] * (Z - minf)) / pi
    Rg = Z[Gg > 0] - mg
    Ri = Z[Ginf > 0] - minf
    V = Rg.T @ Rg / Rg.shape[0] / pi + Ri.T @ Ri / Ri.shape[0] / pinf
    return gen, V


def estimate_latt(ds: PanelDataset, g: int, t: int) -> LattEstimate:
    """Efficient ``LATT(g, t)`` with a single instrument-exposure date.

    Numerator stack: ``Y_t - Y_t'`` for ``t' = 1..g-1`` and
    ``Y_t - Y_1 + D_t' - D_1`` for ``t' = 2..g-1``. The denominator swaps the
    roles of ``Y`` and ``D``. Each stack is optimally weighted with its
    covariate-free ``V*``; the influence function is
    ``(EIF_num - LATT EIF_den) / den``.
    """
    if not ds.is_iv:
        raise ValidationError("SCHEMA", "LATT needs treatment paths and instrument exposure dates")
    Z = ds.iv_cohort
    exposed = sorted({int(v) for v in Z[np.isfinite(Z)]})
    if exposed != [int(g)]:
        raise EstimationError("INVALID_COHORT", f"instrument exposure must occur only at {g}; found {exposed}")
    if not np.any(Z == NEVER):
        raise EstimationError("NO_NEVER_COHORT", "no never-exposed units")
    if t < g or t > ds.T:
        raise EstimationError("POST_TREATMENT_ONLY", f"LATT({g},{t}) requires g <= t <= T")
    Y, D = ds.outcomes, ds.treatment
    Gg = (Z == g).astype(float)
    Ginf = (Z == NEVER).astype(float)
    pi = Gg.mean()

    def columns(A, B):
        cols = [A[:, t - 1] - A[:, tp - 1] for tp in range(1, g)]
        cols += [A[:, t - 1] - A[:, 0] + B[:, tp - 1] - B[:, 0] for tp in range(2, g)]
        return np.column_stack(cols)

    entries = [("own", tp) for tp in range(1, g)] + [("mixed", tp) for tp in range(2, g)]
    parts = {}
    for name, (A, B) in {"num": (Y, D), "den": (D, Y)}.items():
        gen, V = _stack(Gg, Ginf, columns(A, B))
        w = optimal_weights(V)
        psi = gen @ w
        val = float(psi.mean())
        parts[name] = (val, psi - Gg / pi * val, w)
    num, eif_num, w_num = parts["num"]
    den, eif_den, w_den = parts["den"]
    if abs(den) < WEAK_TOL:
        raise EstimationError("WEAK_FIRST_STAGE", f"first-stage contrast {den:.3g} is numerically zero")
    latt = num / den
    eif = (eif_num - latt * eif_den) / den
    return LattEstimate(num, den, latt, eif, analytic_se(eif), w_num, w_den, entries)


__all__ = [
    "Estimate", "LattEstimate", "EfficientModel", "CsModel", "estimate_att_efficient", "estimate_es",
    "estimate_es_avg", "estimate_cs", "estimate_twfe_static", "estimate_twfe_dynamic",
    "estimate_imputation", "fit_imputation", "estimate_latt", "write_weight_table", "event_time_matrix",
]
