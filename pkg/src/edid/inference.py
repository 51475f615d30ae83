"""Bootstrap standard errors, simultaneous bands and specification tests."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .design import IfEntry, IfIndex
from .eif import analytic_se, eif_att, generated_outcomes
from .errors import EdidError, EdidWarning, EstimationError, ValidationError
from .estimators import EfficientModel, Estimate, _config, _estimate
from .nuisance import NuisanceConfig
from .panel import NEVER, PanelDataset, cohort_index


@dataclass
class BootstrapConfig:
    """Resampling settings.

    ``scheme`` is ``"cluster"`` (resample units, refit everything) or
    ``"multiplier"`` (perturb the estimated influence functions).
    """

    scheme: str = "cluster"
    B: int = 300
    seed: int = 0
    ci: str = "normal"  # or "percentile"
    multiplier: str = "normal"  # or "rademacher"
    level: float = 0.95
    min_cell: int = 2
    threads: int = 1

    def __post_init__(self):
        if self.B < 2:
            raise ValidationError("CONFIG", "bootstrap needs B >= 2")
        if self.scheme not in ("cluster", "multiplier"):
            raise ValidationError("CONFIG", f"unknown bootstrap scheme {self.scheme!r}")
        if self.ci not in ("normal", "percentile"):
            raise ValidationError("CONFIG", f"unknown interval type {self.ci!r}")
        if self.multiplier not in ("normal", "rademacher"):
            raise ValidationError("CONFIG", f"unknown multiplier law {self.multiplier!r}")


@dataclass
class BootstrapResult:
    point: np.ndarray
    draws: np.ndarray  # B x k
    se: np.ndarray
    ci_normal: np.ndarray  # k x 2
    ci_percentile: np.ndarray  # k x 2
    redraws: int = 0

    def ci(self, kind: str = "normal") -> np.ndarray:
        return self.ci_normal if kind == "normal" else self.ci_percentile


@dataclass
class TestResult:
    statistic: float
    df: int
    pvalue: float
    alpha: float = 0.05
    repaired: bool = False
    detail: list = field(default_factory=list)

    @property
    def reject(self) -> bool:
        return self.pvalue < self.alpha

    def to_dict(self) -> dict:
        return {"stat": self.statistic, "df": self.df, "pvalue": self.pvalue, "repaired": self.repaired,
                "alpha": self.alpha, "reject": self.reject, "detail": self.detail}


def are(se_bench: float, se_other: float) -> float:
    """Asymptotic relative efficiency ``(se_other / se_bench)^2``."""
    return (se_other / se_bench) ** 2


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def _ci_from_draws(point, draws, se, level):
    z = float(stats.norm.ppf(0.5 + level / 2))
    normal = np.column_stack([point - z * se, point + z * se])
    a = (1 - level) / 2
    pct = np.column_stack([np.quantile(draws, a, axis=0), np.quantile(draws, 1 - a, axis=0)])
    return normal, pct


def _as_vector(x) -> np.ndarray:
    if isinstance(x, Estimate):
        return np.array([x.point])
    return np.atleast_1d(np.asarray(x, dtype=float))


def cluster_bootstrap(ds: PanelDataset, fn: Callable, cfg: Optional[BootstrapConfig] = None) -> BootstrapResult:
    """Nonparametric bootstrap over units with the whole pipeline refit.

    ``fn(ds)`` returns an :class:`Estimate`, a scalar or a vector. Replication
    ``b`` draws from its own child of ``SeedSequence(seed)``; a resample that
    leaves a cohort with fewer than ``min_cell`` units is redrawn.
    """
    cfg = cfg or BootstrapConfig()
    point = _as_vector(fn(ds))
    groups = np.unique(ds.cohort)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.B)

    def rep(ss):
        rng = np.random.default_rng(ss)
        redraw = 0
        while True:
            rows = rng.integers(0, ds.n, size=ds.n)
            counts = np.array([(ds.cohort[rows] == g).sum() for g in groups])
            if np.all(counts >= cfg.min_cell):
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", EdidWarning)
                        return _as_vector(fn(ds.subset(rows))), redraw
                except EdidError:
                    pass
            redraw += 1
            if redraw > 1000:
                raise EstimationError("EMPTY_COHORT", "bootstrap could not draw a usable resample")

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            out = list(ex.map(rep, children))
    else:
        out = [rep(c) for c in children]
    draws = np.vstack([o[0] for o in out])
    redraws = int(sum(o[1] for o in out))
    if redraws > 0.1 * cfg.B:
        warnings.warn(f"{redraws} bootstrap resamples redrawn (more than 10% of B)", EdidWarning, stacklevel=2)
    se = draws.std(axis=0, ddof=1)
    normal, pct = _ci_from_draws(point, draws, se, cfg.level)
    return BootstrapResult(point, draws, se, normal, pct, redraws)


def multiplier_draws(eif: np.ndarray, B: int, seed: int = 0, law: str = "normal") -> np.ndarray:
    """``B x k`` bootstrap perturbations ``E_n[xi_i * eif_i]``."""
    eif = np.asarray(eif, dtype=float)
    if eif.ndim == 1:
        eif = eif[:, None]
    rng = np.random.default_rng(seed)
    n = eif.shape[0]
    if law == "rademacher":
        xi = rng.choice([-1.0, 1.0], size=(B, n))
    else:
        xi = rng.normal(size=(B, n))
    return xi @ eif / n


def multiplier_bootstrap(estimates: Sequence[Estimate], cfg: Optional[BootstrapConfig] = None) -> BootstrapResult:
    cfg = cfg or BootstrapConfig(scheme="multiplier")
    point = np.array([e.point for e in estimates])
    F = np.column_stack([e.eif for e in estimates])
    delta = multiplier_draws(F, cfg.B, cfg.seed, cfg.multiplier)
    draws = point + delta
    se = delta.std(axis=0, ddof=1)
    normal, pct = _ci_from_draws(point, draws, se, cfg.level)
    return BootstrapResult(point, draws, se, normal, pct, 0)


def attach_bootstrap(est: Estimate, res: BootstrapResult, kind: str = "normal") -> Estimate:
    est.se_bootstrap = float(res.se[0])
    lo, hi = res.ci(kind)[0]
    est.ci_bootstrap = (float(lo), float(hi))
    return est


@dataclass
class Bands:
    points: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    critical_value: float


def simultaneous_bands(estimates: Sequence[Estimate], level: float = 0.95, B: int = 1000, seed: int = 0,
                       law: str = "normal") -> Bands:
    """Sup-t bands from the multiplier bootstrap of the joint influence functions.

    The critical value is the ``level`` quantile of ``max_e |delta_e| / se_e``,
    floored at the pointwise normal value so the band always contains the
    pointwise interval. A single estimate gives the pointwise interval.
    """
    pts = np.array([e.point for e in estimates])
    se = np.array([e.se for e in estimates])
    z = float(stats.norm.ppf(0.5 + level / 2))
    if len(estimates) == 1:
        crit = z
    else:
        F = np.column_stack([e.eif for e in estimates])
        delta = multiplier_draws(F, B, seed, law)
        safe = np.where(se > 0, se, np.inf)
        tmax = np.max(np.abs(delta) / safe, axis=1)
        crit = max(float(np.quantile(tmax, level)), z)
    return Bands(pts, se, pts - crit * se, pts + crit * se, crit)


# ---------------------------------------------------------------------------
# Hausman-type overidentification test
# ---------------------------------------------------------------------------


def hausman_statistic(d: np.ndarray, D: np.ndarray, alpha: float = 0.05, tol: float = 1e-10) -> TestResult:
    """``n d' S^+ d`` with ``S = E_n[D_i D_i']`` and ``D_i`` the EIF difference.

    When ``S`` is rank deficient the pseudo-inverse is used and the degrees of
    freedom drop to its rank (``repaired=True``).
    """
    d = np.atleast_1d(np.asarray(d, dtype=float))
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    n, k = D.shape
    S = D.T @ D / n
    ev, Q = np.linalg.eigh(0.5 * (S + S.T))
    top = max(float(ev[-1]), 0.0)
    keep = ev > tol * max(top, 1e-300) if top > 0 else np.zeros(k, dtype=bool)
    rank = int(keep.sum())
    if rank == 0:
        return TestResult(0.0, 0, 1.0, alpha, k > 0)
    proj = Q[:, keep].T @ d
    H = float(n * np.sum(proj ** 2 / ev[keep]))
    H = max(H, 0.0)
    return TestResult(H, rank, float(stats.chi2.sf(H, rank)), alpha, rank < k)


def _es_vector(model, horizons):
    pts, eifs = [], []
    for e in horizons:
        p, f, _, _ = model.es(e)
        pts.append(p)
        eifs.append(f)
    return np.array(pts), np.column_stack(eifs)


def hausman_test(ds: PanelDataset, mode=None, config: Optional[NuisanceConfig] = None, alpha: float = 0.05,
                 horizons: Optional[Sequence[int]] = None, entry_filter=None) -> TestResult:
    """Compare the efficient event study with the just-identified one.

    ``entry_filter`` restricts the efficient model (incremental tests); by
    default the full set of pre-treatment restrictions is used.
    """
    config = _config(mode, config)
    full = EfficientModel(ds, "pt-all", config=config, entry_filter=entry_filter)
    just = EfficientModel(ds, "pt-post", config=config, fits=full.fits)
    horizons = list(horizons) if horizons is not None else list(full.idx.event_times)
    es_hat, F_hat = _es_vector(full, horizons)
    es_chk, F_chk = _es_vector(just, horizons)
    res = hausman_statistic(es_chk - es_hat, F_chk - F_hat, alpha)
    res.detail = [{"e": int(e), "es_all": float(a), "es_post": float(b)} for e, a, b in zip(horizons, es_hat, es_chk)]
    return res


def holm(pvalues: Sequence[float], alpha: float = 0.05) -> np.ndarray:
    """Holm step-down: boolean rejection mask in the input order."""
    p = np.asarray(pvalues, dtype=float)
    L = p.size
    order = np.argsort(p, kind="stable")
    reject = np.zeros(L, dtype=bool)
    for ell, j in enumerate(order, start=1):
        if p[j] < alpha / (L + 1 - ell):
            reject[j] = True
        else:
            break
    return reject


@dataclass
class HolmResult:
    alpha: float
    candidates: list  # (comp_g, base_t) sorted by p-value
    pvalues: list
    rejected: list
    selected: list

    def to_dict(self) -> dict:
        return {"alpha": self.alpha,
                "tests": [{"comp_g": int(c[0]), "base_t": int(c[1]), "pvalue": p, "rejected": c in self.rejected}
                          for c, p in zip(self.candidates, self.pvalues)],
                "selected": [{"comp_g": int(c[0]), "base_t": int(c[1])} for c in self.selected]}


def _candidate_filter(cand):
    comp, base = cand

    def keep(e: IfEntry) -> bool:
        if base == 1:
            return e.own and e.base == 1
        return e.comp == comp and e.base == base

    return keep


def holm_incremental_selection(ds: PanelDataset, alpha: float = 0.05, mode=None,
                               config: Optional[NuisanceConfig] = None) -> HolmResult:
    """Select extra pre-treatment restrictions by Holm-adjusted incremental tests.

    Each candidate ``(g', t')`` with ``t' < g'`` adds one restriction anchored
    at period 1 to the just-identified model; its Hausman p-value is computed
    against that baseline. Restrictions not rejected by the Holm step-down are
    selected. Candidates that change no target are skipped.
    """
    idx = cohort_index(ds)
    cands = [(c, 1) for c in idx.cohorts_treated[:1] if c > 2]
    for c in idx.cohorts_treated:
        cands.extend((c, tp) for tp in range(2, c))
    tested, pvals = [], []
    for cand in cands:
        filt = _candidate_filter(cand)
        changes = False
        for g in idx.cohorts_treated:
            for en in (IfEntry(g, tp, True) for tp in range(1, g - 1)):
                changes |= filt(en)
            for gp in idx.cohorts_treated:
                if gp != g:
                    changes |= any(filt(IfEntry(gp, tp, False)) for tp in range(2, gp))
        if not changes:
            continue
        res = hausman_test(ds, mode, config, alpha, entry_filter=filt)
        tested.append(cand)
        pvals.append(res.pvalue)
    order = np.argsort(pvals, kind="stable")
    tested = [tested[i] for i in order]
    pvals = [float(pvals[i]) for i in order]
    rej = holm(pvals, alpha)
    rejected = [c for c, r in zip(tested, rej) if r]
    selected = [c for c, r in zip(tested, rej) if not r]
    return HolmResult(alpha, tested, pvals, rejected, selected)


# ---------------------------------------------------------------------------
# Placebo pre-trends
# ---------------------------------------------------------------------------


def placebo_pretrends(ds: PanelDataset, g: int, t: int, baseline: Optional[int] = None,
                      comparison: str = "never", mode=None, config: Optional[NuisanceConfig] = None) -> Estimate:
    """Pre-treatment DiD ``E[Y_t - Y_b | g] - E[Y_t - Y_b | comparison]`` with ``t < g``.

    The baseline defaults to ``g - 1``; for ``t = g - 1`` it is ``t - 1``.
    """
    g, t = int(g), int(t)
    if t >= g:
        raise EstimationError("NOT_A_PLACEBO", f"placebo needs t < g (got t={t}, g={g})")
    b = baseline if baseline is not None else (g - 1 if t != g - 1 else t - 1)
    if b < 1 or b == t or b >= g:
        raise EstimationError("NOT_A_PLACEBO", f"no valid pre-treatment baseline for ({g},{t})")
    if comparison == "never":
        model = EfficientModel(ds, "pt-post", mode, config)
        ix = IfIndex(g, t, (IfEntry(g, b, True),))
        gen = generated_outcomes(model.fits, ix)
        att, eif = eif_att(gen, np.ones(1))
    elif comparison == "notyet":
        Gg = (ds.cohort == g).astype(float)
        Gc = (ds.cohort > max(t, b)) & (ds.cohort != g)
        if not Gc.any():
            raise EstimationError("NO_UNTREATED_CELLS", "no comparison units")
        dy = ds.outcomes[:, t - 1] - ds.outcomes[:, b - 1]
        pi, pc = Gg.mean(), Gc.mean()
        mc = dy[Gc].mean()
        psi = (Gg * (dy - mc) - pi / pc * Gc * (dy - mc)) / pi
        att = float(psi.mean())
        eif = psi - Gg / pi * att
    else:
        raise ValidationError("CONFIG", f"unknown comparison {comparison!r}")
    return _estimate(f"placebo({g},{t})", att, eif,
                     [{"target_g": g, "target_t": t, "comp_g": NEVER, "base_t": b, "weight": 1.0}],
                     estimator="placebo", comparison=comparison)


__all__ = [
    "BootstrapConfig", "BootstrapResult", "TestResult", "Bands", "HolmResult", "analytic_se", "are",
    "cluster_bootstrap", "multiplier_bootstrap", "multiplier_draws", "attach_bootstrap", "simultaneous_bands",
    "hausman_statistic", "hausman_test", "holm", "holm_incremental_selection", "placebo_pretrends",
]
