"""Data-generating processes and a Monte Carlo harness.

Three designs:

* :class:`SingleDateDgp` -- one treatment date, interactive-factor untreated
  outcomes with AR(2) errors and heterogeneous effects whose mean is zero.
* :class:`StaggeredDgp` -- cohorts adopting at 5, 8 and 11 with linearly
  growing effects and AR(1) errors; the last cohort becomes the comparison
  group after dropping the final period.
* :class:`IvDgp` -- a single instrument-exposure date with partial compliance.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, stats

from .errors import EdidError, EdidWarning, ValidationError
from .panel import NEVER, PanelDataset, relabel_terminal_cohort

Z975 = float(stats.norm.ppf(0.975))


# ---------------------------------------------------------------------------
# Single treatment date
# ---------------------------------------------------------------------------

VARIANTS = ("baseline", "no_corr", "no_M", "no_F", "only_noise")


def ar2_covariance(T: int, phi=(0.5, 0.2), sd: float = 1.0) -> np.ndarray:
    """Stationary covariance of an AR(2) process over ``T`` periods."""
    p1, p2 = phi
    if not (p2 + p1 < 1 and p2 - p1 < 1 and abs(p2) < 1):
        raise ValidationError("CONFIG", f"AR(2) coefficients {phi} are not stationary")
    g0 = sd ** 2 * (1 - p2) / ((1 + p2) * ((1 - p2) ** 2 - p1 ** 2))
    acov = [g0, p1 * g0 / (1 - p2)]
    for _ in range(2, T):
        acov.append(p1 * acov[-1] + p2 * acov[-2])
    return linalg.toeplitz(acov[:T])


@dataclass
class SingleDateDgp:
    """Interactive-factor design with one adoption date.

    A pool of ``pool_size`` "states" with rank-``rank`` factors is drawn once
    from ``factor_seed`` and frozen; units are resampled from the pool. Time
    factors are a common level plus deviations with sd ``time_factor_sd``. The
    low-rank signal ``L`` splits into additive effects ``F`` and the
    interaction ``M``; ``variant`` switches components off.
    """

    n: int = 50
    T: int = 7
    g: int = 5
    rank: int = 4
    pool_size: int = 50
    factor_seed: int = 20240601
    time_factor_sd: float = 0.1
    variant: str = "baseline"
    ar: tuple = (0.5, 0.2)
    innovation_sd: float = 1.0
    assignment: str = "logistic"  # or "random"
    phi_eta: float = 1.0
    phi_m: float = 1.0
    random_share: float = 0.5
    effect_sd: float = 1.0
    min_treated: int = 2
    fallback_share: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError("CONFIG", f"variant must be one of {VARIANTS}")
        if self.n < self.min_treated + 1:
            raise ValidationError("CONFIG", "n must exceed the minimum treated count")
        if not 2 <= self.g <= self.T:
            raise ValidationError("CONFIG", "treatment date must lie in 2..T")

    def factors(self):
        """Frozen pool: ``(eta, alpha, M)`` with ``L = F + M``."""
        rng = np.random.default_rng(self.factor_seed)
        Gam = rng.normal(size=(self.pool_size, self.rank))
        # common level plus small period deviations keeps M modest
        Ups = rng.normal(size=(1, self.rank)) + rng.normal(scale=self.time_factor_sd, size=(self.T, self.rank))
        L = Gam @ Ups.T
        eta = L.mean(axis=1) - L.mean()
        alpha = L.mean(axis=0)
        M = L - eta[:, None] - alpha[None, :]
        return eta, alpha, M


def gen_single_date(dgp: SingleDateDgp, seed) -> tuple:
    """Draw one panel; returns ``(dataset, truth)`` with ``truth["att"] = 0``."""
    rng = np.random.default_rng(seed)
    eta_p, alpha, M_p = dgp.factors()
    pick = rng.integers(0, dgp.pool_size, size=dgp.n)
    eta, M = eta_p[pick], M_p[pick]
    v = dgp.variant
    use_F = v not in ("no_F", "only_noise")
    use_M = v not in ("no_M", "only_noise")
    base = np.zeros((dgp.n, dgp.T))
    if use_F:
        base += alpha[None, :] + eta[:, None]
    if use_M:
        base += M
    if v == "no_corr":
        Sigma = np.diag(np.diag(ar2_covariance(dgp.T, dgp.ar, dgp.innovation_sd)))
    else:
        Sigma = ar2_covariance(dgp.T, dgp.ar, dgp.innovation_sd)
    if dgp.innovation_sd > 0:
        eps = rng.multivariate_normal(np.zeros(dgp.T), Sigma, size=dgp.n, method="cholesky")
    else:
        eps = np.zeros((dgp.n, dgp.T))

    if dgp.assignment == "random":
        treated = rng.random(dgp.n) < dgp.random_share
    elif dgp.assignment == "logistic":
        idx = dgp.phi_eta * eta + dgp.phi_m * M.mean(axis=1)
        treated = rng.random(dgp.n) < 1.0 / (1.0 + np.exp(-idx))
    else:
        raise ValidationError("CONFIG", f"unknown assignment {dgp.assignment!r}")
    n_min = max(dgp.min_treated, 1)
    if treated.sum() < n_min or treated.sum() > dgp.n - 2:
        k = max(n_min, int(round(dgp.fallback_share * dgp.n)))
        treated = np.zeros(dgp.n, dtype=bool)
        treated[rng.choice(dgp.n, size=k, replace=False)] = True
    tau = rng.normal(scale=dgp.effect_sd, size=dgp.n)
    post = (np.arange(1, dgp.T + 1) >= dgp.g).astype(float)
    Y = base + eps + (treated * tau)[:, None] * post[None, :]
    cohort = np.where(treated, float(dgp.g), NEVER)
    ds = PanelDataset(range(dgp.n), range(1, dgp.T + 1), Y, cohort)
    truth = {"att": {(dgp.g, t): 0.0 for t in range(dgp.g, dgp.T + 1)}}
    truth["es"] = {t - dgp.g: 0.0 for t in range(dgp.g, dgp.T + 1)}
    truth["es_avg"] = 0.0
    return ds, truth


# ---------------------------------------------------------------------------
# Staggered adoption
# ---------------------------------------------------------------------------


@dataclass
class StaggeredDgp:
    """Three adoption dates with linearly growing effects and AR(1) errors.

    ``eps_t = rho eps_{t-1} + u_t`` with ``eps_0 = 0`` (explosive for
    ``|rho| > 1``, generated mechanically). ``residual_pool`` optionally
    supplies an array of innovations to resample instead of normal draws.
    """

    n: int = 400
    T: int = 11
    cohorts: tuple = (5, 8, 11)
    probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    slopes: tuple = (0.5, 0.3, 0.1)
    sigma: float = 0.309
    rho: float = 0.0
    unit_sd: float = 0.25
    time_sd: float = 0.05
    innovation_sd: float = 0.2
    residual_pool: Optional[np.ndarray] = None
    relabel: bool = True

    def __post_init__(self):
        if len(self.cohorts) != len(self.probs) or len(self.cohorts) != len(self.slopes):
            raise ValidationError("CONFIG", "cohorts, probs and slopes must have equal length")
        if abs(sum(self.probs) - 1) > 1e-9:
            raise ValidationError("CONFIG", "cohort probabilities must sum to 1")

    def effect(self, g: int, t: int) -> float:
        k = self.cohorts.index(g)
        return self.slopes[k] * self.sigma * (t - g + 1) if t >= g else 0.0

    def truth(self) -> dict:
        """Population ``ATT``, ``ES`` and ``ES_avg`` after relabelling."""
        T = self.T - 1 if self.relabel else self.T
        treated = [g for g in self.cohorts if not (self.relabel and g == max(self.cohorts))]
        p = dict(zip(self.cohorts, self.probs))
        att = {(g, t): self.effect(g, t) for g in treated for t in range(g, T + 1)}
        es = {}
        for e in range(0, T - min(treated) + 1):
            cs = [g for g in treated if g + e <= T]
            tot = sum(p[g] for g in cs)
            es[e] = sum(p[g] / tot * att[(g, g + e)] for g in cs)
        return {"att": att, "es": es, "es_avg": float(np.mean(list(es.values())))}


def load_residual_pool(path) -> np.ndarray:
    """One innovation value per line (or a single CSV column)."""
    vals = np.loadtxt(path, delimiter=",", ndmin=1, dtype=float)
    return vals.reshape(-1)


def gen_staggered(dgp: StaggeredDgp, seed) -> tuple:
    """Draw one panel; returns ``(dataset, truth)``."""
    rng = np.random.default_rng(seed)
    n, T = dgp.n, dgp.T
    G = rng.choice(np.asarray(dgp.cohorts, dtype=float), size=n, p=np.asarray(dgp.probs))
    eta = rng.normal(scale=dgp.unit_sd, size=n)
    alpha = rng.normal(scale=dgp.time_sd, size=T)
    if dgp.residual_pool is not None:
        u = rng.choice(np.asarray(dgp.residual_pool, dtype=float), size=(n, T))
    else:
        u = rng.normal(scale=dgp.innovation_sd, size=(n, T))
    eps = np.empty((n, T))
    prev = np.zeros(n)
    for t in range(T):
        prev = dgp.rho * prev + u[:, t]
        eps[:, t] = prev
    Y = alpha[None, :] + eta[:, None] + eps
    for g in dgp.cohorts:
        rows = G == g
        Y[rows] += np.array([dgp.effect(g, t) for t in range(1, T + 1)])[None, :]
    ds = PanelDataset(range(n), range(1, T + 1), Y, G)
    if dgp.relabel:
        ds = relabel_terminal_cohort(ds)
    return ds, dgp.truth()


# ---------------------------------------------------------------------------
# Instrumented design
# ---------------------------------------------------------------------------


@dataclass
class IvDgp:
    """Single instrument-exposure date with a share of compliers.

    ``D_it = complier_i * exposed_i * 1{t >= g}``; ``sharp=True`` makes every
    unit a complier so ``D`` equals the exposure indicator.
    """

    n: int = 400
    T: int = 6
    g: int = 4
    exposure_share: float = 0.5
    complier_share: float = 0.5
    effect: float = 0.0
    rho: float = 0.5
    noise_sd: float = 1.0
    sharp: bool = False


def gen_iv(dgp: IvDgp, seed) -> tuple:
    rng = np.random.default_rng(seed)
    n, T = dgp.n, dgp.T
    exposed = rng.random(n) < dgp.exposure_share
    if exposed.sum() < 2 or (~exposed).sum() < 2:
        exposed = np.zeros(n, dtype=bool)
        exposed[: n // 2] = True
    complier = np.ones(n, dtype=bool) if dgp.sharp else rng.random(n) < dgp.complier_share
    post = np.arange(1, T + 1) >= dgp.g
    D = (complier & exposed)[:, None] & post[None, :]
    u = rng.normal(scale=dgp.noise_sd, size=(n, T))
    eps = np.empty((n, T))
    prev = np.zeros(n)
    for t in range(T):
        prev = dgp.rho * prev + u[:, t]
        eps[:, t] = prev
    Y = rng.normal(size=T)[None, :] + rng.normal(size=n)[:, None] + eps + dgp.effect * D
    iv = np.where(exposed, float(dgp.g), NEVER)
    ds = PanelDataset(range(n), range(1, T + 1), Y, iv, treatment=D.astype(float), iv_cohort=iv)
    return ds, {"latt": {(dgp.g, t): dgp.effect for t in range(dgp.g, T + 1)}}


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class McRow:
    estimator: str
    reps: int
    failures: int
    mean: float
    bias: float
    sd: float
    rmse: float
    rel_rmse: float
    coverage: float
    ci_length: float
    rel_ci_length: float
    flagged: bool


@dataclass
class McReport:
    """Per-estimator bias, RMSE, coverage and CI length against the truth.

    Relative columns use ``benchmark`` (first estimator by default) as the
    denominator.
    """

    truth: float
    benchmark: str
    seed: int
    rows: list
    points: dict = field(default_factory=dict)
    ses: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def row(self, name: str) -> McRow:
        for r in self.rows:
            if r.estimator == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"truth": self.truth, "benchmark": self.benchmark, "seed": self.seed,
                "rows": [asdict(r) for r in self.rows]}

    def write_csv(self, path) -> None:
        cols = list(McRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow([_fmt(getattr(r, c)) for c in cols])

    def write_heatmap(self, path, estimator: Optional[str] = None) -> None:
        """Mean efficiency weights by ``(target_g, target_t, comp_g, base_t)``."""
        rows = self.weights.get(estimator or self.benchmark, {})
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["target_g", "target_t", "comp_g", "base_t", "mean_weight"])
            for key in sorted(rows, key=lambda k: tuple(-1 if math.isinf(x) else x for x in k)):
                tg, tt, cg, bt = key
                vals = rows[key]
                wr.writerow([_fmt(tg), _fmt(tt), "inf" if math.isinf(cg) else _fmt(cg), _fmt(bt),
                             _fmt(float(np.mean(vals)))])


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{float(v):.12g}"


def run_monte_carlo(generate: Callable, estimators: dict, R: int, seed: int = 0, truth: Optional[float] = None,
                    truth_fn: Optional[Callable] = None, benchmark: Optional[str] = None,
                    threads: int = 1, level: float = 0.95) -> McReport:
    """Simulate ``R`` panels and evaluate each estimator on every one.

    Parameters
    ----------
    generate : callable
        ``generate(seed) -> (dataset, truth_dict)``.
    estimators : dict
        Name to ``f(dataset) -> Estimate``. Insertion order is preserved.
    truth : float, optional
        Target value; otherwise ``truth_fn(truth_dict)``.
    threads : int
        Replications run on a thread pool; results are collected in
        replication order so output does not depend on scheduling.
    """
    if R < 2:
        raise ValidationError("CONFIG", "at least two replications are required")
    names = list(estimators)
    benchmark = benchmark or names[0]
    seeds = np.random.SeedSequence(seed).spawn(R)
    z = float(stats.norm.ppf(0.5 + level / 2))

    def one(ss):
        ds, tr = generate(np.random.default_rng(ss))
        target = truth if truth is not None else truth_fn(tr)
        out = {}
        for name in names:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", EdidWarning)
                    est = estimators[name](ds)
                out[name] = (est.point, est.se, est.weights)
            except (EdidError, np.linalg.LinAlgError):
                out[name] = None
        return target, out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, seeds))
    else:
        results = [one(s) for s in seeds]

    truth_val = float(results[0][0])
    points = {k: np.array([r[1][k][0] if r[1][k] else np.nan for r in results]) for k in names}
    ses = {k: np.array([r[1][k][1] if r[1][k] else np.nan for r in results]) for k in names}
    weights: dict = {}
    for k in names:
        acc: dict = {}
        for r in results:
            if r[1][k]:
                for w in r[1][k][2]:
                    key = (w["target_g"], w["target_t"], w["comp_g"], w["base_t"])
                    acc.setdefault(key, []).append(w["weight"])
        weights[k] = acc

    stats_: dict = {}
    for k in names:
        p, s = points[k], ses[k]
        ok = np.isfinite(p)
        err = p[ok] - truth_val
        cover = np.abs(err) <= z * s[ok]
        stats_[k] = dict(
            reps=int(ok.sum()), failures=int((~ok).sum()), mean=float(p[ok].mean()) if ok.any() else math.nan,
            bias=float(err.mean()) if ok.any() else math.nan, sd=float(p[ok].std(ddof=1)) if ok.sum() > 1 else 0.0,
            rmse=float(np.sqrt(np.mean(err ** 2))) if ok.any() else math.nan,
            coverage=float(cover.mean()) if ok.any() else math.nan,
            ci_length=float(np.mean(2 * z * s[ok])) if ok.any() else math.nan,
        )
    b = stats_[benchmark]
    rows = []
    for k in names:
        st = stats_[k]
        rows.append(McRow(k, st["reps"], st["failures"], st["mean"], st["bias"], st["sd"], st["rmse"],
                          st["rmse"] / b["rmse"] if b["rmse"] > 0 else math.nan, st["coverage"],
                          st["ci_length"], st["ci_length"] / b["ci_length"] if b["ci_length"] > 0 else math.nan,
                          st["failures"] > 0.05 * R))
    return McReport(truth_val, benchmark, int(seed), rows, points, ses, weights)


def staggered_estimators(target="avg") -> dict:
    """The comparison set used for staggered designs, keyed by report label.

    ``target`` is an event time or ``"avg"``.
    """
    from .estimators import estimate_cs, estimate_es, estimate_es_avg, estimate_imputation

    def edid(ds):
        return estimate_es_avg(ds) if target == "avg" else estimate_es(ds, int(target))

    return {
        "edid": edid,
        "cs-sa": lambda ds: estimate_cs(ds, comparison="never", e=target),
        "cs-dcdh": lambda ds: estimate_cs(ds, comparison="notyet", e=target),
        "imputation": lambda ds: estimate_imputation(ds, e=target),
    }


def single_date_estimators(t: int) -> dict:
    from .estimators import (estimate_att_efficient, estimate_cs, estimate_twfe_dynamic,
                             estimate_twfe_static)

    def dyn(ds):
        g = int(np.min(ds.cohort))
        return estimate_twfe_dynamic(ds, t - g)

    return {
        "edid": lambda ds: estimate_att_efficient(ds, int(np.min(ds.cohort)), t),
        "did": lambda ds: estimate_cs(ds, int(np.min(ds.cohort)), t),
        "dtwfe": dyn,
        "twfe": estimate_twfe_static,
    }


__all__ = [
    "SingleDateDgp", "StaggeredDgp", "IvDgp", "gen_single_date", "gen_staggered", "gen_iv",
    "ar2_covariance", "run_monte_carlo", "McReport", "McRow", "staggered_estimators",
    "single_date_estimators", "load_residual_pool", "VARIANTS",
]
