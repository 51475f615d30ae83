"""First-stage estimation: outcome-change regressions, propensity ratios,
inverse propensities and (conditional) covariances.

Two modes share one interface. ``uncond`` uses exact within-cohort means and
covariances. ``cond`` uses polynomial sieves in the covariates and a product
Gaussian Nadaraya-Watson smoother for covariances.

Outcome regressions are fit period by period on a common basis, so the fitted
change ``m(g, t, t')`` is the difference of fitted levels. Because least squares
is linear, this equals regressing ``Y_t - Y_t'`` directly, and antisymmetry and
``m(g, t, t) = 0`` hold exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import EdidWarning, EstimationError, ValidationError
from .panel import NEVER, PanelDataset, format_cohort

RIDGE_SCALE = 1e-10


# ---------------------------------------------------------------------------
# Sieve basis
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def monomial_exponents(d: int, K: int) -> tuple:
    """First ``K`` exponent vectors in graded order (total degree, then lexicographic)."""
    out = []
    deg = 0
    while len(out) < K:
        level = []

        def rec(prefix, remaining, slots):
            if slots == 1:
                level.append(prefix + (remaining,))
                return
            for k in range(remaining, -1, -1):
                rec(prefix + (k,), remaining - k, slots - 1)

        if d == 0:
            level = [()]
        else:
            rec((), deg, d)
        out.extend(level)
        if d == 0:
            break
        deg += 1
    return tuple(out[:K])


def n_monomials(d: int, degree: int) -> int:
    return math.comb(d + degree, degree)


@dataclass(frozen=True)
class SieveBasis:
    """Polynomial basis on covariates standardised with full-sample moments."""

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_data(cls, X: np.ndarray) -> "SieveBasis":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0) if X.shape[0] else np.ones(X.shape[1])
        sd = np.where(sd > 0, sd, 1.0)
        return cls(X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1]), sd)

    def __call__(self, X: np.ndarray, K: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.center) / self.scale
        cols = [np.prod(Z ** np.asarray(p), axis=1) if p else np.ones(Z.shape[0])
                for p in monomial_exponents(Z.shape[1], K)]
        return np.column_stack(cols)


def _solve_psd(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    """Solve ``A x = b`` for a Gram matrix, adding ridge jitter when singular."""
    A = 0.5 * (A + A.T)
    ev = np.linalg.eigvalsh(A) if A.size else np.array([1.0])
    if ev[0] > 1e-12 * max(ev[-1], 1e-300):
        return np.linalg.solve(A, b)
    lam = RIDGE_SCALE * max(np.trace(A), 1e-300) / A.shape[0]
    warnings.warn(f"singular Gram matrix in {what}; ridge {lam:.3g} added", EdidWarning, stacklevel=3)
    return np.linalg.solve(A + lam * np.eye(A.shape[0]), b)


# ---------------------------------------------------------------------------
# Outcome-change regressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MFunction:
    """Fitted ``x -> E[Y_t - Y_t' | G = g, X = x]``."""

    cohort: float
    t: int
    tp: int
    coef: np.ndarray
    basis: Optional[SieveBasis] = None

    @property
    def value(self) -> float:
        """Scalar value for constant (covariate-free) fits."""
        return float(self.coef[0])

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.basis is None:
            n = np.atleast_2d(X).shape[0] if np.ndim(X) else 1
            return np.full(n, self.coef[0])
        return self.basis(X, len(self.coef)) @ self.coef


def _cohort_rows(ds: PanelDataset, g) -> np.ndarray:
    rows = np.flatnonzero(ds.cohort == g)
    if rows.size == 0:
        raise EstimationError("EMPTY_COHORT", f"cohort {format_cohort(g)} has no units")
    return rows


def fit_cell_means(ds: PanelDataset, pairs: Sequence[tuple]) -> list:
    """Within-cohort sample means of ``Y_t - Y_t'`` for each ``(g, t, t')``."""
    out = []
    for g, t, tp in pairs:
        rows = _cohort_rows(ds, g)
        diff = ds.outcomes[rows, t - 1] - ds.outcomes[rows, tp - 1]
        out.append(MFunction(g, t, tp, np.array([diff.mean()])))
    return out


def fit_outcome_regression(ds: PanelDataset, g, t: int, tp: int, K: int = 2,
                           basis: Optional[SieveBasis] = None) -> MFunction:
    """Least-squares projection of ``Y_t - Y_t'`` on the first ``K`` sieve terms within cohort ``g``."""
    if ds.d == 0 and K > 1:
        raise ValidationError("NO_COVARIATES", "covariate sieve requested on a covariate-free panel")
    rows = _cohort_rows(ds, g)
    if rows.size <= K and K > 1:
        raise EstimationError("SMALL_COHORT", f"cohort {format_cohort(g)} has {rows.size} <= K={K} units")
    basis = basis or SieveBasis.from_data(ds.covariates)
    P = basis(ds.covariates[rows], K)
    y = ds.outcomes[rows, t - 1] - ds.outcomes[rows, tp - 1]
    coef = _solve_psd(P.T @ P, P.T @ y, "outcome regression")
    return MFunction(g, t, tp, coef, basis)


# ---------------------------------------------------------------------------
# Propensity ratios and inverse propensities
# ---------------------------------------------------------------------------


def _penalty(C_n, n: int) -> float:
    if isinstance(C_n, str):
        key = C_n.lower()
        if key == "aic":
            return 2.0
        if key == "bic":
            return math.log(n)
        raise ValueError(f"unknown information criterion {C_n!r}")
    return float(C_n)


def default_grid(n: int, d: int) -> tuple:
    kmax = max(1, int(math.floor(n ** (1.0 / 3.0) + 1e-9)))
    if d == 0:
        return (1,)
    return tuple(range(1, kmax + 1))


def _ratio_loss_fit(P: np.ndarray, num: np.ndarray, den: np.ndarray):
    """Minimise ``E_n[den (P b)^2 - 2 num (P b)]``; returns (beta, loss)."""
    n = P.shape[0]
    A = (P * den[:, None]).T @ P / n
    b = P.T @ num / n
    beta = _solve_psd(A, b, "sieve ratio")
    fit = P @ beta
    loss = float(np.mean(den * fit ** 2 - 2 * num * fit))
    return beta, loss


@dataclass
class SieveSelection:
    K: int
    table: list  # rows of (K, loss, criterion)


def _select(P_full: np.ndarray, num: np.ndarray, den: np.ndarray, grid, C_n) -> SieveSelection:
    n = P_full.shape[0]
    pen = _penalty(C_n, n)
    rows = []
    for K in sorted(set(int(k) for k in grid)):
        _, loss = _ratio_loss_fit(P_full[:, :K], num, den)
        rows.append((K, loss, 2 * loss + pen * K / n))
    best = rows[0]
    for r in rows[1:]:
        # strict improvement beyond rounding keeps ties at the smaller K
        if r[2] < best[2] - 1e-12 * max(1.0, abs(best[2])):
            best = r
    return SieveSelection(best[0], rows)


@dataclass(frozen=True)
class PropensityRatio:
    """Fitted ``x -> p_g(x) / p_g'(x)``, floored at ``floor``."""

    g: float
    gp: float
    K: int
    coef: np.ndarray
    basis: Optional[SieveBasis]
    floor: float
    n_floored: int = 0

    @property
    def value(self) -> float:
        return max(float(self.coef[0]), self.floor)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.basis is None:
            n = np.atleast_2d(X).shape[0]
            return np.full(n, self.value)
        return np.maximum(self.basis(X, self.K) @ self.coef, self.floor)


def select_sieve_dim(ds: PanelDataset, g, gp, grid: Sequence[int], C_n="aic",
                     basis: Optional[SieveBasis] = None) -> SieveSelection:
    """Pick ``K`` minimising ``2 * loss_K + C_n K / n`` for the ratio ``p_g / p_g'``.

    ``C_n`` is a number or ``"aic"`` (2) / ``"bic"`` (log n). Ties go to the
    smaller ``K``.
    """
    basis = basis or SieveBasis.from_data(ds.covariates)
    if ds.d == 0 and max(grid) > 1:
        raise ValidationError("NO_COVARIATES", "sieve grid beyond K=1 needs covariates")
    P = basis(ds.covariates, max(grid))
    return _select(P, ds.indicator(g), ds.indicator(gp), grid, C_n)


def fit_propensity_ratio(ds: PanelDataset, g, gp, K: Optional[int] = None, grid=None, C_n="aic",
                         floor: float = 1e-6, basis: Optional[SieveBasis] = None,
                         num_mask=None, den_mask=None) -> PropensityRatio:
    """Sieve estimate of ``p_g(X) / p_g'(X)`` from the convex ratio loss.

    The minimiser of ``E_n[G_g' (psi'b)^2 - 2 G_g psi'b]`` is
    ``b = E_n[G_g' psi psi']^{-1} E_n[G_g psi]``. With a constant basis this is
    the count ratio ``n_g / n_g'``. ``num_mask``/``den_mask`` replace the cohort
    indicators (pooled comparison groups).
    """
    num = ds.indicator(g) if num_mask is None else np.asarray(num_mask, dtype=float)
    den = ds.indicator(gp) if den_mask is None else np.asarray(den_mask, dtype=float)
    if den.sum() == 0:
        raise EstimationError("EMPTY_COHORT", f"comparison cohort {format_cohort(gp)} has no units")
    if ds.d == 0:
        K, grid = 1, None
    if K is None:
        grid = grid or default_grid(ds.n, ds.d)
        basis = basis or SieveBasis.from_data(ds.covariates)
        K = _select(basis(ds.covariates, max(grid)), num, den, grid, C_n).K
    if K == 1:
        coef = np.array([num.sum() / den.sum()])
        return PropensityRatio(g, gp, 1, coef, None if ds.d == 0 else basis, floor, int(coef[0] < floor))
    basis = basis or SieveBasis.from_data(ds.covariates)
    P = basis(ds.covariates, K)
    beta, _ = _ratio_loss_fit(P, num, den)
    n_floor = int(np.sum(P @ beta < floor))
    if n_floor:
        warnings.warn(f"{n_floor} fitted ratios floored at {floor}", EdidWarning, stacklevel=2)
    return PropensityRatio(g, gp, K, beta, basis, floor, n_floor)


def fit_inverse_propensity(ds: PanelDataset, gp, K: Optional[int] = None, grid=None, C_n="aic",
                           floor: float = 1e-6, basis: Optional[SieveBasis] = None,
                           mask=None) -> PropensityRatio:
    """Sieve estimate of ``1 / p_g'(X)`` from the loss ``E_n[a^2 G_g' - 2a]``.

    Same machinery as the ratio with the numerator indicator replaced by ones.
    """
    ones = np.ones(ds.n)
    return fit_propensity_ratio(ds, gp, gp, K=K, grid=grid, C_n=C_n, floor=floor, basis=basis,
                                num_mask=ones, den_mask=mask)


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------


def _diff_matrix(T: int, pairs: Sequence[tuple]) -> np.ndarray:
    """``T x k`` matrix mapping outcome levels to the listed differences ``Y_a - Y_b``."""
    C = np.zeros((T, len(pairs)))
    for j, (a, b) in enumerate(pairs):
        C[a - 1, j] += 1.0
        C[b - 1, j] -= 1.0
    return C


def group_covariance(ds: PanelDataset, gp, pairs: Sequence[tuple]) -> np.ndarray:
    """Within-cohort covariance (divisor ``n_g``) of the differences ``Y_a - Y_b``."""
    rows = _cohort_rows(ds, gp)
    if rows.size < 2:
        raise EstimationError("SMALL_COHORT", f"cohort {format_cohort(gp)} has a single unit")
    Z = ds.outcomes[rows] @ _diff_matrix(ds.T, pairs)
    Z = Z - Z.mean(axis=0)
    return Z.T @ Z / rows.size


def silverman_bandwidth(X: np.ndarray) -> np.ndarray:
    n, d = X.shape
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return 1.06 * sd * n ** (-1.0 / (4 + d))


def kernel_weights(X_query: np.ndarray, X_data: np.ndarray, h) -> tuple:
    """Row-normalised product-Gaussian weights; returns (weights, zero-mass rows)."""
    h = np.broadcast_to(np.asarray(h, dtype=float), (X_data.shape[1],))
    Zq = X_query / h
    Zd = X_data / h
    sq = (Zq ** 2).sum(1)[:, None] + (Zd ** 2).sum(1)[None, :] - 2 * Zq @ Zd.T
    W = np.exp(-0.5 * np.maximum(sq, 0.0))
    mass = W.sum(axis=1)
    empty = mass <= 0
    W[empty] = 1.0
    mass[empty] = W.shape[1]
    return W / mass[:, None], empty


def conditional_covariance(ds: PanelDataset, fits: "NuisanceFit", gp, t: int, ta: int, tb: int,
                           x, h=None) -> float:
    """Nadaraya-Watson estimate of ``Cov(Y_t - Y_ta, Y_t - Y_tb | G = g', X = x)``.

    Residual products ``(dY_a - m_a(X_i))(dY_b - m_b(X_i))`` over cohort ``g'``
    units, weighted by ``K_h(X_i - x)``. Zero kernel mass at ``x`` falls back to
    the unconditional within-cohort value.
    """
    rows = _cohort_rows(ds, gp)
    if rows.size < 2:
        raise EstimationError("SMALL_COHORT", f"cohort {format_cohort(gp)} has a single unit")
    Xg = ds.covariates[rows]
    ea = (ds.outcomes[rows, t - 1] - ds.outcomes[rows, ta - 1]) - fits.m_at(gp, t, ta, Xg)
    eb = (ds.outcomes[rows, t - 1] - ds.outcomes[rows, tb - 1]) - fits.m_at(gp, t, tb, Xg)
    if h is None:
        h = silverman_bandwidth(Xg)
    W, empty = kernel_weights(np.atleast_2d(np.asarray(x, dtype=float)), Xg, h)
    if empty[0]:
        warnings.warn("zero kernel mass at query point; using unconditional covariance", EdidWarning,
                      stacklevel=2)
    return float(W[0] @ (ea * eb))


# ---------------------------------------------------------------------------
# Bundled first stage
# ---------------------------------------------------------------------------


@dataclass
class NuisanceConfig:
    mode: str = "uncond"  # "uncond" | "cond"
    outcome_degree: int = 2
    ratio_grid: Optional[tuple] = None  # K values; default 1..floor(n^(1/3))
    criterion: object = "aic"  # "aic", "bic" or a numeric C_n
    ratio_floor: float = 1e-6
    bandwidth: Optional[float] = None
    min_cell: int = 2

    def __post_init__(self):
        self.mode = {"unconditional": "uncond", "conditional": "cond"}.get(self.mode, self.mode)
        if self.mode not in ("uncond", "cond"):
            raise ValidationError("CONFIG", f"unknown nuisance mode {self.mode!r}")

    def as_dict(self) -> dict:
        return {"mode": self.mode, "outcome_degree": self.outcome_degree,
                "ratio_grid": list(self.ratio_grid) if self.ratio_grid else None,
                "criterion": self.criterion, "ratio_floor": self.ratio_floor,
                "bandwidth": self.bandwidth, "min_cell": self.min_cell}


@dataclass
class NuisanceFit:
    """All first-stage objects for one panel and one grouping variable.

    ``group`` is the grouping vector (treatment cohort, or instrument exposure
    for instrumented designs). Evaluations are at the sample covariates.
    """

    ds: PanelDataset
    config: NuisanceConfig
    group: np.ndarray
    cohorts: tuple
    pi: dict
    levels: dict  # cohort -> (n x T) fitted E[Y_t | G=c, X_i] (or cell means)
    basis: Optional[SieveBasis] = None
    _ratio: dict = field(default_factory=dict)
    _inv: dict = field(default_factory=dict)
    _second: dict = field(default_factory=dict)
    _resid: dict = field(default_factory=dict)
    floored: int = 0
    empty_kernel_rows: int = 0

    @property
    def conditional(self) -> bool:
        return self.config.mode == "cond"

    def indicator(self, c) -> np.ndarray:
        return (self.group == c).astype(float)

    def rows(self, c) -> np.ndarray:
        return np.flatnonzero(self.group == c)

    # -- outcome regressions ------------------------------------------------
    def m(self, c, t: int, tp: int) -> np.ndarray:
        """``m(c, t, t')`` evaluated at every unit's covariates."""
        if c not in self.levels:
            raise EstimationError("MISSING_NUISANCE", f"no outcome fit for cohort {format_cohort(c)}")
        L = self.levels[c]
        return L[:, t - 1] - L[:, tp - 1]

    def m_at(self, c, t: int, tp: int, X: np.ndarray) -> np.ndarray:
        """``m(c, t, t')`` at arbitrary covariate rows (sample rows are matched exactly)."""
        if not self.conditional:
            return np.full(np.atleast_2d(X).shape[0], self.m(c, t, tp)[0])
        coef = self._level_coef(c)
        P = self.basis(X, coef.shape[0])
        return P @ (coef[:, t - 1] - coef[:, tp - 1])

    def _level_coef(self, c):
        rows = self.rows(c)
        K = _outcome_K(self.ds.d, self.config.outcome_degree, rows.size)
        P = self.basis(self.ds.covariates[rows], K)
        return _solve_psd(P.T @ P, P.T @ self.ds.outcomes[rows], "outcome regression")

    def residuals(self, c) -> np.ndarray:
        """``Y - fitted level`` for units of cohort ``c`` (``n_c x T``)."""
        if c not in self._resid:
            rows = self.rows(c)
            self._resid[c] = self.ds.outcomes[rows] - self.levels[c][rows]
        return self._resid[c]

    # -- propensity objects -------------------------------------------------
    def ratio(self, g, c) -> np.ndarray:
        """``p_g(X_i) / p_c(X_i)`` for every unit (exactly 1 when ``g == c``)."""
        if g == c:
            return np.ones(self.ds.n)
        key = (g, c)
        if key not in self._ratio:
            if not self.conditional:
                self._ratio[key] = np.full(self.ds.n, self.pi[g] / self.pi[c])
            else:
                fit = fit_propensity_ratio(
                    self.ds, g, c, grid=self.config.ratio_grid or default_grid(self.ds.n, self.ds.d),
                    C_n=self.config.criterion, floor=self.config.ratio_floor, basis=self.basis,
                    num_mask=self.indicator(g), den_mask=self.indicator(c))
                self.floored += fit.n_floored
                self._ratio[key] = fit(self.ds.covariates)
        return self._ratio[key]

    def inverse_propensity(self, c) -> np.ndarray:
        """``1 / p_c(X_i)`` for every unit."""
        if c not in self._inv:
            if not self.conditional:
                self._inv[c] = np.full(self.ds.n, 1.0 / self.pi[c])
            else:
                fit = fit_inverse_propensity(
                    self.ds, c, grid=self.config.ratio_grid or default_grid(self.ds.n, self.ds.d),
                    C_n=self.config.criterion, floor=self.config.ratio_floor, basis=self.basis,
                    mask=self.indicator(c))
                self.floored += fit.n_floored
                self._inv[c] = fit(self.ds.covariates)
        return self._inv[c]

    # -- covariances --------------------------------------------------------
    def second_moments(self, c) -> np.ndarray:
        """Residual second-moment matrix of outcome levels in cohort ``c``.

        ``T x T`` (divisor ``n_c``) in ``uncond`` mode, ``n x T x T`` (one NW
        estimate per sample covariate value) in ``cond`` mode. Covariances of any
        outcome differences follow by ``C' S C``.
        """
        if c not in self._second:
            R = self.residuals(c)
            if R.shape[0] < 2:
                raise EstimationError("SMALL_COHORT", f"cohort {format_cohort(c)} has a single unit")
            if not self.conditional:
                self._second[c] = R.T @ R / R.shape[0]
            else:
                Xc = self.ds.covariates[self.rows(c)]
                h = self.config.bandwidth if self.config.bandwidth is not None else silverman_bandwidth(Xc)
                W, empty = kernel_weights(self.ds.covariates, Xc, h)
                if empty.any():
                    self.empty_kernel_rows += int(empty.sum())
                    warnings.warn(f"{int(empty.sum())} query points with zero kernel mass; "
                                  "unconditional covariance used there", EdidWarning, stacklevel=2)
                self._second[c] = np.einsum("il,lt,ls->its", W, R, R, optimize=True)
        return self._second[c]


def _outcome_K(d: int, degree: int, n_rows: int) -> int:
    if d == 0:
        return 1
    K = n_monomials(d, max(0, degree))
    return max(1, min(K, n_rows - 1))


def fit_nuisance(ds: PanelDataset, config: Optional[NuisanceConfig] = None, group=None) -> NuisanceFit:
    """Fit every first-stage object needed by the estimators in one pass."""
    config = config or NuisanceConfig()
    group = ds.cohort if group is None else np.asarray(group, dtype=float)
    if config.mode == "cond" and ds.d == 0:
        raise ValidationError("NO_COVARIATES", "conditional mode requires covariates")
    cohorts = tuple(float(c) for c in np.unique(group))
    n = ds.n
    pi = {c: float(np.mean(group == c)) for c in cohorts}
    levels = {}
    basis = None
    if config.mode == "uncond":
        for c in cohorts:
            rows = np.flatnonzero(group == c)
            levels[c] = np.broadcast_to(ds.outcomes[rows].mean(axis=0), (n, ds.T))
    else:
        basis = SieveBasis.from_data(ds.covariates)
        for c in cohorts:
            rows = np.flatnonzero(group == c)
            K = _outcome_K(ds.d, config.outcome_degree, rows.size)
            P = basis(ds.covariates[rows], K)
            coef = _solve_psd(P.T @ P, P.T @ ds.outcomes[rows], "outcome regression")
            levels[c] = basis(ds.covariates, K) @ coef
    return NuisanceFit(ds, config, group, cohorts, pi, levels, basis)


__all__ = [
    "NEVER", "SieveBasis", "MFunction", "PropensityRatio", "SieveSelection", "NuisanceConfig",
    "NuisanceFit", "fit_cell_means", "fit_outcome_regression", "fit_propensity_ratio",
    "select_sieve_dim", "fit_inverse_propensity", "conditional_covariance", "group_covariance",
    "fit_nuisance", "kernel_weights", "silverman_bandwidth", "monomial_exponents",
]
