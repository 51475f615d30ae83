"""Generated outcomes, covariance of stacked influence functions, optimal
weights and efficient influence functions.

Sign convention: the efficient influence function of ``ATT(g, t)`` is
``w' Ytilde - (G_g / pi_g) ATT`` with ``ATT = E_n[w' Ytilde]``, so its sample
mean is exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .design import IfIndex
from .errors import EdidWarning, EstimationError
from .nuisance import NuisanceFit
from .panel import NEVER, CohortIndex, format_cohort

MERGE_CORR = 1.0 - 1e-10
PINV_RTOL = 1e-10


@dataclass(frozen=True)
class GeneratedOutcomePanel:
    """Per-unit generated outcomes for one target.

    ``values[i, j]`` is the generated outcome of unit ``i`` for entry ``j`` of
    ``index``; ``own`` is ``G_g / pi_g``.
    """

    index: IfIndex
    values: np.ndarray
    own: np.ndarray

    @property
    def target(self) -> tuple:
        return (self.index.g, self.index.t)

    def entry_means(self) -> np.ndarray:
        return self.values.mean(axis=0)


def _require(fits: NuisanceFit, c):
    if c not in fits.pi:
        code = "NO_NEVER_COHORT" if c == NEVER else "MISSING_NUISANCE"
        raise EstimationError(code, f"no units in cohort {format_cohort(c)}")


def generated_outcomes(fits: NuisanceFit, index: IfIndex) -> GeneratedOutcomePanel:
    """Generated outcomes for every entry ``(g', t')`` of ``index``.

    For ``g' != g``::

        (G_g/pi)(Y_t - Y_1 - m_inf(t,t') - m_g'(t',1))
          - r_{g,inf}(G_inf/pi)(Y_t - Y_t' - m_inf(t,t'))
          - r_{g,g'}(G_g'/pi)(Y_t' - Y_1 - m_g'(t',1))

    and for ``g' = g`` the first and last terms combine into
    ``(G_g/pi)(Y_t - Y_t' - m_inf(t,t'))``.
    """
    g, t = index.g, index.t
    _require(fits, g)
    _require(fits, NEVER)
    Y = fits.ds.outcomes
    pi = fits.pi[g]
    Gg = fits.indicator(g)
    Ginf = fits.indicator(NEVER)
    r_inf = fits.ratio(g, NEVER)
    yt = Y[:, t - 1]
    out = np.empty((fits.ds.n, len(index)))
    for j, e in enumerate(index.entries):
        m_inf = fits.m(NEVER, t, e.base)
        ctrl = r_inf * Ginf * (yt - Y[:, e.base - 1] - m_inf)
        if e.comp == g:
            out[:, j] = (Gg * (yt - Y[:, e.base - 1] - m_inf) - ctrl) / pi
            continue
        _require(fits, e.comp)
        m_c = fits.m(e.comp, e.base, 1)
        Gc = fits.indicator(e.comp)
        out[:, j] = (Gg * (yt - Y[:, 0] - m_inf - m_c) - ctrl
                     - fits.ratio(g, e.comp) * Gc * (Y[:, e.base - 1] - Y[:, 0] - m_c)) / pi
    return GeneratedOutcomePanel(index, out, Gg / pi)


# ---------------------------------------------------------------------------
# Covariance of the stacked influence functions
# ---------------------------------------------------------------------------


def _level_maps(index: IfIndex, T: int):
    """Linear maps from outcome levels to the residual contrasts of each cohort.

    Returns ``A`` (target cohort), ``B`` (never treated) and a dict of ``C_c``
    for other comparison cohorts; each is ``T x J``.
    """
    g, t = index.g, index.t
    J = len(index)
    A = np.zeros((T, J))
    B = np.zeros((T, J))
    C: dict = {}
    for j, e in enumerate(index.entries):
        A[t - 1, j] += 1.0
        B[t - 1, j] += 1.0
        B[e.base - 1, j] -= 1.0
        if e.comp == g:
            A[e.base - 1, j] -= 1.0
        else:
            A[0, j] -= 1.0
            Cc = C.setdefault(e.comp, np.zeros((T, J)))
            Cc[e.base - 1, j] += 1.0
            Cc[0, j] -= 1.0
    return A, B, C


def omega_star(fits: NuisanceFit, index: IfIndex) -> np.ndarray:
    """Model-based covariance of the stacked influence functions, up to scale.

    Assembled as ``s_g A'S_g A + s_inf B'S_inf B + sum_c s_c C_c'S_c C_c`` where
    ``S_c`` is the residual second-moment matrix of outcome levels in cohort
    ``c`` and ``s_c`` the inverse propensity. Expanding the quadratic forms
    gives the five-term entry formula with indicator cross terms. Returns
    ``J x J`` (``uncond``) or ``n x J x J`` (``cond``, one matrix per unit).
    """
    A, B, C = _level_maps(index, fits.ds.T)
    g = index.g
    terms = [(g, A), (NEVER, B)] + sorted(C.items())
    out = None
    for c, M in terms:
        _require(fits, c)
        S = fits.second_moments(c)
        s = fits.inverse_propensity(c)
        if S.ndim == 2:
            part = s[0] * (M.T @ S @ M)
        else:
            part = s[:, None, None] * np.einsum("tj,its,sk->ijk", M, S, M, optimize=True)
        out = part if out is None else out + part
    return _psd_repair(out)


def _psd_repair(V: np.ndarray) -> np.ndarray:
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    ev, Q = np.linalg.eigh(V)
    top = np.max(np.abs(ev), axis=-1, keepdims=True)
    bad = ev < -1e-12 * np.maximum(top, 1e-300)
    if np.any(bad):
        warnings.warn("indefinite covariance matrix; negative eigenvalues clipped at 0", EdidWarning,
                      stacklevel=3)
        ev = np.maximum(ev, 0.0)
        V = (Q * ev[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return V


def omega_direct(gen: GeneratedOutcomePanel) -> np.ndarray:
    """Sample second moment of the per-entry influence functions.

    Column ``j`` is ``Ytilde_j - (G_g/pi) ATT_j`` with ``ATT_j`` the entry mean.
    Without covariates this coincides with :func:`omega_star`.
    """
    means = gen.entry_means()
    F = gen.values - gen.own[:, None] * means[None, :]
    return F.T @ F / F.shape[0]


# ---------------------------------------------------------------------------
# Optimal weights
# ---------------------------------------------------------------------------


def _merge_groups(V: np.ndarray) -> list:
    """Groups of entries that duplicate each other (correlation 1, equal variance)."""
    J = V.shape[0]
    d = np.diag(V).copy()
    groups, seen = [], np.zeros(J, dtype=bool)
    for j in range(J):
        if seen[j]:
            continue
        members = [j]
        seen[j] = True
        if d[j] > 0:
            for k in range(j + 1, J):
                if seen[k] or d[k] <= 0:
                    continue
                corr = V[j, k] / np.sqrt(d[j] * d[k])
                if corr > MERGE_CORR and abs(d[j] - d[k]) <= 1e-8 * max(d[j], d[k]):
                    members.append(k)
                    seen[k] = True
        groups.append(members)
    return groups


def _kkt_weights(V: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of ``min w'Vw`` subject to ``1'w = 1``.

    Solved through the bordered system ``[[V, 1], [1', 0]]``. When ``V`` is
    singular the argmin is an affine set and the minimum-norm point is taken;
    it depends on ``V`` only through that set, so ``aV + c11'`` gives the same
    weights.
    """
    J = V.shape[0]
    scale = np.trace(V) / J
    scale = scale if scale > 0 else 1.0
    K = np.zeros((J + 1, J + 1))
    K[:J, :J] = V / scale
    K[:J, J] = 1.0
    K[J, :J] = 1.0
    rhs = np.zeros(J + 1)
    rhs[J] = 1.0
    ev = np.linalg.eigvalsh(V / scale)
    if ev[0] > PINV_RTOL * max(ev[-1], 1.0):
        z = np.linalg.solve(K, rhs)
    else:
        z = np.linalg.pinv(K, rcond=PINV_RTOL, hermitian=True) @ rhs
    w = z[:J]
    if not np.all(np.isfinite(w)) or np.max(np.abs(K @ z - rhs)) > 1e-6:
        raise EstimationError("DEGENERATE_INFORMATION", "1' V^+ 1 is numerically zero")
    return w


def optimal_weights(omega: np.ndarray) -> np.ndarray:
    """Efficiency weights ``1'V^{-1} / (1'V^{-1}1)`` for a stacked covariance.

    Entries that duplicate each other are merged and share their pooled weight
    equally. Singular matrices use the minimum-norm constrained minimiser. A
    3-d input is treated as one matrix per unit and returns ``n x J`` weights.
    """
    V = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(V)):
        raise EstimationError("DEGENERATE_INFORMATION", "covariance matrix is not finite")
    if V.ndim == 3:
        return _batched_weights(V)
    V = 0.5 * (V + V.T)
    J = V.shape[0]
    if J == 1:
        return np.ones(1)
    groups = _merge_groups(V)
    if len(groups) == J:
        w = _kkt_weights(V)
    else:
        reps = [grp[0] for grp in groups]
        w_red = _kkt_weights(V[np.ix_(reps, reps)])
        w = np.zeros(J)
        for grp, wr in zip(groups, w_red):
            w[grp] = wr / len(grp)
    return w / w.sum()


def _batched_weights(V: np.ndarray) -> np.ndarray:
    n, J, _ = V.shape
    V = 0.5 * (V + np.swapaxes(V, 1, 2))
    if J == 1:
        return np.ones((n, 1))
    groups = _merge_groups(V.mean(axis=0))
    reps = [grp[0] for grp in groups]
    R = V[:, reps][:, :, reps]
    Jr = len(reps)
    scale = np.trace(R, axis1=1, axis2=2) / Jr
    scale = np.where(scale > 0, scale, 1.0)
    K = np.zeros((n, Jr + 1, Jr + 1))
    K[:, :Jr, :Jr] = R / scale[:, None, None]
    K[:, :Jr, Jr] = 1.0
    K[:, Jr, :Jr] = 1.0
    rhs = np.zeros(Jr + 1)
    rhs[Jr] = 1.0
    ev = np.linalg.eigvalsh(R / scale[:, None, None])
    ok = ev[:, 0] > PINV_RTOL * np.maximum(ev[:, -1], 1.0)
    w_red = np.empty((n, Jr))
    if ok.any():
        w_red[ok] = np.linalg.solve(K[ok], np.broadcast_to(rhs, (int(ok.sum()), Jr + 1))[..., None])[:, :Jr, 0]
    for i in np.flatnonzero(~ok):
        w_red[i] = _kkt_weights(R[i])
    w = np.zeros((n, J))
    for grp, col in zip(groups, w_red.T):
        for k in grp:
            w[:, k] = col / len(grp)
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Efficient influence functions
# ---------------------------------------------------------------------------


def eif_att(gen: GeneratedOutcomePanel, weights: np.ndarray) -> tuple:
    """Weighted estimate and its influence function.

    Returns ``(att, eif)`` with ``att = E_n[w'Ytilde]`` and
    ``eif = w'Ytilde - (G_g/pi) att``.
    """
    w = np.asarray(weights, dtype=float)
    psi = (gen.values * w).sum(axis=1) if w.ndim == 2 else gen.values @ w
    att = float(psi.mean())
    return att, psi - gen.own * att


def eif_pi(group: np.ndarray, g) -> np.ndarray:
    """Influence function of the cohort share: ``G_g - pi_g``."""
    G = (np.asarray(group) == g).astype(float)
    return G - G.mean()


def eif_es(atts: dict, eifs: dict, group: np.ndarray, e: int, idx: CohortIndex) -> tuple:
    """Event-study aggregate and its influence function at horizon ``e``.

    ``atts``/``eifs`` map each cohort ``g`` to ``ATT(g, g+e)`` and its influence
    function. The share-estimation correction is
    ``ATT_g / sum(pi) * ((G_g - pi_g) - q_g sum_s (G_s - pi_s))``.
    """
    cohorts = idx.treated_at(e)
    if not cohorts or e < 0:
        raise EstimationError("NO_COHORT_AT_HORIZON", f"no treated cohort is observed at event time {e}")
    missing = [g for g in cohorts if g not in atts]
    if missing:
        raise EstimationError("MISSING_NUISANCE", f"ATT missing for cohorts {missing} at e={e}")
    group = np.asarray(group, dtype=float)
    pis = {g: float(np.mean(group == g)) for g in cohorts}
    tot = sum(pis.values())
    q = {g: pis[g] / tot for g in cohorts}
    dev = {g: eif_pi(group, g) for g in cohorts}
    dev_sum = sum(dev.values())
    es = sum(q[g] * atts[g] for g in cohorts)
    out = np.zeros(group.shape[0])
    for g in cohorts:
        out += q[g] * eifs[g] + atts[g] / tot * (dev[g] - q[g] * dev_sum)
    return float(es), out


def analytic_se(eif: np.ndarray) -> float:
    """``sqrt(mean(eif^2) / n)``."""
    eif = np.asarray(eif, dtype=float)
    return float(np.sqrt(np.mean(eif ** 2) / eif.shape[0]))


__all__ = [
    "GeneratedOutcomePanel", "generated_outcomes", "omega_star", "omega_direct", "optimal_weights",
    "eif_att", "eif_pi", "eif_es", "analytic_se",
]
