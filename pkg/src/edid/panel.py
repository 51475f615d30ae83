"""Balanced short panels with absorbing, staggered treatment.

Periods are stored internally as ``1..T`` in sort order of the original labels.
The never-treated cohort is the explicit sentinel :data:`NEVER` (``inf``), so
event-time arithmetic on never-treated units can never collide with a real
period.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import EdidWarning, ValidationError

NEVER = math.inf

_NEVER_TOKENS = {"inf", "+inf", "infinity", "never", "nan", ""}


def is_never(g) -> bool:
    return g == NEVER


def format_cohort(g) -> str:
    return "inf" if is_never(g) else str(int(g))


def _frozen(a: Optional[np.ndarray], dtype=float) -> Optional[np.ndarray]:
    if a is None:
        return None
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced ``n x T`` outcome panel.

    Parameters
    ----------
    unit_ids : sequence
        Opaque unit labels, length ``n``.
    periods : sequence of int
        Original period labels, strictly increasing, length ``T``. Internally
        period ``periods[k]`` is period ``k + 1``.
    outcomes : ndarray, shape (n, T)
    cohort : ndarray, shape (n,)
        First treated period on the internal ``1..T`` scale, or ``NEVER``.
    covariates : ndarray, shape (n, d), optional
    treatment : ndarray, shape (n, T), optional
        Realised binary treatment paths (instrumented designs only).
    iv_cohort : ndarray, shape (n,), optional
        First period of exposure to the instrument (internal scale) or ``NEVER``.
    covariate_names : sequence of str, optional
    """

    unit_ids: tuple
    periods: tuple
    outcomes: np.ndarray
    cohort: np.ndarray
    covariates: np.ndarray = None
    treatment: Optional[np.ndarray] = None
    iv_cohort: Optional[np.ndarray] = None
    covariate_names: tuple = ()

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("unit_ids", tuple(self.unit_ids))
        set_("periods", tuple(int(p) for p in self.periods))
        Y = np.asarray(self.outcomes, dtype=float)
        if Y.ndim != 2:
            raise ValidationError("SCHEMA", "outcomes must be an n x T matrix")
        n, T = Y.shape
        set_("outcomes", _frozen(Y))
        set_("cohort", _frozen(np.asarray(self.cohort, dtype=float).reshape(-1)))
        X = self.covariates
        X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        set_("covariates", _frozen(X))
        set_("treatment", _frozen(self.treatment))
        if self.iv_cohort is not None:
            set_("iv_cohort", _frozen(np.asarray(self.iv_cohort, dtype=float).reshape(-1)))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        set_("covariate_names", names)
        if len(self.unit_ids) != n or self.cohort.shape[0] != n or X.shape[0] != n:
            raise ValidationError("SCHEMA", "unit_ids, cohort, covariates and outcomes disagree on n")
        if len(self.periods) != T:
            raise ValidationError("SCHEMA", "periods length must equal the number of outcome columns")
        if any(b <= a for a, b in zip(self.periods, self.periods[1:])):
            raise ValidationError("SCHEMA", "periods must be strictly increasing")

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def T(self) -> int:
        return self.outcomes.shape[1]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def is_iv(self) -> bool:
        return self.treatment is not None and self.iv_cohort is not None

    def y(self, t: int) -> np.ndarray:
        """Outcome column for internal period ``t`` (1-based)."""
        return self.outcomes[:, t - 1]

    def indicator(self, g) -> np.ndarray:
        return (self.cohort == g).astype(float)

    def treated_matrix(self) -> np.ndarray:
        """Absorbing-treatment indicator ``D_it = 1{t >= G_i}``."""
        t = np.arange(1, self.T + 1)
        return (t[None, :] >= self.cohort[:, None]).astype(float)

    def subset(self, rows) -> "PanelDataset":
        """Panel restricted to (possibly repeated) row indices, relabelling units."""
        rows = np.asarray(rows)
        ids = tuple(range(len(rows))) if len(set(rows.tolist())) != len(rows) else tuple(
            self.unit_ids[i] for i in rows
        )
        return dataclasses.replace(
            self,
            unit_ids=ids,
            outcomes=self.outcomes[rows],
            cohort=self.cohort[rows],
            covariates=self.covariates[rows],
            treatment=None if self.treatment is None else self.treatment[rows],
            iv_cohort=None if self.iv_cohort is None else self.iv_cohort[rows],
        )

    def with_outcomes(self, Y: np.ndarray) -> "PanelDataset":
        return dataclasses.replace(self, outcomes=Y)


@dataclass
class Issue:
    code: str
    message: str


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_if_failed(self):
        if self.errors:
            first = self.errors[0]
            raise ValidationError(first.code, "; ".join(f"{e.code}: {e.message}" for e in self.errors))


def validate(ds: PanelDataset, min_cell: int = 2, efficient: bool = True) -> ValidationReport:
    """Check the invariants every estimator relies on.

    A cohort smaller than ``min_cell`` is fatal when ``efficient`` is true
    (within-cohort covariances are needed) and a warning otherwise.
    """
    rep = ValidationReport()
    Y = ds.outcomes
    if not np.all(np.isfinite(Y)):
        rep.errors.append(Issue("UNBALANCED_PANEL", "outcome matrix has missing or non-finite cells"))
    g = ds.cohort
    finite = np.isfinite(g)
    if np.any(np.isnan(g)):
        rep.errors.append(Issue("INVALID_COHORT", "cohort contains NaN; use NEVER for untreated units"))
    bad = finite & ((g != np.round(g)) | (g < 1) | (g > ds.T))
    if np.any(bad):
        rep.errors.append(Issue("INVALID_COHORT", f"{int(bad.sum())} cohort values outside 2..T"))
    if np.any(finite & (g == 1)):
        rep.errors.append(Issue("COHORT_AT_FIRST_PERIOD", "treatment cannot start in the first period"))
    if not np.all(np.isfinite(ds.covariates)):
        rep.errors.append(Issue("INVALID_COVARIATE", "covariates contain missing values"))
    values, counts = np.unique(g[~np.isnan(g)], return_counts=True)
    for v, c in zip(values, counts):
        if c < min_cell:
            issue = Issue("SMALL_COHORT", f"cohort {format_cohort(v)} has {c} < {min_cell} units")
            (rep.errors if efficient else rep.warnings).append(issue)
    if not np.any(g == NEVER):
        rep.warnings.append(Issue("NO_NEVER_COHORT", "no never-treated units; see relabel_terminal_cohort"))
    if ds.treatment is not None:
        D = ds.treatment
        if D.shape != Y.shape or not np.all((D == 0) | (D == 1)):
            rep.errors.append(Issue("INVALID_TREATMENT", "treatment must be a binary n x T matrix"))
    if ds.iv_cohort is not None:
        z = ds.iv_cohort
        zf = np.isfinite(z)
        if np.any(zf & ((z < 2) | (z > ds.T) | (z != np.round(z)))):
            rep.errors.append(Issue("INVALID_COHORT", "instrument exposure dates must lie in 2..T"))
    return rep


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


@dataclass
class CsvSchema:
    unit: str = "unit"
    period: str = "period"
    outcome: str = "outcome"
    cohort: str = "cohort"
    covariates: Sequence[str] = ()
    treatment: Optional[str] = None
    iv_cohort: Optional[str] = None


def _parse_cohort(raw, period_to_index: dict, last_period: int):
    s = str(raw).strip().lower()
    if s in _NEVER_TOKENS:
        return NEVER
    try:
        v = float(s)
    except ValueError:
        raise ValidationError("INVALID_COHORT", f"cannot parse cohort label {raw!r}") from None
    if math.isinf(v):
        return NEVER
    if v != int(v):
        raise ValidationError("INVALID_COHORT", f"cohort label {raw!r} is not an integer period")
    v = int(v)
    if v in period_to_index:
        return float(period_to_index[v])
    if v > last_period:
        # treated only after the observation window
        return NEVER
    raise ValidationError("INVALID_COHORT", f"cohort {v} is not one of the observed periods")


def load_long_csv(path, schema: Optional[CsvSchema] = None) -> PanelDataset:
    """Read a long-format CSV (one row per unit-period) into a :class:`PanelDataset`."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise ValidationError("FILE_NOT_FOUND", str(path))
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = [schema.unit, schema.period, schema.outcome, schema.cohort, *schema.covariates]
    for extra in (schema.treatment, schema.iv_cohort):
        if extra:
            required.append(extra)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValidationError("SCHEMA", f"missing columns: {', '.join(missing)}")

    try:
        period = df[schema.period].astype(float)
    except ValueError:
        raise ValidationError("SCHEMA", "period labels must be integers") from None
    if np.any(period != np.round(period)):
        raise ValidationError("SCHEMA", "period labels must be integers")
    df = df.assign(_period=period.astype(np.int64))

    def numeric(col, code):
        try:
            out = df[col].map(lambda s: float(s) if s.strip() != "" else math.nan)
        except ValueError:
            raise ValidationError(code, f"column {col!r} has non-numeric entries") from None
        return out.to_numpy(dtype=float)

    df["_y"] = numeric(schema.outcome, "NON_NUMERIC_OUTCOME")
    if df.duplicated([schema.unit, "_period"]).any():
        raise ValidationError("DUPLICATE_ROW", "duplicate (unit, period) rows")

    units = list(dict.fromkeys(df[schema.unit].tolist()))
    periods = sorted(df["_period"].unique().tolist())
    n, T = len(units), len(periods)
    if len(df) != n * T:
        raise ValidationError("UNBALANCED_PANEL", f"expected {n * T} rows for a balanced panel, found {len(df)}")
    uidx = {u: i for i, u in enumerate(units)}
    pidx = {p: k for k, p in enumerate(periods)}
    rows = df[schema.unit].map(uidx).to_numpy()
    cols = df["_period"].map(pidx).to_numpy()

    def pivot(values):
        M = np.full((n, T), np.nan)
        M[rows, cols] = values
        return M

    Y = pivot(df["_y"].to_numpy())
    if np.isnan(Y).any():
        raise ValidationError("UNBALANCED_PANEL", "missing outcome cells")

    period_to_index = {p: k + 1 for k, p in enumerate(periods)}

    def per_unit(col, parse):
        vals = {}
        for u, raw in zip(df[schema.unit], df[col]):
            v = parse(raw)
            prev = vals.setdefault(u, v)
            if not (prev == v or (isinstance(v, float) and math.isnan(v) and math.isnan(prev))):
                raise ValidationError("TIME_VARYING_UNIT_ATTRIBUTE", f"column {col!r} varies within unit {u!r}")
        return np.array([vals[u] for u in units], dtype=float)

    cohort_parser = lambda raw: _parse_cohort(raw, period_to_index, periods[-1])  # noqa: E731
    cohort = per_unit(schema.cohort, cohort_parser)
    X = None
    if schema.covariates:
        X = np.column_stack([per_unit(c, float) for c in schema.covariates])
    D = iv = None
    if schema.treatment:
        D = pivot(numeric(schema.treatment, "INVALID_TREATMENT"))
    if schema.iv_cohort:
        iv = per_unit(schema.iv_cohort, cohort_parser)
    return PanelDataset(
        unit_ids=units,
        periods=periods,
        outcomes=Y,
        cohort=cohort,
        covariates=X,
        treatment=D,
        iv_cohort=iv,
        covariate_names=tuple(schema.covariates),
    )


def save_long_csv(ds: PanelDataset, path, schema: Optional[CsvSchema] = None) -> None:
    """Write ``ds`` in long format. Floats use shortest round-trip repr."""
    schema = schema or CsvSchema(covariates=ds.covariate_names)
    if len(schema.covariates) != ds.d:
        raise ValidationError("SCHEMA", "schema covariate list does not match the dataset")
    periods = ds.periods

    def label(g):
        return "inf" if is_never(g) else str(periods[int(g) - 1])

    records = []
    for i, u in enumerate(ds.unit_ids):
        for k, p in enumerate(periods):
            row = {schema.unit: u, schema.period: p, schema.outcome: repr(float(ds.outcomes[i, k])),
                   schema.cohort: label(ds.cohort[i])}
            for j, name in enumerate(schema.covariates):
                row[name] = repr(float(ds.covariates[i, j]))
            if schema.treatment and ds.treatment is not None:
                row[schema.treatment] = repr(float(ds.treatment[i, k]))
            if schema.iv_cohort and ds.iv_cohort is not None:
                row[schema.iv_cohort] = label(ds.iv_cohort[i])
            records.append(row)
    pd.DataFrame.from_records(records).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# Cohort structure
# ---------------------------------------------------------------------------


def relabel_terminal_cohort(ds: PanelDataset) -> PanelDataset:
    """Turn the last-treated cohort into the never-treated comparison group.

    All periods from that cohort's treatment date onward are dropped.
    """
    if np.any(ds.cohort == NEVER):
        warnings.warn("panel already has a never-treated cohort; relabel skipped", EdidWarning, stacklevel=2)
        return ds
    g_last = int(np.max(ds.cohort))
    keep = g_last - 1
    if keep < 2:
        raise ValidationError("INVALID_COHORT", "dropping the terminal cohort leaves fewer than two periods")
    cohort = np.where(ds.cohort == g_last, NEVER, ds.cohort)
    iv = ds.iv_cohort
    if iv is not None:
        iv = np.where(iv >= g_last, NEVER, iv)
    return dataclasses.replace(
        ds,
        periods=ds.periods[:keep],
        outcomes=ds.outcomes[:, :keep],
        cohort=cohort,
        treatment=None if ds.treatment is None else ds.treatment[:, :keep],
        iv_cohort=iv,
    )


@dataclass(frozen=True)
class CohortIndex:
    T: int
    n: int
    cohorts_all: tuple
    cohorts_treated: tuple
    counts: dict
    shares: dict

    def treated_at(self, e: int) -> tuple:
        """Treated cohorts observed ``e`` periods after adoption (``g + e <= T``)."""
        return tuple(g for g in self.cohorts_treated if g + e <= self.T)

    @property
    def event_times(self) -> tuple:
        """Post-treatment event times with at least one observed cohort."""
        if not self.cohorts_treated:
            return ()
        return tuple(range(0, self.T - int(min(self.cohorts_treated)) + 1))


def cohort_index(ds: PanelDataset, cohort: Optional[np.ndarray] = None) -> CohortIndex:
    """Counts, shares and horizon sets for the cohorts present in ``ds``.

    ``cohort`` overrides the grouping variable (used for instrument exposure).
    """
    g = ds.cohort if cohort is None else np.asarray(cohort, dtype=float)
    values, counts = np.unique(g, return_counts=True)
    cohorts = tuple(float(v) for v in values)  # np.unique sorts inf last
    cnt = {c: int(k) for c, k in zip(cohorts, counts)}
    n = int(len(g))
    return CohortIndex(
        T=ds.T,
        n=n,
        cohorts_all=cohorts,
        cohorts_treated=tuple(int(c) for c in cohorts if not is_never(c)),
        counts=cnt,
        shares={c: k / n for c, k in cnt.items()},
    )
