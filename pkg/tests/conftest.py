"""Shared fixtures and panel builders."""

from __future__ import annotations

import numpy as np
import pytest

from edid.panel import NEVER, PanelDataset

# Acceptance results collected by tests/test_acceptance.py and echoed at the end of the run.
ACCEPTANCE: dict = {}


def random_panel(rng, n=40, T=5, cohorts=(3, 4), never=True, d=0, min_cell=3):
    """Random balanced panel where every cohort has at least ``min_cell`` units."""
    groups = list(cohorts) + ([NEVER] if never else [])
    base = np.repeat(groups, min_cell)
    extra = rng.choice(np.array(groups, dtype=float), size=n - base.size)
    G = rng.permutation(np.concatenate([base, extra]).astype(float))
    Y = rng.normal(size=(n, 1)) + np.cumsum(rng.normal(size=(n, T)), axis=1) * 0.5
    X = rng.normal(size=(n, d)) if d else None
    return PanelDataset(range(n), range(1, T + 1), Y, G, covariates=X)


def toy_a() -> PanelDataset:
    """Two periods; treated cohort means go 1 -> 5, never-treated 2 -> 3."""
    Y = np.array([[0.0, 4.0], [2.0, 6.0], [1.0, 2.0], [3.0, 4.0]])
    return PanelDataset(["a", "b", "c", "d"], [1, 2], Y, [2, 2, NEVER, NEVER])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy():
    return toy_a()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
