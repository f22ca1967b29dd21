"""Shared test setup.

BLAS thread pools are pinned to one thread before numpy loads anywhere:
the factor sizes in these models are far too small for multithreaded
kernels to pay for their synchronization.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from parsimix import (
    ContrastScheme,
    DesignSpec,
    FactorSpec,
    RandomTruth,
    TruthSpec,
    simulate_lmm,
)


@pytest.fixture(scope="session")
def one_way_dataset():
    """Balanced one-way layout with a solid between-group variance."""
    spec = TruthSpec(
        design=DesignSpec(n_subjects=20, n_items=0, factors=(), reps=6),
        beta={"(Intercept)": 10.0},
        ranef={"subject": RandomTruth(("(Intercept)",), np.array([[1.44]]))},
        sigma=0.8,
        seed=42,
    )
    return simulate_lmm(spec)


@pytest.fixture(scope="session")
def slope_dataset():
    """One within-subject 2-level factor with intercept and slope variance."""
    spec = TruthSpec(
        design=DesignSpec(
            n_subjects=30,
            n_items=0,
            factors=(FactorSpec("a", ("a1", "a2")),),
            reps=6,
        ),
        beta={"(Intercept)": 4.0, "a[a1]": 0.8},
        ranef={
            "subject": RandomTruth(
                ("(Intercept)", "a[a1]"),
                np.array([[1.0, 0.3], [0.3, 0.49]]),
            )
        },
        sigma=1.0,
        seed=11,
    )
    return simulate_lmm(spec)


@pytest.fixture(scope="session")
def crossed_dataset():
    """Crossed subjects-by-items data with a 2-level within-both factor."""
    spec = TruthSpec(
        design=DesignSpec(
            n_subjects=24,
            n_items=12,
            factors=(FactorSpec("p", ("old", "new")),),
            reps=1,
        ),
        beta={"(Intercept)": 6.0, "p[old]": 0.5},
        ranef={
            "subject": RandomTruth(("(Intercept)",), np.array([[0.64]])),
            "item": RandomTruth(
                ("(Intercept)", "p[old]"),
                np.array([[0.36, -0.1], [-0.1, 0.25]]),
            ),
        },
        sigma=1.0,
        seed=5,
    )
    return simulate_lmm(spec)
