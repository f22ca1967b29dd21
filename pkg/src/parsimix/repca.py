"""Principal components analysis of fitted random-effects covariances.

Overparameterized random-effects structures show up as covariance factors
whose trailing singular values are (numerically) zero: the fitted effects
live in a lower-dimensional subspace.  The decomposition runs per grouping
factor on the relative Cholesky factor, so results do not depend on the
residual scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitter import FitResult


@dataclass(frozen=True)
class FactorPCA:
    """Spectrum of one grouping factor's random-effects covariance."""

    group: str
    labels: tuple[str, ...]
    singular_values: np.ndarray   # descending, relative-SD units
    proportions: np.ndarray       # variance shares, sum to 1 when any > 0
    cumulative: np.ndarray
    dim: int                      # components needed for all the variance

    @property
    def n_components(self) -> int:
        return len(self.singular_values)


@dataclass(frozen=True)
class RePCAResult:
    by_group: dict[str, FactorPCA]

    def dims(self) -> dict[str, int]:
        return {g: r.dim for g, r in self.by_group.items()}

    def total_components(self) -> int:
        return sum(r.n_components for r in self.by_group.values())

    def total_dim(self) -> int:
        return sum(r.dim for r in self.by_group.values())

    def overparameterized(self) -> bool:
        return self.total_dim() < self.total_components()


def effective_dimensionality(cumulative: np.ndarray, tol: float = 1e-4) -> int:
    """Smallest component count whose cumulative share reaches 1 - tol."""
    cumulative = np.asarray(cumulative, dtype=np.float64)
    hit = np.flatnonzero(cumulative >= 1.0 - tol)
    if hit.size == 0:
        return 0
    return int(hit[0]) + 1


def re_pca(fit: FitResult, tol: float = 1e-4) -> RePCAResult:
    """Decompose each grouping factor's fitted covariance factor.

    Terms sharing a grouping factor contribute diagonal blocks to that
    factor's per-level matrix before decomposition; component variances
    are the squared singular values.
    """
    ctx = fit.context()
    if not ctx.factors:
        raise ValueError("model has no random effects to decompose")
    out: dict[str, FactorPCA] = {}
    for fg in ctx.factors:
        lam = fg.lambda_tilde(fit.theta)
        svals = np.linalg.svd(lam, compute_uv=False)
        var = svals**2
        total = float(var.sum())
        if total > 0.0:
            props = var / total
        else:
            props = np.zeros_like(var)
        cum = np.cumsum(props)
        out[fg.name] = FactorPCA(
            group=fg.name,
            labels=tuple(fg.labels()),
            singular_values=svals,
            proportions=props,
            cumulative=cum,
            dim=effective_dimensionality(cum, tol),
        )
    return RePCAResult(by_group=out)
