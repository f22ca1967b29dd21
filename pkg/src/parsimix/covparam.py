"""Covariance parameterization: theta vectors, Cholesky factors, counting.

The free parameters of each random-effects term are the entries on and
below the diagonal of a lower-triangular factor, filled in column-major
order; the term's covariance matrix is ``sigma**2 * L @ L.T``.  Diagonal
entries are bounded below by zero, so rank-deficient fits land exactly on
the boundary instead of wandering through equivalent sign flips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def count_params(dim: int) -> int:
    """Free covariance parameters of a ``dim``-dimensional term."""
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    return dim * (dim + 1) // 2


def max_params_for_design(within_levels: "list[int] | tuple[int, ...]") -> int:
    """Covariance parameters of one grouping factor's maximal term.

    ``within_levels`` lists the level counts of the factors manipulated
    within that grouping factor; the maximal term has one dimension per
    cell of their full factorial.
    """
    m = 1
    for lev in within_levels:
        if lev < 1:
            raise ValueError(f"level count must be >= 1, got {lev}")
        m *= lev
    return m * (m + 1) // 2


def total_cov_params(per_factor_within_levels: "list[list[int]]") -> int:
    """Total variance-covariance parameters of a maximal model.

    Sums the per-grouping-factor maxima and adds one for the residual
    variance.
    """
    return sum(max_params_for_design(w) for w in per_factor_within_levels) + 1


def tril_indices_colmajor(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) index arrays of the lower triangle in column-major order."""
    rows = np.concatenate([np.arange(j, dim) for j in range(dim)])
    cols = np.concatenate([np.full(dim - j, j) for j in range(dim)])
    return rows, cols


def theta_to_lambda(theta: np.ndarray, dim: int) -> np.ndarray:
    """Fill a lower-triangular (dim, dim) factor from ``theta``, column-major."""
    theta = np.asarray(theta, dtype=np.float64)
    expected = count_params(dim)
    if theta.shape != (expected,):
        raise ValueError(
            f"theta has length {theta.size}, expected {expected} for dimension {dim}"
        )
    lam = np.zeros((dim, dim))
    rows, cols = tril_indices_colmajor(dim)
    lam[rows, cols] = theta
    return lam


def lambda_to_theta(lam: np.ndarray) -> np.ndarray:
    """Inverse of :func:`theta_to_lambda`."""
    lam = np.asarray(lam, dtype=np.float64)
    d = lam.shape[0]
    rows, cols = tril_indices_colmajor(d)
    return lam[rows, cols].copy()


def diag_positions(dim: int) -> np.ndarray:
    """Indices of the diagonal entries within a column-major theta vector."""
    rows, cols = tril_indices_colmajor(dim)
    return np.flatnonzero(rows == cols)


def lambda_to_cov(lam: np.ndarray, sigma: float) -> np.ndarray:
    """Covariance matrix ``sigma**2 * lam @ lam.T`` (exactly symmetric)."""
    lam = np.asarray(lam, dtype=np.float64)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cov = lam @ lam.T
    cov = (cov + cov.T) / 2.0
    return sigma**2 * cov


@dataclass(frozen=True)
class CovarianceSummary:
    """Standard deviations and correlations of one term's covariance.

    Correlations involving a zero-variance component are undefined; they
    are NaN in ``corr`` with the matching ``undefined`` entry set, and
    serialize as nulls rather than NaN.
    """

    sd: np.ndarray          # (d,) response units
    corr: np.ndarray        # (d, d); NaN where undefined
    undefined: np.ndarray   # (d,) bool, True where sd == 0
    singular: bool

    def corr_json(self) -> list[list[float | None]]:
        return [
            [None if math.isnan(v) else float(v) for v in row]
            for row in self.corr
        ]


def cov_to_sd_cor(cov: np.ndarray, rank_tol: float = 1e-10) -> CovarianceSummary:
    """Summarize a PSD covariance as SDs and a correlation matrix."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    scale = np.max(np.abs(cov)) if cov.size else 0.0
    if not np.allclose(cov, cov.T, atol=1e-12 * max(scale, 1.0), rtol=0):
        raise ValueError("covariance matrix is not symmetric")
    d = cov.shape[0]
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    undefined = sd == 0.0
    corr = np.full((d, d), np.nan)
    defined = ~undefined
    if defined.any():
        denom = np.outer(sd[defined], sd[defined])
        sub = cov[np.ix_(defined, defined)] / denom
        np.fill_diagonal(sub, 1.0)
        sub = np.clip(sub, -1.0, 1.0)
        corr[np.ix_(defined, defined)] = sub
    eigs = np.linalg.eigvalsh(cov) if d else np.array([])
    max_eig = float(eigs[-1]) if d else 0.0
    singular = bool(undefined.any() or (d > 0 and eigs[0] <= rank_tol * max(max_eig, 1e-300)))
    return CovarianceSummary(sd=sd, corr=corr, undefined=undefined, singular=singular)
