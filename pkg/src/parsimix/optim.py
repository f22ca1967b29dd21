"""Derivative-free bound-constrained minimization.

The default method is Nelder-Mead with the dimension-adaptive expansion,
contraction, and shrink coefficients, plus projection of trial points
onto the box.  A trust-region alternative ("cobyqa", via scipy) is kept
for large parameter vectors where simplex search needs too many
evaluations.  Both are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    n_evals: int
    converged: bool
    message: str = ""


class _BudgetExhausted(Exception):
    pass


class _CountedObjective:
    def __init__(self, fn: Callable[[np.ndarray], float], budget: int):
        self.fn = fn
        self.budget = budget
        self.n_evals = 0
        self.best_x: np.ndarray | None = None
        self.best_f = np.inf

    def __call__(self, x: np.ndarray) -> float:
        if self.n_evals >= self.budget:
            raise _BudgetExhausted
        self.n_evals += 1
        f = float(self.fn(x))
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=np.float64)
        return f


def _nm_run(
    f: _CountedObjective,
    x0: np.ndarray,
    lower: np.ndarray,
    init_step: float,
    frel: float,
    xabs: float,
) -> bool:
    """One Nelder-Mead descent; returns True if the simplex converged."""
    n = len(x0)
    alpha = 1.0
    if n >= 2:  # dimension-adaptive coefficients; degenerate at n=1
        beta = 1.0 + 2.0 / n
        gamma = 0.75 - 1.0 / (2.0 * n)
        delta = 1.0 - 1.0 / n
    else:
        beta, gamma, delta = 2.0, 0.5, 0.5

    def project(x: np.ndarray) -> np.ndarray:
        return np.maximum(x, lower)

    sim = np.empty((n + 1, n))
    sim[0] = project(x0)
    for i in range(n):
        v = sim[0].copy()
        v[i] += init_step
        sim[i + 1] = project(v)
    fsim = np.array([f(v) for v in sim])

    while True:
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
        fspread = fsim[-1] - fsim[0]
        xspread = np.max(np.abs(sim[1:] - sim[0])) if n else 0.0
        if fspread <= frel * (abs(fsim[0]) + 1e-12) and xspread <= xabs:
            return True

        centroid = sim[:-1].mean(axis=0)
        xr = project(centroid + alpha * (centroid - sim[-1]))
        fr = f(xr)
        if fr < fsim[0]:
            xe = project(centroid + beta * (centroid - sim[-1]))
            fe = f(xe)
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
        else:
            if fr < fsim[-1]:
                xc = project(centroid + gamma * (xr - centroid))
            else:
                xc = project(centroid + gamma * (sim[-1] - centroid))
            fc = f(xc)
            if fc < min(fr, fsim[-1]):
                sim[-1], fsim[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    sim[i] = project(sim[0] + delta * (sim[i] - sim[0]))
                    fsim[i] = f(sim[i])


def nelder_mead_bounded(
    fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: np.ndarray | None = None,
    budget: int = 2000,
    frel: float = 1e-10,
    xabs: float = 1e-8,
    init_step: float = 0.25,
    polish_restarts: int = 2,
) -> MinimizeResult:
    """Minimize ``fn`` subject to elementwise lower bounds.

    Stops when the simplex's relative function spread falls below ``frel``
    and its diameter below ``xabs``, or when the evaluation ``budget`` is
    exhausted (the best point found is still returned).  ``polish_restarts``
    extra descents from a small fresh simplex around the incumbent improve
    accuracy near boundary optima.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lower = (
        np.full(x0.shape, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    )
    counted = _CountedObjective(fn, budget)
    converged = False
    try:
        converged = _nm_run(counted, x0, lower, init_step, frel, xabs)
        for _ in range(polish_restarts):
            assert counted.best_x is not None
            converged = _nm_run(
                counted, counted.best_x, lower, init_step * 0.01, frel, xabs
            )
    except _BudgetExhausted:
        converged = False
    assert counted.best_x is not None, "objective was never evaluated"
    return MinimizeResult(
        x=counted.best_x,
        fun=counted.best_f,
        n_evals=counted.n_evals,
        converged=converged,
        message="converged" if converged else "evaluation budget exhausted",
    )


def cobyqa_bounded(
    fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: np.ndarray | None = None,
    budget: int = 2000,
    initial_tr_radius: float = 1.0,
    final_tr_radius: float = 1e-9,
) -> MinimizeResult:
    """Trust-region quadratic-model minimization via scipy's COBYQA."""
    from scipy.optimize import minimize

    x0 = np.asarray(x0, dtype=np.float64)
    if lower is None:
        lower = np.full(x0.shape, -np.inf)
    counted = _CountedObjective(fn, budget)
    bounds = [(lo if np.isfinite(lo) else None, None) for lo in lower]
    try:
        res = minimize(
            counted,
            np.maximum(x0, lower),
            method="COBYQA",
            bounds=bounds,
            options={
                "maxfev": budget,
                "initial_tr_radius": initial_tr_radius,
                "final_tr_radius": final_tr_radius,
            },
        )
        converged = bool(res.success) and counted.n_evals < budget
    except _BudgetExhausted:
        converged = False
    assert counted.best_x is not None
    return MinimizeResult(
        x=counted.best_x,
        fun=counted.best_f,
        n_evals=counted.n_evals,
        converged=converged,
        message="converged" if converged else "stopped before convergence",
    )


METHODS = {
    "nelder-mead": nelder_mead_bounded,
    "cobyqa": cobyqa_bounded,
}


def minimize_bounded(
    fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lower: np.ndarray | None = None,
    budget: int = 2000,
    method: str = "nelder-mead",
    **kwargs,
) -> MinimizeResult:
    try:
        impl = METHODS[method]
    except KeyError:
        raise ValueError(
            f"unknown optimizer {method!r}; choose from {sorted(METHODS)}"
        ) from None
    return impl(fn, x0, lower=lower, budget=budget, **kwargs)
