"""Likelihood-ratio tests, information criteria, fixed-effects summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import chdtrc

from .fitter import FitResult, refit
from .formula import Formula, Term


class InferenceError(ValueError):
    pass


def chisq_p_value(chisq: float, df: int) -> float:
    """Upper-tail central chi-square probability.

    Computed through the regularized incomplete gamma function.  ``df=0``
    marks a degenerate comparison: p is 1 when the statistic is zero and
    0 otherwise.
    """
    if chisq < 0:
        raise InferenceError(f"chi-square statistic must be >= 0, got {chisq}")
    if df < 0:
        raise InferenceError(f"degrees of freedom must be >= 0, got {df}")
    if df == 0:
        return 1.0 if chisq == 0.0 else 0.0
    return float(chdtrc(df, chisq))


@dataclass(frozen=True)
class LRTResult:
    chisq: float
    df: int
    p_value: float
    criterion: str
    refit_ml: bool = False   # fixed effects differed, both sides refit under ML

    def describe(self) -> str:
        tag = " (refit under ML)" if self.refit_ml else ""
        return f"chisq({self.df}) = {self.chisq:.2f}, p = {self.p_value:.4g}{tag}"


def _component_sets(fit: FitResult):
    comps: set[tuple[str, str]] = set()
    pairs: set[frozenset] = set()
    for block in fit.matrices.blocks:
        for lab in block.labels:
            comps.add((block.group, lab))
        if block.correlated and block.dim > 1:
            labs = block.labels
            for i in range(len(labs)):
                for j in range(i + 1, len(labs)):
                    pairs.add(frozenset({(block.group, labs[i]), (block.group, labs[j])}))
    return comps, pairs


def is_nested(small: FitResult, large: FitResult) -> bool:
    """Structural nesting: fixed terms, components, and correlated pairs
    of the smaller model are all present in the larger one."""
    if set(small.formula.fixed) - set(large.formula.fixed):
        return False
    comps_s, pairs_s = _component_sets(small)
    comps_l, pairs_l = _component_sets(large)
    return comps_s <= comps_l and pairs_s <= pairs_l


def model_df(fit: FitResult) -> int:
    """Parameters counted for tests and criteria: fixed effects,
    covariance parameters, and the residual variance."""
    return fit.p + fit.n_theta + 1


def lr_test(fit_small: FitResult, fit_large: FitResult) -> LRTResult:
    """Likelihood-ratio test of two nested fits on identical data.

    REML comparisons require identical fixed effects; when they differ,
    both models are automatically refit under ML and the result is
    flagged.
    """
    if fit_small.matrices.data_fingerprint != fit_large.matrices.data_fingerprint:
        raise InferenceError("fits were made on different datasets")
    if not is_nested(fit_small, fit_large):
        raise InferenceError(
            f"model {str(fit_small.formula)!r} is not nested in "
            f"{str(fit_large.formula)!r}"
        )
    same_fixed = fit_small.matrices.x_labels == fit_large.matrices.x_labels
    refit_ml = False
    crit_s, crit_l = fit_small.criterion, fit_large.criterion
    if crit_s != crit_l or (crit_s == "reml" and not same_fixed):
        fit_small = refit(fit_small, criterion="ml")
        fit_large = refit(fit_large, criterion="ml")
        refit_ml = True
    df = model_df(fit_large) - model_df(fit_small)
    if df < 0:
        raise InferenceError("larger model has fewer parameters than smaller one")
    chisq = max(0.0, fit_small.deviance - fit_large.deviance)
    return LRTResult(
        chisq=chisq,
        df=df,
        p_value=chisq_p_value(chisq, df),
        criterion=fit_large.criterion,
        refit_ml=refit_ml,
    )


def information_criteria(fit: FitResult) -> tuple[float, float]:
    """(AIC, BIC) from the fit's deviance and parameter count."""
    k = model_df(fit)
    aic = fit.deviance + 2.0 * k
    bic = fit.deviance + k * float(np.log(fit.n))
    return aic, bic


@dataclass(frozen=True)
class FixedEffectRow:
    label: str
    estimate: float
    se: float
    t_value: float
    ci_lower: float
    ci_upper: float


def fixed_effects_table(fit: FitResult) -> list[FixedEffectRow]:
    """Wald summaries: estimate, SE, t, and the 95% interval (1.96 SE)."""
    var = np.diag(fit.vcov_beta)
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        raise InferenceError("fixed-effects covariance is singular")
    se = np.sqrt(var)
    rows = []
    for label, est, s in zip(fit.beta_labels, fit.beta, se):
        rows.append(
            FixedEffectRow(
                label=label,
                estimate=float(est),
                se=float(s),
                t_value=float(est / s),
                ci_lower=float(est - 1.96 * s),
                ci_upper=float(est + 1.96 * s),
            )
        )
    return rows
