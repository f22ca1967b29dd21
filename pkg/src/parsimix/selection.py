"""Automated reduction of a maximal model to a parsimonious one.

The workflow fits the maximal model (under a probe budget, since an
overparameterized maximal fit that fails to converge is itself the signal
to simplify), falls back to the zero-correlation form, drops variance
components the data cannot support, eliminates the remainder by
likelihood-ratio tests, then tries re-adding correlation parameters among
the survivors and pruning the weak ones.  Every step lands in an ordered,
serializable trace with the fit and test evidence that produced it.

Random terms are converted to vector-valued form (named numeric contrast
columns) before any reduction, so single variance components of
multi-level factors can be addressed, dropped, and recombined exactly.
"""

from __future__ import annotations

import itertools
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .design import ContrastScheme, build_model_matrices, contrast_columns
from .fitter import (
    SINGULAR_TOL,
    FitResult,
    cross_products,
    default_budget,
    optimize,
    warm_start,
)
from .formula import Formula, RandomTerm, Term, format_formula, zcp_transform
from .inference import LRTResult, lr_test
from .repca import RePCAResult, re_pca

THREADS_ENV = "PARSIMIX_THREADS"


class SelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the reduction workflow; every one is echoed in reports."""

    alpha: float = 0.05
    dim_tol: float = 1e-4
    drop_order: str = "interaction-order-then-smallest"
    max_steps: int = 40
    criterion: str = "reml"
    corr_prune_threshold: float = 0.15
    method: str = "cobyqa"
    maximal_budget: int | None = 300
    budget: int | None = None
    n_threads: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.drop_order != "interaction-order-then-smallest":
            raise ValueError(f"unknown drop_order {self.drop_order!r}")

    def threads(self) -> int:
        if self.n_threads is not None:
            return max(1, self.n_threads)
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                pass
        return 1

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "dim_tol": self.dim_tol,
            "drop_order": self.drop_order,
            "max_steps": self.max_steps,
            "criterion": self.criterion,
            "corr_prune_threshold": self.corr_prune_threshold,
            "method": self.method,
            "maximal_budget": self.maximal_budget,
            "budget": self.budget,
            "n_threads": self.threads(),
        }


@dataclass
class TraceStep:
    index: int
    action: str
    formula: str
    fit_summary: dict | None = None
    repca_dims: dict[str, int] | None = None
    lrt: LRTResult | None = None
    note: str = ""


@dataclass
class SelectionTrace:
    steps: list[TraceStep]
    final_fit: FitResult
    config: SelectionConfig
    column_mapping: dict[str, str] = field(default_factory=dict)

    @property
    def final_formula(self) -> Formula:
        return self.final_fit.formula

    def accepted_drop_tests(self) -> list[LRTResult]:
        out = []
        for step in self.steps:
            if step.lrt is not None and step.action in (
                "lrt-drop",
                "prune-correlations",
            ) and not step.note.startswith("rejected"):
                out.append(step.lrt)
        return out


# ---------------------------------------------------------------------------
# Maximal formula construction
# ---------------------------------------------------------------------------


def maximal_formula(
    response: str,
    fixed: "list[Term] | str",
    within: dict[str, list[str]],
) -> Formula:
    """Maximal random-effects formula for the declared design.

    ``within`` maps each grouping factor to the experimental factors that
    vary within its units; those factors' full factorial (intercept, main
    effects, all interactions) enters as correlated random slopes.
    Between-unit factors are simply left out of that group's list.
    """
    from .formula import parse_formula

    if isinstance(fixed, str):
        fixed_terms = parse_formula(f"{response} ~ {fixed}").fixed
    else:
        fixed_terms = tuple(fixed)
    random_terms = []
    for group, factors in within.items():
        terms: list[Term] = [Term(())]
        for r in range(1, len(factors) + 1):
            for combo in itertools.combinations(factors, r):
                terms.append(Term(tuple(combo)))
        random_terms.append(RandomTerm(tuple(terms), group, correlated=True))
    return Formula(response=response, fixed=fixed_terms, random=tuple(random_terms))


# ---------------------------------------------------------------------------
# Vector-valued conversion
# ---------------------------------------------------------------------------

_SAFE_NAME = re.compile(r"[^A-Za-z0-9_.]+")


def vectorize_random_effects(
    formula: Formula, dataset: Dataset, contrasts: ContrastScheme
) -> tuple[Formula, Dataset, dict[str, str]]:
    """Replace factors inside random terms with named contrast columns.

    Returns the rewritten formula, the widened dataset, and a mapping
    from new column names to the contrast labels they encode.  The fixed
    part and the grouping factors are untouched; when no random term
    references a factor, everything is returned unchanged.
    """
    needed: list[str] = []
    for rt in formula.random:
        for t in rt.terms:
            for name in t.factors:
                if name in dataset.columns and dataset.is_factor(name) and name not in needed:
                    needed.append(name)
    if not needed:
        return formula, dataset, {}

    new_cols: dict[str, object] = dict(dataset.columns)
    mapping: dict[str, str] = {}
    factor_to_columns: dict[str, list[str]] = {}
    for name in needed:
        cols, labels = contrast_columns(
            dataset.factor(name), contrasts.kind_for(name), name
        )
        colnames = []
        for j, label in enumerate(labels):
            base = _SAFE_NAME.sub("_", label).strip("_")
            candidate = base
            while candidate in new_cols:
                candidate = candidate + "_"
            new_cols[candidate] = cols[:, j]
            mapping[candidate] = label
            colnames.append(candidate)
        factor_to_columns[name] = colnames

    def rewrite(term: Term) -> list[Term]:
        if term.is_intercept:
            return [term]
        pools = [
            factor_to_columns.get(name, [name]) for name in term.factors
        ]
        return [Term(tuple(combo)) for combo in itertools.product(*pools)]

    new_random = []
    for rt in formula.random:
        seen: list[Term] = []
        for t in rt.terms:
            for nt in rewrite(t):
                if nt not in seen:
                    seen.append(nt)
        new_random.append(replace(rt, terms=tuple(seen)))
    widened = Dataset(columns=new_cols, n_dropped=dataset.n_dropped)
    return replace(formula, random=tuple(new_random)), widened, mapping


# ---------------------------------------------------------------------------
# Component bookkeeping on vector-valued ZCP formulas
# ---------------------------------------------------------------------------


def _group_components(formula: Formula) -> dict[str, list[Term]]:
    out: dict[str, list[Term]] = {}
    for rt in formula.random:
        out.setdefault(rt.group, []).extend(rt.terms)
    return out


def _removable(components: dict[str, list[Term]]) -> list[tuple[str, Term]]:
    """Components droppable under marginality: nothing above them remains.

    An intercept counts as contained in every other component of its
    group, so it only becomes removable once it is the group's last one.
    """
    out = []
    for group, terms in components.items():
        for t in terms:
            if t.is_intercept:
                blocked = len(terms) > 1
            else:
                blocked = any(other.contains(t) for other in terms if other != t)
            if not blocked:
                out.append((group, t))
    return out


def _drop_from_formula(formula: Formula, removals: set[tuple[str, Term]]) -> Formula:
    new_random = []
    for rt in formula.random:
        kept = tuple(t for t in rt.terms if (rt.group, t) not in removals)
        if kept:
            new_random.append(replace(rt, terms=kept))
    return replace(formula, random=tuple(new_random))


def _zcp_component_formula(formula: Formula) -> Formula:
    """One independent scalar random term per component, canonical order."""
    return zcp_transform(formula)


def _relative_sd_by_component(fit: FitResult) -> dict[tuple[str, Term], float]:
    out: dict[tuple[str, Term], float] = {}
    ctx = cross_products(fit.matrices)
    for fg in ctx.factors:
        lam = fg.lambda_tilde(fit.theta)
        rownorm = np.sqrt(np.sum(lam * lam, axis=1))
        for term, s in zip(fg.column_terms(), rownorm):
            out[(fg.name, term)] = float(s)
    return out


# ---------------------------------------------------------------------------
# Workflow steps
# ---------------------------------------------------------------------------


def _fit_summary(fit: FitResult) -> dict:
    return {
        "deviance": fit.deviance,
        "loglik": fit.loglik,
        "criterion": fit.criterion,
        "converged": fit.converged,
        "singular": fit.singular,
        "n_evals": fit.n_evals,
        "n_theta": fit.n_theta,
        "sigma": fit.sigma,
    }


def _repca_dims(fit: FitResult, tol: float) -> dict[str, int] | None:
    if not fit.matrices.blocks:
        return None
    return re_pca(fit, tol=tol).dims()


class _Workflow:
    def __init__(self, dataset: Dataset, contrasts: ContrastScheme, config: SelectionConfig):
        self.dataset = dataset
        self.contrasts = contrasts
        self.config = config
        self.steps: list[TraceStep] = []

    def _warm_options(self) -> dict:
        # warm-started refits sit near their optimum already; a tight start
        # and LRT-grade final accuracy save most of the evaluation budget
        if self.config.method == "cobyqa":
            return {"initial_tr_radius": 0.05, "final_tr_radius": 1e-5}
        return {"init_step": 0.1}

    def fit(
        self,
        formula: Formula,
        previous: FitResult | None,
        budget: int | None = None,
    ) -> FitResult:
        mm = build_model_matrices(formula, self.dataset, self.contrasts)
        ctx = cross_products(mm)
        init = warm_start(ctx, previous)
        return optimize(
            mm,
            criterion=self.config.criterion,
            init=init,
            budget=budget if budget is not None else self.config.budget,
            method=self.config.method,
            opt_options=self._warm_options() if previous is not None else None,
        )

    def record(self, action: str, formula: Formula, fit: FitResult | None = None,
               lrt: LRTResult | None = None, note: str = "") -> None:
        self.steps.append(
            TraceStep(
                index=len(self.steps),
                action=action,
                formula=format_formula(formula),
                fit_summary=_fit_summary(fit) if fit is not None else None,
                repca_dims=_repca_dims(fit, self.config.dim_tol) if fit is not None else None,
                lrt=lrt,
                note=note,
            )
        )


def drop_components(
    fit: FitResult, config: SelectionConfig
) -> tuple[Formula, list[tuple[str, Term]]]:
    """Batch-remove components estimated at (relative) zero.

    Order: highest interaction order first, then smallest relative SD.
    Marginality holds within the batch: a lower-order component leaves
    only when every interaction above it leaves too.
    """
    rel = _relative_sd_by_component(fit)
    comps = _group_components(fit.formula)
    group_max = {
        g: max((rel[(g, t)] for t in terms), default=0.0)
        for g, terms in comps.items()
    }
    threshold = {
        g: max(SINGULAR_TOL * group_max[g], 1e-6) for g in comps
    }
    candidates = [
        (g, t)
        for g, terms in comps.items()
        for t in terms
        if rel[(g, t)] <= threshold[g]
    ]
    candidates.sort(key=lambda gt: (-gt[1].order, rel[gt], gt[0], str(gt[1])))
    removed: set[tuple[str, Term]] = set()
    for g, t in candidates:
        remaining = [
            other for other in comps[g] if (g, other) not in removed and other != t
        ]
        if t.is_intercept:
            blocked = bool(remaining)
        else:
            blocked = any(other.contains(t) for other in remaining)
        if not blocked:
            removed.add((g, t))
    new_formula = _drop_from_formula(fit.formula, removed)
    order = sorted(removed, key=lambda gt: (gt[0], -gt[1].order, str(gt[1])))
    return new_formula, order


def run_workflow(
    formula: Formula,
    dataset: Dataset,
    config: SelectionConfig | None = None,
    contrasts: ContrastScheme | None = None,
) -> SelectionTrace:
    """Reduce a maximal model to a parsimonious one; return the full trace."""
    config = config or SelectionConfig()
    contrasts = contrasts or ContrastScheme()

    formula, dataset, mapping = vectorize_random_effects(formula, dataset, contrasts)
    wf = _Workflow(dataset, contrasts, config)

    # 1: the maximal model, under a probe budget; failing to converge within
    # it is treated as the overcomplexity signal, not as an error.
    maximal_fit = wf.fit(formula, previous=None, budget=config.maximal_budget)
    wf.record("start-maximal", formula, maximal_fit)

    # 2+3: zero-correlation form.
    if not maximal_fit.converged:
        reason = "maximal fit did not converge within its budget"
    elif maximal_fit.singular:
        reason = "maximal fit is singular"
    else:
        reason = "maximal fit identified; reducing via the zero-correlation form"
    zcp_formula = _zcp_component_formula(formula)
    current = wf.fit(zcp_formula, previous=maximal_fit)
    wf.record("fallback-zcp", zcp_formula, current, note=reason)

    # 4: drop components estimated at zero until the structure is identified.
    for _ in range(config.max_steps):
        new_formula, removed = drop_components(current, config)
        if not removed:
            break
        if not any(rt.terms for rt in new_formula.random):
            # keep at least the best-supported component per factor out of
            # caution: an empty random structure is never auto-selected here
            break
        candidate = wf.fit(new_formula, previous=current)
        names = ", ".join(f"{g}:{t}" for g, t in removed)
        wf.record("drop-components", new_formula, candidate, note=f"dropped {names}")
        current = candidate

    # 5: one-at-a-time LRT elimination.
    threads = config.threads()
    for _ in range(config.max_steps):
        comps = _group_components(current.formula)
        total = sum(len(v) for v in comps.values())
        if total <= 1:
            break
        removable = _removable(comps)
        removable.sort(key=lambda gt: (gt[0], -gt[1].order, str(gt[1])))
        if not removable:
            break
        candidates = [
            (g, t, _drop_from_formula(current.formula, {(g, t)})) for g, t in removable
        ]

        def fit_one(entry, _prev=current):
            g, t, fml = entry
            return wf.fit(fml, previous=_prev)

        if threads > 1 and len(candidates) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                fits = list(pool.map(fit_one, candidates))
        else:
            fits = [fit_one(c) for c in candidates]
        tested = [
            (g, t, cand, lr_test(cand, current))
            for (g, t, _), cand in zip(candidates, fits)
        ]
        droppable = [entry for entry in tested if entry[3].p_value > config.alpha]
        if not droppable:
            break
        g, t, cand, lrt = max(droppable, key=lambda e: (e[3].p_value, e[0], str(e[1])))
        wf.record("lrt-drop", cand.formula, cand, lrt=lrt, note=f"dropped {g}:{t}")
        current = cand

    # 6: re-add correlation parameters among the survivors.
    comps = _group_components(current.formula)
    multi = {g: terms for g, terms in comps.items() if len(terms) >= 2}
    if multi:
        new_random = []
        for rt in current.formula.random:
            if rt.group in multi:
                continue
            new_random.append(rt)
        for g, terms in multi.items():
            new_random.append(RandomTerm(tuple(terms), g, correlated=True))
        ext_formula = replace(current.formula, random=tuple(new_random))
        ext_fit = wf.fit(ext_formula, previous=current)
        lrt = lr_test(current, ext_fit)
        if lrt.p_value < config.alpha:
            wf.record("add-correlations", ext_formula, ext_fit, lrt=lrt,
                      note="extension improves fit")
            current = ext_fit

            # 7: prune correlations too weak to matter, if the LRT agrees.
            pruned_formula = _prune_weak_correlations(current, config)
            if pruned_formula is not None:
                pruned_fit = wf.fit(pruned_formula, previous=current)
                prune_lrt = lr_test(pruned_fit, current)
                if prune_lrt.p_value > config.alpha:
                    wf.record("prune-correlations", pruned_formula, pruned_fit,
                              lrt=prune_lrt, note="no significant loss of fit")
                    current = pruned_fit
                else:
                    wf.record("prune-correlations", current.formula, current,
                              lrt=prune_lrt,
                              note="rejected: pruning loses significant fit")
        else:
            wf.record("add-correlations", current.formula, current, lrt=lrt,
                      note="rejected: no evidence for correlation parameters")

    wf.record("stop", current.formula, current, note="final model")
    return SelectionTrace(
        steps=wf.steps, final_fit=current, config=config, column_mapping=mapping
    )


def _prune_weak_correlations(
    fit: FitResult, config: SelectionConfig
) -> Formula | None:
    """Partition each group's components so only strong pairs stay correlated.

    Components connected by |r| >= threshold stay in one correlated term;
    the rest split off.  Returns None when nothing would change.
    """
    summaries = fit.covariance_summaries()
    new_random: list[RandomTerm] = []
    changed = False
    for rt in fit.formula.random:
        if not rt.correlated or len(rt.terms) < 2:
            new_random.append(rt)
            continue
        # component order inside the fitted factor matches rt.terms order
        labels = fit.factor_labels(rt.group)
        corr = summaries[rt.group].corr
        d = len(rt.terms)
        if corr.shape[0] != d:
            new_random.append(rt)
            continue
        parent = list(range(d))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(d):
            for j in range(i + 1, d):
                r = corr[i, j]
                if np.isnan(r) or abs(r) >= config.corr_prune_threshold:
                    pi, pj = find(i), find(j)
                    if pi != pj:
                        parent[pj] = pi
        cells: dict[int, list[int]] = {}
        for i in range(d):
            cells.setdefault(find(i), []).append(i)
        if len(cells) == 1:
            new_random.append(rt)
            continue
        changed = True
        for root in sorted(cells, key=lambda r: min(cells[r])):
            members = [rt.terms[i] for i in sorted(cells[root])]
            new_random.append(
                RandomTerm(tuple(members), rt.group, correlated=len(members) > 1)
            )
    if not changed:
        return None
    return replace(fit.formula, random=tuple(new_random))
