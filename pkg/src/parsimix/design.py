"""Design matrices: contrast coding, fixed-effects X, blocked random-effects Z."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Factor
from .formula import Formula, RandomTerm, Term

INTERCEPT_LABEL = "(Intercept)"


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastScheme:
    """Factor-to-numeric coding choice, with per-factor overrides.

    ``sum`` keeps the intercept at the grand mean of a balanced design
    (level k coded -1 everywhere); ``treatment`` codes indicators against
    the first level.  A k-level factor always yields k-1 columns.
    """

    default: str = "sum"
    per_factor: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for kind in (self.default, *self.per_factor.values()):
            if kind not in ("sum", "treatment"):
                raise DesignError(f"unknown contrast kind {kind!r}")

    def kind_for(self, name: str) -> str:
        return self.per_factor.get(name, self.default)


def contrast_columns(
    factor: Factor, kind: str, name: str
) -> tuple[np.ndarray, list[str]]:
    """Code a k-level factor as a (n, k-1) numeric matrix plus labels."""
    k = factor.n_levels
    if k < 2:
        raise DesignError(f"factor {name!r} has a single level; cannot build contrasts")
    codes = factor.codes
    n = len(codes)
    cols = np.zeros((n, k - 1))
    labels: list[str] = []
    if kind == "treatment":
        for j in range(1, k):
            cols[:, j - 1] = codes == j
            labels.append(f"{name}[{factor.levels[j]}]")
    elif kind == "sum":
        last = codes == (k - 1)
        for j in range(k - 1):
            cols[:, j] = (codes == j).astype(float) - last
            labels.append(f"{name}[{factor.levels[j]}]")
    else:
        raise DesignError(f"unknown contrast kind {kind!r}")
    return cols, labels


@dataclass
class RandomBlock:
    """One random-effects term after ``||`` expansion.

    Stored sparse-by-group: row r contributes ``values[r]`` to the ``d``
    effect columns of group level ``level_codes[r]``.
    """

    group: str
    level_codes: np.ndarray  # (n,) int32
    n_levels: int
    values: np.ndarray  # (n, d)
    labels: tuple[str, ...]
    column_terms: tuple[Term, ...]
    correlated: bool
    source: RandomTerm

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_columns(self) -> int:
        return self.dim * self.n_levels

    @property
    def n_theta(self) -> int:
        d = self.dim
        return d * (d + 1) // 2


@dataclass(eq=False)
class ModelMatrices:
    """Fixed-effects matrix, blocked random-effects structure, and response."""

    formula: Formula
    X: np.ndarray
    x_labels: tuple[str, ...]
    y: np.ndarray
    blocks: list[RandomBlock]
    contrasts: ContrastScheme
    contrasts_used: dict[str, str]
    dataset: Dataset
    data_fingerprint: str
    n_dropped: int = 0
    _cross: object | None = None  # lazily built solver context

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return sum(b.n_columns for b in self.blocks)

    @property
    def n_theta(self) -> int:
        return sum(b.n_theta for b in self.blocks)

    def group_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for b in self.blocks:
            seen.setdefault(b.group, None)
        return list(seen)

    def term_meta(self) -> list[dict]:
        return [
            {
                "group": b.group,
                "dim": b.dim,
                "n_levels": b.n_levels,
                "columns": list(b.labels),
                "correlated": b.correlated,
            }
            for b in self.blocks
        ]


def _term_columns(
    term: Term, dataset: Dataset, contrasts: ContrastScheme
) -> tuple[np.ndarray, list[str]]:
    n = dataset.n_rows
    if term.is_intercept:
        return np.ones((n, 1)), [INTERCEPT_LABEL]
    per_factor: list[tuple[np.ndarray, list[str]]] = []
    for name in term.factors:
        if name not in dataset.columns:
            raise DesignError(f"formula references unknown column {name!r}")
        if dataset.is_factor(name):
            cols, labels = contrast_columns(
                dataset.factor(name), contrasts.kind_for(name), name
            )
        else:
            cols, labels = dataset.numeric(name)[:, None], [name]
        per_factor.append((cols, labels))
    width = int(np.prod([cols.shape[1] for cols, _ in per_factor]))
    out = np.empty((n, width))
    labels_out: list[str] = []
    for j, combo in enumerate(
        itertools.product(*[range(cols.shape[1]) for cols, _ in per_factor])
    ):
        col = np.ones(n)
        parts = []
        for (cols, labels), idx in zip(per_factor, combo):
            col *= cols[:, idx]
            parts.append(labels[idx])
        out[:, j] = col
        labels_out.append(":".join(parts))
    return out, labels_out


def _inner_columns(
    rt: RandomTerm, dataset: Dataset, contrasts: ContrastScheme
) -> tuple[np.ndarray, list[str], list[Term]]:
    col_arrays: list[np.ndarray] = []
    labels: list[str] = []
    terms: list[Term] = []
    for t in rt.terms:
        cols, labs = _term_columns(t, dataset, contrasts)
        col_arrays.append(cols)
        labels.extend(labs)
        terms.extend([t] * cols.shape[1])
    return np.hstack(col_arrays), labels, terms


def build_model_matrices(
    formula: Formula,
    dataset: Dataset,
    contrasts: ContrastScheme | None = None,
) -> ModelMatrices:
    """Construct X, y, and the per-term random-effects blocks.

    Uncorrelated (``||``) random terms are expanded after contrast coding:
    every resulting numeric column becomes an independent scalar block.
    Raises :class:`DesignError` on unresolved names, non-factor grouping
    columns, or a rank-deficient X.
    """
    contrasts = contrasts or ContrastScheme()
    if formula.response not in dataset.columns:
        raise DesignError(f"response column {formula.response!r} not in data")
    y = dataset.numeric(formula.response).astype(np.float64)

    if not formula.fixed:
        raise DesignError("model has no fixed effects, not even an intercept")
    x_parts, x_labels = [], []
    for term in formula.fixed:
        cols, labels = _term_columns(term, dataset, contrasts)
        x_parts.append(cols)
        x_labels.extend(labels)
    X = np.hstack(x_parts)
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise DesignError(
            f"fixed-effects matrix is rank deficient (rank {rank} < {X.shape[1]} columns)"
        )

    blocks: list[RandomBlock] = []
    for rt in formula.random:
        if rt.group not in dataset.columns:
            raise DesignError(f"grouping factor {rt.group!r} not in data")
        if not dataset.is_factor(rt.group):
            raise DesignError(f"grouping column {rt.group!r} must be a factor")
        group = dataset.factor(rt.group)
        values, labels, terms = _inner_columns(rt, dataset, contrasts)
        if rt.correlated or values.shape[1] == 1:
            blocks.append(
                RandomBlock(
                    group=rt.group,
                    level_codes=group.codes,
                    n_levels=group.n_levels,
                    values=values,
                    labels=tuple(labels),
                    column_terms=tuple(terms),
                    correlated=rt.correlated,
                    source=rt,
                )
            )
        else:
            for j in range(values.shape[1]):
                blocks.append(
                    RandomBlock(
                        group=rt.group,
                        level_codes=group.codes,
                        n_levels=group.n_levels,
                        values=values[:, j : j + 1].copy(),
                        labels=(labels[j],),
                        column_terms=(terms[j],),
                        correlated=False,
                        source=rt,
                    )
                )

    used = {
        name: contrasts.kind_for(name)
        for name in dataset.names
        if dataset.is_factor(name)
        and any(
            name in t.factors
            for t in list(formula.fixed)
            + [t for rt in formula.random for t in rt.terms]
        )
    }
    return ModelMatrices(
        formula=formula,
        X=X,
        x_labels=tuple(x_labels),
        y=y,
        blocks=blocks,
        contrasts=contrasts,
        contrasts_used=used,
        dataset=dataset,
        data_fingerprint=dataset.fingerprint(),
        n_dropped=dataset.n_dropped,
    )
