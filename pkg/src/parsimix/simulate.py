"""Dataset generation from fully specified mixed models, plus closed-form
oracles for checking the fitter on balanced layouts.

Truth covariance matrices may be rank deficient; they are factored with a
pivoted Cholesky whose trailing pivots are kept exactly zero, so singular
truths generate effects confined to the intended subspace.  All draws come
from a counter-based generator keyed by the spec's seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.lapack import get_lapack_funcs

from .data import Dataset, Factor, factor_from_strings, from_columns
from .design import ContrastScheme, contrast_columns

_dpstrf = get_lapack_funcs("pstrf", dtype=np.float64)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    """One experimental factor and where it varies."""

    name: str
    levels: tuple[str, ...]
    within_subjects: bool = True
    within_items: bool = True

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class DesignSpec:
    """Crossed subjects-by-items layout (or subjects only when n_items=0)."""

    n_subjects: int
    n_items: int = 0
    factors: tuple[FactorSpec, ...] = ()
    reps: int = 1
    subject_name: str = "subject"
    item_name: str = "item"

    def __post_init__(self):
        if self.n_subjects < 1:
            raise SimulationError("need at least one subject")
        if self.reps < 1:
            raise SimulationError("reps must be >= 1")
        for f in self.factors:
            if f.n_levels < 2:
                raise SimulationError(f"factor {f.name!r} needs >= 2 levels")
            if self.n_items > 0 and not (f.within_subjects or f.within_items):
                raise SimulationError(
                    f"factor {f.name!r} is between subjects and between items; "
                    "crossed designs cannot assign it consistently"
                )


@dataclass(frozen=True)
class RandomTruth:
    """True covariance (response units squared) over named effect columns."""

    labels: tuple[str, ...]
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (len(self.labels), len(self.labels)):
            raise SimulationError(
                f"covariance shape {cov.shape} does not match {len(self.labels)} labels"
            )
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.max(np.abs(cov)))):
            raise SimulationError("truth covariance must be symmetric")
        eigs = np.linalg.eigvalsh(cov)
        if eigs[0] < -1e-10 * max(1.0, eigs[-1]):
            raise SimulationError("truth covariance is not positive semidefinite")


@dataclass(frozen=True)
class TruthSpec:
    """Everything needed to generate one dataset deterministically."""

    design: DesignSpec
    beta: dict[str, float]
    ranef: dict[str, RandomTruth] = field(default_factory=dict)
    sigma: float = 1.0
    seed: int = 0
    response_name: str = "y"
    contrasts: ContrastScheme = field(default_factory=ContrastScheme)

    def __post_init__(self):
        if self.sigma <= 0:
            raise SimulationError("sigma must be positive")


def pivoted_cholesky_factor(cov: np.ndarray) -> np.ndarray:
    """F with cov = F @ F.T; columns beyond the numeric rank exactly zero."""
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    if np.max(np.abs(cov)) == 0.0:
        return np.zeros((d, d))
    c, piv, rank, info = _dpstrf(cov, lower=1)
    if info < 0:
        raise SimulationError(f"pivoted Cholesky failed (info={info})")
    L = np.tril(c)
    L[:, rank:] = 0.0
    F = np.zeros((d, d))
    F[piv - 1, :] = L
    return F


def _mixed_radix(index: int, bases: list[int]) -> list[int]:
    out = []
    for b in reversed(bases):
        out.append(index % b)
        index //= b
    return list(reversed(out))


def build_design_frame(design: DesignSpec) -> dict[str, list[str]]:
    """Assign factor levels to rows of the crossed (or subject-only) layout.

    Within-both factors rotate over the joint cell grid by subject+item
    index, so every subject and every item sees each cell equally often
    when counts divide evenly.  A factor varying within subjects but
    between items is pinned per item (and vice versa).
    """
    cols: dict[str, list[str]] = {design.subject_name: []}
    if design.n_items > 0:
        cols[design.item_name] = []
    for f in design.factors:
        cols[f.name] = []

    sub_width = max(3, len(str(design.n_subjects)))
    item_width = max(3, len(str(design.n_items))) if design.n_items else 0

    if design.n_items > 0:
        within_both = [f for f in design.factors if f.within_subjects and f.within_items]
        bases = [f.n_levels for f in within_both]
        n_cells = int(np.prod(bases)) if bases else 1
        for s, i, _ in itertools.product(
            range(design.n_subjects), range(design.n_items), range(design.reps)
        ):
            cols[design.subject_name].append(f"s{s + 1:0{sub_width}d}")
            cols[design.item_name].append(f"i{i + 1:0{item_width}d}")
            cell = _mixed_radix((s + i) % n_cells, bases) if bases else []
            wb = 0
            for f in design.factors:
                if f.within_subjects and f.within_items:
                    cols[f.name].append(f.levels[cell[wb]])
                    wb += 1
                elif f.within_subjects:  # between items
                    cols[f.name].append(f.levels[i % f.n_levels])
                else:  # within items, between subjects
                    cols[f.name].append(f.levels[s % f.n_levels])
    else:
        within = [f for f in design.factors if f.within_subjects]
        between = [f for f in design.factors if not f.within_subjects]
        bases = [f.n_levels for f in within]
        n_cells = int(np.prod(bases)) if bases else 1
        for s in range(design.n_subjects):
            for cell_idx in range(n_cells):
                cell = _mixed_radix(cell_idx, bases)
                for _ in range(design.reps):
                    cols[design.subject_name].append(f"s{s + 1:0{sub_width}d}")
                    for f, lev in zip(within, cell):
                        cols[f.name].append(f.levels[lev])
                    for f in between:
                        cols[f.name].append(f.levels[s % f.n_levels])
    return cols


def _effect_columns(
    frame: dict[str, list[str]],
    design: DesignSpec,
    contrasts: ContrastScheme,
) -> tuple[np.ndarray, list[str]]:
    """Full factorial effect basis: intercept, all contrasts, all products."""
    n = len(frame[design.subject_name])
    mats: list[np.ndarray] = [np.ones((n, 1))]
    labels: list[str] = ["(Intercept)"]
    factor_cols: list[tuple[np.ndarray, list[str]]] = []
    for f in design.factors:
        fac = factor_from_strings(frame[f.name], levels=f.levels)
        cols, labs = contrast_columns(fac, contrasts.kind_for(f.name), f.name)
        factor_cols.append((cols, labs))
    for r in range(1, len(design.factors) + 1):
        for combo in itertools.combinations(range(len(design.factors)), r):
            parts = [factor_cols[i] for i in combo]
            for idxs in itertools.product(*[range(c.shape[1]) for c, _ in parts]):
                col = np.ones(n)
                labs = []
                for (cmat, clabs), j in zip(parts, idxs):
                    col = col * cmat[:, j]
                    labs.append(clabs[j])
                mats.append(col[:, None])
                labels.append(":".join(labs))
    return np.hstack(mats), labels


def simulate_lmm(spec: TruthSpec) -> Dataset:
    """Generate ``y = X beta + sum_g Z_g b_g + eps`` per the truth spec."""
    design = spec.design
    frame = build_design_frame(design)
    n = len(frame[design.subject_name])
    basis, labels = _effect_columns(frame, design, spec.contrasts)
    label_idx = {lab: j for j, lab in enumerate(labels)}

    beta = np.zeros(len(labels))
    for lab, value in spec.beta.items():
        if lab not in label_idx:
            raise SimulationError(
                f"unknown fixed-effect label {lab!r}; available: {labels}"
            )
        beta[label_idx[lab]] = float(value)
    y = basis @ beta

    rng = np.random.Generator(np.random.Philox(key=spec.seed))

    grouping: dict[str, list[str]] = {design.subject_name: frame[design.subject_name]}
    if design.n_items > 0:
        grouping[design.item_name] = frame[design.item_name]
    for gname, truth in spec.ranef.items():
        if gname not in grouping:
            raise SimulationError(f"unknown grouping factor {gname!r}")
        codes = factor_from_strings(grouping[gname]).codes
        k = int(codes.max()) + 1
        cols = []
        for lab in truth.labels:
            if lab not in label_idx:
                raise SimulationError(
                    f"unknown random-effect label {lab!r} for {gname!r}"
                )
            cols.append(label_idx[lab])
        F = pivoted_cholesky_factor(np.asarray(truth.cov, dtype=np.float64))
        b = rng.standard_normal((k, F.shape[0])) @ F.T
        y = y + np.sum(basis[:, cols] * b[codes, :], axis=1)

    y = y + spec.sigma * rng.standard_normal(n)

    data: dict[str, object] = {spec.response_name: y}
    data[design.subject_name] = frame[design.subject_name]
    if design.n_items > 0:
        data[design.item_name] = frame[design.item_name]
    for f in design.factors:
        data[f.name] = frame[f.name]
    return from_columns(data)


# ---------------------------------------------------------------------------
# TruthSpec (de)serialization, for the CLI and saved scenario files
# ---------------------------------------------------------------------------


def truth_spec_to_dict(spec: TruthSpec) -> dict:
    return {
        "design": {
            "n_subjects": spec.design.n_subjects,
            "n_items": spec.design.n_items,
            "reps": spec.design.reps,
            "subject_name": spec.design.subject_name,
            "item_name": spec.design.item_name,
            "factors": [
                {
                    "name": f.name,
                    "levels": list(f.levels),
                    "within_subjects": f.within_subjects,
                    "within_items": f.within_items,
                }
                for f in spec.design.factors
            ],
        },
        "beta": dict(spec.beta),
        "ranef": {
            g: {"labels": list(t.labels), "cov": np.asarray(t.cov).tolist()}
            for g, t in spec.ranef.items()
        },
        "sigma": spec.sigma,
        "seed": spec.seed,
        "response_name": spec.response_name,
        "contrasts": {
            "default": spec.contrasts.default,
            "per_factor": dict(spec.contrasts.per_factor),
        },
    }


def truth_spec_from_dict(payload: dict) -> TruthSpec:
    try:
        d = payload["design"]
        factors = tuple(
            FactorSpec(
                name=f["name"],
                levels=tuple(f["levels"]),
                within_subjects=bool(f.get("within_subjects", True)),
                within_items=bool(f.get("within_items", True)),
            )
            for f in d.get("factors", [])
        )
        design = DesignSpec(
            n_subjects=int(d["n_subjects"]),
            n_items=int(d.get("n_items", 0)),
            factors=factors,
            reps=int(d.get("reps", 1)),
            subject_name=d.get("subject_name", "subject"),
            item_name=d.get("item_name", "item"),
        )
        ranef = {
            g: RandomTruth(
                labels=tuple(t["labels"]), cov=np.asarray(t["cov"], dtype=np.float64)
            )
            for g, t in payload.get("ranef", {}).items()
        }
        contrasts_info = payload.get("contrasts", {})
        contrasts = ContrastScheme(
            default=contrasts_info.get("default", "sum"),
            per_factor=dict(contrasts_info.get("per_factor", {})),
        )
        return TruthSpec(
            design=design,
            beta={str(k): float(v) for k, v in payload.get("beta", {}).items()},
            ranef=ranef,
            sigma=float(payload.get("sigma", 1.0)),
            seed=int(payload.get("seed", 0)),
            response_name=payload.get("response_name", "y"),
            contrasts=contrasts,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SimulationError(f"bad truth spec: {exc}") from exc


def write_dataset_csv(dataset: Dataset, path: str) -> None:
    """Write a Dataset in the same CSV format ``ingest_csv`` reads."""
    import csv
    from .data import Factor as _Factor

    names = dataset.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        cols = []
        for name in names:
            col = dataset.columns[name]
            if isinstance(col, _Factor):
                cols.append([col.levels[c] for c in col.codes])
            else:
                cols.append([repr(float(v)) for v in col])
        for row in zip(*cols):
            w.writerow(row)


# ---------------------------------------------------------------------------
# Closed-form oracle: balanced one-way layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneWayEstimates:
    sigma_b2: float
    sigma2: float
    reml_deviance: float
    msb: float
    msw: float


def closed_form_one_way(y: np.ndarray, groups: np.ndarray | Factor) -> OneWayEstimates:
    """ANOVA-identity REML estimates for a balanced one-way random layout.

    With k groups of n_per observations: sigma2 = MSW and
    sigma_b2 = max(0, (MSB - MSW) / n_per); the restricted deviance is
    evaluated in closed form at exactly these values.
    """
    y = np.asarray(y, dtype=np.float64)
    codes = groups.codes if isinstance(groups, Factor) else np.asarray(groups)
    if len(y) != len(codes):
        raise SimulationError("y and groups have different lengths")
    k = int(codes.max()) + 1
    counts = np.bincount(codes, minlength=k)
    if k < 2:
        raise SimulationError("need at least two groups")
    if np.any(counts == 0) or np.any(counts != counts[0]):
        raise SimulationError("layout is not balanced")
    n_per = int(counts[0])
    if n_per < 2:
        raise SimulationError("need at least two observations per group")
    n = len(y)

    group_means = np.bincount(codes, weights=y) / n_per
    grand = float(y.mean())
    ssw = float(np.sum((y - group_means[codes]) ** 2))
    ssb = n_per * float(np.sum((group_means - grand) ** 2))
    msw = ssw / (k * (n_per - 1))
    msb = ssb / (k - 1)

    sigma2 = msw
    sigma_b2 = max(0.0, (msb - msw) / n_per)
    lam = sigma2 + n_per * sigma_b2
    dev = (
        (n - 1) * math.log(2.0 * math.pi)
        + (n - k) * math.log(sigma2)
        + k * math.log(lam)
        + math.log(n / lam)
        + ssw / sigma2
        + ssb / lam
    )
    return OneWayEstimates(
        sigma_b2=sigma_b2, sigma2=sigma2, reml_deviance=dev, msb=msb, msw=msw
    )
