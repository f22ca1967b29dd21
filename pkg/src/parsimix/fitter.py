"""Profiled deviance evaluation and covariance-parameter optimization.

The model is ``y = X beta + Z Lambda(theta) u + eps`` with ``u`` and
``eps`` spherical Gaussian.  For a given theta the joint modes of
``(u, beta)`` solve a penalized least-squares system; factoring it via
Cholesky yields the profiled ML or REML deviance as a function of theta
alone, which a derivative-free optimizer then minimizes under the
nonnegativity bounds on the diagonal entries.

Observations enter only through cross-products, so each deviance
evaluation costs O(q^3) at worst.  Because a row belongs to exactly one
level of each grouping factor, the within-factor part of Z'Z is
level-block-diagonal; the factorization exploits that with batched
per-level Cholesky factors and, for two crossed factors, a Schur
complement on the smaller factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.blas import get_blas_funcs

_syrk = get_blas_funcs("syrk", dtype=np.float64)

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
    from contextlib import contextmanager

    @contextmanager
    def threadpool_limits(limits=None, user_api=None):
        yield

from . import covparam
from .data import Dataset
from .design import ContrastScheme, ModelMatrices, RandomBlock, build_model_matrices
from .formula import Formula, Term
from .optim import MinimizeResult, minimize_bounded

SINGULAR_TOL = 1e-4     # min/max singular value ratio below which a factor is singular
BOUNDARY_TOL = 1e-4     # diagonal theta entries below this sit on the boundary
DEFAULT_METHOD = "nelder-mead"

_LOG_2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Cross-product context
# ---------------------------------------------------------------------------


@dataclass
class FactorGroup:
    """All random-effects blocks sharing one grouping factor."""

    name: str
    k: int                       # number of levels
    dim: int                     # per-level dimension, summed over blocks
    blocks: list[RandomBlock]
    block_offsets: list[int]     # each block's offset within the per-level dim
    col_offset: int              # factor span's offset within the q columns
    theta_slices: list[slice]    # each block's slice of the full theta vector

    @property
    def n_columns(self) -> int:
        return self.k * self.dim

    @property
    def span(self) -> slice:
        return slice(self.col_offset, self.col_offset + self.n_columns)

    def lambda_tilde(self, theta: np.ndarray) -> np.ndarray:
        """Per-level lower-triangular factor, block-diagonal over terms."""
        lam = np.zeros((self.dim, self.dim))
        for block, off, sl in zip(self.blocks, self.block_offsets, self.theta_slices):
            d = block.dim
            lam[off : off + d, off : off + d] = covparam.theta_to_lambda(theta[sl], d)
        return lam

    def labels(self) -> list[str]:
        out: list[str] = []
        for block in self.blocks:
            out.extend(block.labels)
        return out

    def column_terms(self) -> list[Term]:
        out: list[Term] = []
        for block in self.blocks:
            out.extend(block.column_terms)
        return out


class CrossProducts:
    """Precomputed normal-equation blocks for one model's matrices."""

    def __init__(self, mm: ModelMatrices):
        X, y = mm.X, mm.y
        n, p = X.shape

        factors: list[FactorGroup] = []
        by_name: dict[str, FactorGroup] = {}
        theta_pos = 0
        for block in mm.blocks:
            fg = by_name.get(block.group)
            if fg is None:
                fg = FactorGroup(
                    name=block.group,
                    k=block.n_levels,
                    dim=0,
                    blocks=[],
                    block_offsets=[],
                    col_offset=0,
                    theta_slices=[],
                )
                by_name[block.group] = fg
                factors.append(fg)
            fg.block_offsets.append(fg.dim)
            fg.blocks.append(block)
            fg.theta_slices.append(slice(theta_pos, theta_pos + block.n_theta))
            fg.dim += block.dim
            theta_pos += block.n_theta
        col = 0
        for fg in factors:
            fg.col_offset = col
            col += fg.n_columns
        q = col

        rows_idx: list[np.ndarray] = []
        cols_idx: list[np.ndarray] = []
        data: list[np.ndarray] = []
        arange_n = np.arange(n)
        for fg in factors:
            for block, off in zip(fg.blocks, fg.block_offsets):
                base = fg.col_offset + block.level_codes.astype(np.int64) * fg.dim + off
                for j in range(block.dim):
                    rows_idx.append(arange_n)
                    cols_idx.append(base + j)
                    data.append(np.ascontiguousarray(block.values[:, j]))
        if q:
            Z = sp.csc_matrix(
                (np.concatenate(data), (np.concatenate(rows_idx), np.concatenate(cols_idx))),
                shape=(n, q),
            )
            A = (Z.T @ Z).toarray()
            ZtXy = np.asarray(Z.T @ np.column_stack([X, y]))
        else:
            A = np.zeros((0, 0))
            ZtXy = np.zeros((0, p + 1))

        self.mm = mm
        self.factors = factors
        self.n, self.p, self.q = n, p, q
        self.n_theta = theta_pos
        self.A = A
        self.ZtXy = ZtXy
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        # per-factor diagonal blocks as (k, dim, dim); cross blocks dense
        self.A_diag: list[np.ndarray] = []
        for fg in factors:
            sub = A[fg.span, fg.span].reshape(fg.k, fg.dim, fg.k, fg.dim)
            self.A_diag.append(np.ascontiguousarray(sub[np.arange(fg.k), :, np.arange(fg.k), :]))

        lower = np.full(self.n_theta, -np.inf)
        start = np.zeros(self.n_theta)
        diag_mask = np.zeros(self.n_theta, dtype=bool)
        for fg in factors:
            for block, sl in zip(fg.blocks, fg.theta_slices):
                pos = covparam.diag_positions(block.dim) + sl.start
                lower[pos] = 0.0
                start[pos] = 1.0
                diag_mask[pos] = True
        self.theta_lower = lower
        self.theta_start = start
        self.theta_diag_mask = diag_mask

    def block_theta_slices(self) -> list[tuple[RandomBlock, slice]]:
        out = []
        for fg in self.factors:
            out.extend(zip(fg.blocks, fg.theta_slices))
        return out


def cross_products(mm: ModelMatrices) -> CrossProducts:
    if mm._cross is None:
        mm._cross = CrossProducts(mm)
    return mm._cross  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Structured Cholesky of Lambda' Z'Z Lambda + I
# ---------------------------------------------------------------------------


def _whiten_rows(ctx: CrossProducts, lams: list[np.ndarray], V: np.ndarray) -> np.ndarray:
    """Apply Lambda' to the q rows of V (factor spans transformed in place)."""
    out = V.copy()
    m = V.shape[1]
    for fg, lam in zip(ctx.factors, lams):
        sub = out[fg.span].reshape(fg.k, fg.dim, m)
        out[fg.span] = np.matmul(lam.T, sub).reshape(fg.n_columns, m)
    return out


class _BatchedChol:
    """Cholesky of a level-block-diagonal matrix, one factor.

    The per-level triangles are tiny (the term dimension), so their
    inverses are formed once and every solve becomes a batched matmul.
    """

    def __init__(self, B: np.ndarray):  # (k, D, D)
        try:
            self.L = np.linalg.cholesky(B)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"penalized system not positive definite: {exc}") from exc
        self.k, self.dim = B.shape[0], B.shape[1]
        self.Linv = np.linalg.inv(self.L)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diagonal(self.L, axis1=1, axis2=2))))

    def solve_l(self, V: np.ndarray) -> np.ndarray:
        m = V.shape[1]
        return np.matmul(self.Linv, V.reshape(self.k, self.dim, m)).reshape(-1, m)

    def solve_lt(self, V: np.ndarray) -> np.ndarray:
        m = V.shape[1]
        sol = np.matmul(
            np.swapaxes(self.Linv, 1, 2), V.reshape(self.k, self.dim, m)
        )
        return sol.reshape(-1, m)


class _DenseChol:
    def __init__(self, B: np.ndarray):
        try:
            self.L = sla.cholesky(B, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise FitError(f"penalized system not positive definite: {exc}") from exc

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve_l(self, V: np.ndarray) -> np.ndarray:
        return sla.solve_triangular(self.L, V, lower=True, check_finite=False)

    def solve_lt(self, V: np.ndarray) -> np.ndarray:
        return sla.solve_triangular(self.L.T, V, lower=False, check_finite=False)


class _OneFactorSystem:
    def __init__(self, ctx: CrossProducts, lams: list[np.ndarray]):
        fg = ctx.factors[0]
        lam = lams[0]
        B = np.matmul(np.matmul(lam.T, ctx.A_diag[0]), lam)
        B[:, np.arange(fg.dim), np.arange(fg.dim)] += 1.0
        self.chol = _BatchedChol(B)

    def logdet(self) -> float:
        return self.chol.logdet()

    def solve_l(self, V: np.ndarray) -> np.ndarray:
        return self.chol.solve_l(V)

    def solve_lt(self, V: np.ndarray) -> np.ndarray:
        return self.chol.solve_lt(V)


class _TwoFactorSystem:
    """Eliminate the wider factor level-by-level, Schur on the other."""

    def __init__(self, ctx: CrossProducts, lams: list[np.ndarray]):
        f0, f1 = ctx.factors
        if f0.n_columns >= f1.n_columns:
            self.ei, self.si = 0, 1
        else:
            self.ei, self.si = 1, 0
        fe, fs = ctx.factors[self.ei], ctx.factors[self.si]
        lam_e, lam_s = lams[self.ei], lams[self.si]
        self.fe, self.fs = fe, fs

        Be = np.matmul(np.matmul(lam_e.T, ctx.A_diag[self.ei]), lam_e)
        Be[:, np.arange(fe.dim), np.arange(fe.dim)] += 1.0
        self.chol_e = _BatchedChol(Be)

        cross = ctx.A[fe.span, fs.span]  # (ke*De, ks*Ds)
        W = cross.reshape(fe.k, fe.dim, fs.n_columns)
        W = np.matmul(lam_e.T, W)
        W = W.reshape(fe.n_columns, fs.k, fs.dim) @ lam_s
        W = W.reshape(fe.k, fe.dim, fs.n_columns)
        self.C = np.matmul(self.chol_e.Linv, W)  # (ke, De, qs)

        Bs = np.matmul(np.matmul(lam_s.T, ctx.A_diag[self.si]), lam_s)
        C2 = self.C.reshape(fe.n_columns, fs.n_columns)
        # only the lower triangle is referenced by the factorization
        S = _syrk(-1.0, C2, trans=1, lower=1)
        for lev in range(fs.k):
            s = lev * fs.dim
            S[s : s + fs.dim, s : s + fs.dim] += Bs[lev]
        S[np.arange(fs.n_columns), np.arange(fs.n_columns)] += 1.0
        self.chol_s = _DenseChol(S)

    def logdet(self) -> float:
        return self.chol_e.logdet() + self.chol_s.logdet()

    def solve_l(self, V: np.ndarray) -> np.ndarray:
        ve, vs = V[self.fe.span], V[self.fs.span]
        ye = self.chol_e.solve_l(ve)
        m = V.shape[1]
        rhs = vs - np.tensordot(self.C, ye.reshape(self.fe.k, self.fe.dim, m), axes=([0, 1], [0, 1]))
        ys = self.chol_s.solve_l(rhs)
        out = np.empty_like(V)
        out[self.fe.span], out[self.fs.span] = ye, ys
        return out

    def solve_lt(self, V: np.ndarray) -> np.ndarray:
        ve, vs = V[self.fe.span], V[self.fs.span]
        ys = self.chol_s.solve_lt(vs)
        m = V.shape[1]
        rhs = ve.reshape(self.fe.k, self.fe.dim, m) - np.matmul(self.C, ys)
        ye = self.chol_e.solve_lt(rhs.reshape(self.fe.n_columns, m))
        out = np.empty_like(V)
        out[self.fe.span], out[self.fs.span] = ye, ys
        return out


class _DenseSystem:
    def __init__(self, ctx: CrossProducts, lams: list[np.ndarray]):
        B = ctx.A.copy()
        m = B.shape[1]
        for fg, lam in zip(ctx.factors, lams):
            sub = B[fg.span].reshape(fg.k, fg.dim, m)
            B[fg.span] = np.matmul(lam.T, sub).reshape(fg.n_columns, m)
        for fg, lam in zip(ctx.factors, lams):
            sub = B[:, fg.span].reshape(B.shape[0], fg.k, fg.dim)
            B[:, fg.span] = (sub @ lam).reshape(B.shape[0], fg.n_columns)
        B[np.arange(ctx.q), np.arange(ctx.q)] += 1.0
        self.chol = _DenseChol(B)

    def logdet(self) -> float:
        return self.chol.logdet()

    def solve_l(self, V: np.ndarray) -> np.ndarray:
        return self.chol.solve_l(V)

    def solve_lt(self, V: np.ndarray) -> np.ndarray:
        return self.chol.solve_lt(V)


def _build_system(ctx: CrossProducts, lams: list[np.ndarray]):
    if len(ctx.factors) == 1:
        return _OneFactorSystem(ctx, lams)
    if len(ctx.factors) == 2:
        return _TwoFactorSystem(ctx, lams)
    return _DenseSystem(ctx, lams)


# ---------------------------------------------------------------------------
# Profiled deviance
# ---------------------------------------------------------------------------


@dataclass
class _Solution:
    deviance: float
    beta: np.ndarray
    u: np.ndarray
    sigma2: float
    r2: float
    rx: np.ndarray          # lower Cholesky factor of the fixed-effects block
    logdet_rx2: float


def _check_criterion(criterion: str) -> str:
    crit = criterion.lower()
    if crit not in ("ml", "reml"):
        raise ValueError(f"criterion must be 'ml' or 'reml', got {criterion!r}")
    return crit


def _pls_evaluate(
    ctx: CrossProducts,
    theta: np.ndarray,
    criterion: str,
    want_solution: bool = False,
):
    n, p = ctx.n, ctx.p
    lams = [fg.lambda_tilde(theta) for fg in ctx.factors]

    if ctx.q:
        system = _build_system(ctx, lams)
        ct = _whiten_rows(ctx, lams, ctx.ZtXy)
        R = system.solve_l(ct)
        RZX, cu = R[:, :p], R[:, p]
        rxtrx = ctx.XtX - RZX.T @ RZX
        logdet_zz = system.logdet()
    else:
        system = None
        RZX = np.zeros((0, p))
        cu = np.zeros(0)
        rxtrx = ctx.XtX
        logdet_zz = 0.0

    try:
        rx = sla.cholesky(rxtrx, lower=True, check_finite=False)
    except sla.LinAlgError:
        ridge = 1e-10 * max(float(np.trace(rxtrx)) / max(p, 1), 1.0)
        try:
            rx = sla.cholesky(
                rxtrx + ridge * np.eye(p), lower=True, check_finite=False
            )
        except sla.LinAlgError as exc:
            raise FitError(
                "fixed-effects block of the penalized system is singular"
            ) from exc
    cbeta = sla.solve_triangular(
        rx, ctx.Xty - RZX.T @ cu, lower=True, check_finite=False
    )
    r2 = ctx.yty - float(cu @ cu) - float(cbeta @ cbeta)
    r2 = max(r2, 2.2e-16 * max(ctx.yty, 1e-300))

    if criterion == "ml":
        deviance = logdet_zz + n * (1.0 + _LOG_2PI + math.log(r2 / n))
    else:
        logdet_rx2 = 2.0 * float(np.sum(np.log(np.diag(rx))))
        deviance = (
            logdet_zz
            + logdet_rx2
            + (n - p) * (1.0 + _LOG_2PI + math.log(r2 / (n - p)))
        )

    if not want_solution:
        return deviance

    beta = sla.solve_triangular(rx.T, cbeta, lower=False, check_finite=False)
    if ctx.q:
        u = system.solve_lt((cu - RZX @ beta)[:, None])[:, 0]
    else:
        u = np.zeros(0)
    sigma2 = r2 / n if criterion == "ml" else r2 / (n - p)
    logdet_rx2 = 2.0 * float(np.sum(np.log(np.diag(rx))))
    return _Solution(
        deviance=deviance,
        beta=beta,
        u=u,
        sigma2=sigma2,
        r2=r2,
        rx=rx,
        logdet_rx2=logdet_rx2,
    )


def profiled_deviance(
    theta: np.ndarray, matrices: ModelMatrices, criterion: str = "reml"
) -> float:
    """Profiled deviance (-2 log likelihood, fixed effects and scale
    profiled out) at the given covariance parameters."""
    criterion = _check_criterion(criterion)
    ctx = cross_products(matrices)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (ctx.n_theta,):
        raise ValueError(
            f"theta has length {theta.size}, expected {ctx.n_theta}"
        )
    if np.any(theta < ctx.theta_lower - 1e-12):
        raise ValueError("theta violates its lower bounds")
    return float(_pls_evaluate(ctx, theta, criterion))


# ---------------------------------------------------------------------------
# Fit results and optimization
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FitResult:
    """A fitted model: covariance parameters, fixed effects, diagnostics."""

    formula: Formula
    matrices: ModelMatrices
    criterion: str
    theta: np.ndarray
    beta: np.ndarray
    sigma: float
    deviance: float
    loglik: float
    n_evals: int
    converged: bool
    boundary_flags: np.ndarray
    singular: bool
    vcov_beta: np.ndarray
    method: str
    budget: int

    @property
    def n(self) -> int:
        return self.matrices.n

    @property
    def p(self) -> int:
        return self.matrices.p

    @property
    def n_theta(self) -> int:
        return len(self.theta)

    @property
    def beta_labels(self) -> tuple[str, ...]:
        return self.matrices.x_labels

    def context(self) -> CrossProducts:
        return cross_products(self.matrices)

    def factor_lambda(self, group: str) -> np.ndarray:
        """Per-level relative Cholesky factor of one grouping factor."""
        for fg in self.context().factors:
            if fg.name == group:
                return fg.lambda_tilde(self.theta)
        raise KeyError(f"no random effects for grouping factor {group!r}")

    def factor_labels(self, group: str) -> list[str]:
        for fg in self.context().factors:
            if fg.name == group:
                return fg.labels()
        raise KeyError(f"no random effects for grouping factor {group!r}")

    def group_names(self) -> list[str]:
        return [fg.name for fg in self.context().factors]

    def covariance_summaries(self) -> dict[str, covparam.CovarianceSummary]:
        out = {}
        for fg in self.context().factors:
            lam = fg.lambda_tilde(self.theta)
            cov = covparam.lambda_to_cov(lam, self.sigma)
            out[fg.name] = covparam.cov_to_sd_cor(cov)
        return out

    def relative_sds(self) -> dict[str, np.ndarray]:
        """Per grouping factor: row norms of the per-level factor (SD / sigma)."""
        out = {}
        for fg in self.context().factors:
            lam = fg.lambda_tilde(self.theta)
            out[fg.name] = np.sqrt(np.sum(lam * lam, axis=1))
        return out


def _singularity(ctx: CrossProducts, theta: np.ndarray) -> bool:
    for block, sl in ctx.block_theta_slices():
        lam = covparam.theta_to_lambda(theta[sl], block.dim)
        svals = np.linalg.svd(lam, compute_uv=False)
        if svals[0] <= 0.0 or svals[-1] < SINGULAR_TOL * svals[0]:
            return True
    return False


def default_budget(n_theta: int) -> int:
    """Evaluation allowance; scales with the square of the parameter count."""
    return max(10 * n_theta * n_theta, 2000)


def optimize(
    matrices: ModelMatrices,
    criterion: str = "reml",
    init: np.ndarray | None = None,
    budget: int | None = None,
    method: str = DEFAULT_METHOD,
    opt_options: dict | None = None,
) -> FitResult:
    """Minimize the profiled deviance over theta and assemble a FitResult.

    A fit that exhausts its budget is returned with ``converged=False``
    rather than raised: slow convergence is a model-complexity signal the
    selection workflow acts on.  ``opt_options`` go to the optimizer, e.g.
    a smaller starting step for warm-started refits.
    """
    criterion = _check_criterion(criterion)
    ctx = cross_products(matrices)
    if budget is None:
        budget = default_budget(ctx.n_theta)
    if init is None:
        init = ctx.theta_start
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (ctx.n_theta,):
        raise ValueError(f"init has length {init.size}, expected {ctx.n_theta}")

    if ctx.n_theta == 0:
        sol = _pls_evaluate(ctx, np.zeros(0), criterion, want_solution=True)
        return _assemble(matrices, ctx, criterion, np.zeros(0), sol, 1, True, method, budget)

    def objective(theta: np.ndarray) -> float:
        return _pls_evaluate(ctx, theta, criterion)

    # Per-evaluation factorizations are small; BLAS thread synchronization
    # costs more than it buys, so the optimization loop runs single-threaded.
    with threadpool_limits(limits=1, user_api="blas"):
        res: MinimizeResult = minimize_bounded(
            objective, init, lower=ctx.theta_lower, budget=budget, method=method,
            **(opt_options or {}),
        )
    theta_hat = np.maximum(res.x, ctx.theta_lower)
    sol = _pls_evaluate(ctx, theta_hat, criterion, want_solution=True)
    return _assemble(
        matrices, ctx, criterion, theta_hat, sol, res.n_evals, res.converged, method, budget
    )


def _assemble(
    matrices: ModelMatrices,
    ctx: CrossProducts,
    criterion: str,
    theta: np.ndarray,
    sol: _Solution,
    n_evals: int,
    converged: bool,
    method: str,
    budget: int,
) -> FitResult:
    rxtrx_inv = sla.cho_solve((sol.rx, True), np.eye(ctx.p), check_finite=False)
    vcov = sol.sigma2 * (rxtrx_inv + rxtrx_inv.T) / 2.0
    boundary = ctx.theta_diag_mask & (np.abs(theta) < BOUNDARY_TOL)
    return FitResult(
        formula=matrices.formula,
        matrices=matrices,
        criterion=criterion,
        theta=theta,
        beta=sol.beta,
        sigma=math.sqrt(sol.sigma2),
        deviance=float(sol.deviance),
        loglik=-0.5 * float(sol.deviance),
        n_evals=n_evals,
        converged=converged,
        boundary_flags=boundary,
        singular=_singularity(ctx, theta) if ctx.n_theta else False,
        vcov_beta=vcov,
        method=method,
        budget=budget,
    )


def fit_formula(
    formula: Formula | str,
    dataset: Dataset,
    criterion: str = "reml",
    contrasts: ContrastScheme | None = None,
    budget: int | None = None,
    method: str = DEFAULT_METHOD,
) -> FitResult:
    """Convenience: parse/build matrices and optimize in one call."""
    from .formula import parse_formula

    if isinstance(formula, str):
        formula = parse_formula(formula)
    mm = build_model_matrices(formula, dataset, contrasts)
    return optimize(mm, criterion=criterion, budget=budget, method=method)


def warm_start(ctx: CrossProducts, previous: FitResult | None) -> np.ndarray:
    """Initial theta for a refit, copying estimates of shared components.

    Blocks identical in (group, columns, correlation) are copied wholesale;
    otherwise matched columns start at their previous relative SD with
    zero correlations; new components start at 1.
    """
    init = ctx.theta_start.copy()
    if previous is None:
        return init
    prev_ctx = previous.context()
    prev_blocks = {
        (b.group, b.column_terms, b.correlated): previous.theta[sl]
        for b, sl in prev_ctx.block_theta_slices()
    }
    prev_sd: dict[tuple[str, Term], float] = {}
    for fg in prev_ctx.factors:
        lam = fg.lambda_tilde(previous.theta)
        rownorm = np.sqrt(np.sum(lam * lam, axis=1))
        for term, s in zip(fg.column_terms(), rownorm):
            prev_sd[(fg.name, term)] = float(s)

    for block, sl in ctx.block_theta_slices():
        key = (block.group, block.column_terms, block.correlated)
        if key in prev_blocks:
            init[sl] = prev_blocks[key]
            continue
        diag = covparam.diag_positions(block.dim)
        vals = np.zeros(block.n_theta)
        for j, term in enumerate(block.column_terms):
            vals[diag[j]] = prev_sd.get((block.group, term), 1.0)
        init[sl] = vals
    return init


def refit(
    fit: FitResult,
    formula: Formula | str | None = None,
    dataset: Dataset | None = None,
    criterion: str | None = None,
    budget: int | None = None,
    method: str | None = None,
    contrasts: ContrastScheme | None = None,
) -> FitResult:
    """Fit a modified model, warm-starting theta from overlapping terms."""
    from .formula import parse_formula

    if isinstance(formula, str):
        formula = parse_formula(formula)
    if formula is None and dataset is None and contrasts is None:
        mm = fit.matrices
    else:
        target = formula if formula is not None else fit.formula
        data = dataset if dataset is not None else fit.matrices.dataset
        used = contrasts if contrasts is not None else fit.matrices.contrasts
        mm = build_model_matrices(target, data, used)
    ctx = cross_products(mm)
    same_data = mm.data_fingerprint == fit.matrices.data_fingerprint
    init = warm_start(ctx, fit if same_data else None)
    return optimize(
        mm,
        criterion=criterion or fit.criterion,
        init=init,
        budget=budget,
        method=method or fit.method,
    )
