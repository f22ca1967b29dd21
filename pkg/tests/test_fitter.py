import math

import numpy as np
import pytest

from parsimix import (
    DesignSpec,
    FactorSpec,
    RandomTruth,
    TruthSpec,
    build_model_matrices,
    closed_form_one_way,
    default_budget,
    fit_formula,
    from_columns,
    optimize,
    parse_formula,
    profiled_deviance,
    refit,
    simulate_lmm,
)
from parsimix.fitter import cross_products


def one_way_spec(seed, sd_b=1.2, sigma=0.8, k=20, n_per=6):
    return TruthSpec(
        design=DesignSpec(n_subjects=k, n_items=0, factors=(), reps=n_per),
        beta={"(Intercept)": 10.0},
        ranef={"subject": RandomTruth(("(Intercept)",), np.array([[sd_b**2]]))},
        sigma=sigma,
        seed=seed,
    )


def test_reml_matches_closed_form_oracle(one_way_dataset):
    ds = one_way_dataset
    oracle = closed_form_one_way(ds.numeric("y"), ds.factor("subject"))
    assert oracle.msb > oracle.msw
    fit = fit_formula("y ~ 1 + (1|subject)", ds, criterion="reml")
    assert fit.converged
    sigma_b2 = (fit.sigma * fit.theta[0]) ** 2
    assert sigma_b2 == pytest.approx(oracle.sigma_b2, rel=1e-6)
    assert fit.sigma**2 == pytest.approx(oracle.sigma2, rel=1e-6)
    assert fit.deviance == pytest.approx(oracle.reml_deviance, abs=1e-8)


def test_ml_deviance_at_zero_theta_equals_ols(one_way_dataset):
    mm = build_model_matrices(parse_formula("y ~ 1 + (1|subject)"), one_way_dataset)
    X, y = mm.X, mm.y
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    rss = float(np.sum((y - X @ beta) ** 2))
    n = len(y)
    expected = n * (1 + math.log(2 * math.pi * rss / n))
    assert profiled_deviance(np.zeros(1), mm, "ml") == pytest.approx(expected, abs=1e-9)


def test_doubling_y_shifts_ml_deviance_by_2n_log2(one_way_dataset):
    ds = one_way_dataset
    mm = build_model_matrices(parse_formula("y ~ 1 + (1|subject)"), ds)
    doubled = from_columns(
        {"y": 2.0 * ds.numeric("y"), "subject": ds.factor("subject")}
    )
    mm2 = build_model_matrices(parse_formula("y ~ 1 + (1|subject)"), doubled)
    theta = np.array([1.3])
    n = mm.n
    shift = profiled_deviance(theta, mm2, "ml") - profiled_deviance(theta, mm, "ml")
    assert shift == pytest.approx(2 * n * math.log(2.0), abs=1e-9)


def test_response_scale_equivariance(slope_dataset):
    ds = slope_dataset
    fit1 = fit_formula("y ~ 1 + a + (1 + a | subject)", ds)
    scaled = from_columns(
        {"y": 3.0 * ds.numeric("y"), "subject": ds.factor("subject"),
         "a": ds.factor("a")}
    )
    fit2 = fit_formula("y ~ 1 + a + (1 + a | subject)", scaled)
    assert np.allclose(fit1.theta, fit2.theta, atol=1e-4)
    assert fit2.sigma == pytest.approx(3.0 * fit1.sigma, rel=1e-6)


def test_deviance_never_above_init(slope_dataset):
    mm = build_model_matrices(parse_formula("y ~ 1 + a + (1+a|subject)"), slope_dataset)
    ctx = cross_products(mm)
    init_dev = profiled_deviance(ctx.theta_start, mm, "reml")
    fit = optimize(mm, "reml")
    assert fit.deviance <= init_dev + 1e-12


def test_boundary_fit_detected_as_singular():
    spec = TruthSpec(
        design=DesignSpec(n_subjects=40, reps=8,
                          factors=(FactorSpec("a", ("a1", "a2")),)),
        beta={"(Intercept)": 1.0},
        ranef={},  # no subject variance at all
        sigma=1.0,
        seed=21,
    )
    ds = simulate_lmm(spec)
    fit = fit_formula("y ~ a + (1|subject)", ds)
    assert fit.singular
    assert fit.boundary_flags[0]
    assert fit.theta[0] < 1e-3


def test_determinism_bitwise(slope_dataset):
    mm1 = build_model_matrices(parse_formula("y ~ a + (1+a|subject)"), slope_dataset)
    mm2 = build_model_matrices(parse_formula("y ~ a + (1+a|subject)"), slope_dataset)
    f1 = optimize(mm1, "reml")
    f2 = optimize(mm2, "reml")
    assert f1.theta.tobytes() == f2.theta.tobytes()
    assert f1.beta.tobytes() == f2.beta.tobytes()
    assert f1.deviance.hex() == f2.deviance.hex()
    assert f1.n_evals == f2.n_evals


def test_nesting_monotonicity_ml(slope_dataset):
    small = fit_formula("y ~ a + (1|subject)", slope_dataset, criterion="ml")
    large = fit_formula("y ~ a + (1+a|subject)", slope_dataset, criterion="ml")
    assert small.deviance >= large.deviance - 1e-3


def test_interior_stationarity(slope_dataset):
    fit = fit_formula("y ~ a + (1+a|subject)", slope_dataset)
    assert not fit.boundary_flags.any()
    mm = fit.matrices
    h = 1e-4
    for i in range(len(fit.theta)):
        lo = fit.theta.copy(); lo[i] -= h
        hi = fit.theta.copy(); hi[i] += h
        g = (profiled_deviance(hi, mm, "reml") - profiled_deviance(lo, mm, "reml")) / (2 * h)
        assert abs(g) < 1e-3 * (1 + abs(fit.deviance))


def test_refit_identical_formula_matches(slope_dataset):
    fit = fit_formula("y ~ a + (1+a|subject)", slope_dataset)
    again = refit(fit)
    assert abs(again.deviance - fit.deviance) < 1e-10


def test_refit_zcp_of_diagonal_truth_is_close():
    spec = TruthSpec(
        design=DesignSpec(n_subjects=60, reps=10,
                          factors=(FactorSpec("a", ("a1", "a2")),)),
        beta={"(Intercept)": 3.0, "a[a1]": 0.5},
        ranef={"subject": RandomTruth(("(Intercept)", "a[a1]"),
                                      np.diag([1.0, 0.36]))},
        sigma=1.0,
        seed=33,
    )
    ds = simulate_lmm(spec)
    corr = fit_formula("y ~ a + (1+a|subject)", ds)
    zcp = refit(corr, formula="y ~ a + (1+a||subject)")
    assert zcp.deviance >= corr.deviance - 1e-6
    assert abs(zcp.deviance - corr.deviance) < 2.0  # true correlation is zero


def test_refit_after_dropping_zero_component():
    spec = TruthSpec(
        design=DesignSpec(n_subjects=50, reps=8,
                          factors=(FactorSpec("a", ("a1", "a2")),)),
        beta={"(Intercept)": 3.0},
        ranef={"subject": RandomTruth(("(Intercept)",), np.array([[1.0]]))},
        sigma=1.0,
        seed=5,
    )
    ds = simulate_lmm(spec)
    full = fit_formula("y ~ a + (1+a||subject)", ds)
    slope_sd = full.relative_sds()["subject"][1]
    if slope_sd < 1e-3:  # slope variance estimated at the boundary
        reduced = refit(full, formula="y ~ a + (1|subject)")
        assert abs(reduced.deviance - full.deviance) < 1e-4


def test_three_factor_dense_path():
    rng = np.random.default_rng(8)
    n = 240
    ds = from_columns(
        {
            "y": rng.standard_normal(n),
            "s": [f"s{i % 12}" for i in range(n)],
            "g": [f"g{i % 5}" for i in range(n)],
            "h": [f"h{(i // 5) % 4}" for i in range(n)],
        }
    )
    fit = fit_formula("y ~ 1 + (1|s) + (1|g) + (1|h)", ds)
    assert len(fit.group_names()) == 3
    assert np.isfinite(fit.deviance)


def test_structured_solvers_match_dense_reference(crossed_dataset):
    import scipy.linalg as sla

    mm = build_model_matrices(
        parse_formula("y ~ p + (1 + p | subject) + (1 + p | item)"), crossed_dataset
    )
    ctx = cross_products(mm)
    rng = np.random.default_rng(4)

    def brute(theta, criterion):
        lam_full = np.zeros((ctx.q, ctx.q))
        for fg in ctx.factors:
            lam = fg.lambda_tilde(theta)
            for lev in range(fg.k):
                s = fg.col_offset + lev * fg.dim
                lam_full[s:s + fg.dim, s:s + fg.dim] = lam
        M = lam_full.T @ ctx.A @ lam_full + np.eye(ctx.q)
        L = sla.cholesky(M, lower=True)
        R = sla.solve_triangular(L, lam_full.T @ ctx.ZtXy, lower=True)
        RZX, cu = R[:, :ctx.p], R[:, ctx.p]
        rxtrx = ctx.XtX - RZX.T @ RZX
        rx = sla.cholesky(rxtrx, lower=True)
        cb = sla.solve_triangular(rx, ctx.Xty - RZX.T @ cu, lower=True)
        r2 = ctx.yty - cu @ cu - cb @ cb
        ld = 2 * np.sum(np.log(np.diag(L)))
        n, p = ctx.n, ctx.p
        if criterion == "ml":
            return ld + n * (1 + math.log(2 * math.pi * r2 / n))
        return ld + 2 * np.sum(np.log(np.diag(rx))) + (n - p) * (
            1 + math.log(2 * math.pi * r2 / (n - p))
        )

    for _ in range(5):
        theta = ctx.theta_start + rng.uniform(0.0, 0.7, ctx.n_theta)
        for crit in ("reml", "ml"):
            assert profiled_deviance(theta, mm, crit) == pytest.approx(
                brute(theta, crit), rel=1e-12, abs=1e-9
            )


def test_budget_exhaustion_returns_best_point(slope_dataset):
    mm = build_model_matrices(parse_formula("y ~ a + (1+a|subject)"), slope_dataset)
    fit = optimize(mm, "reml", budget=10)
    assert not fit.converged
    assert fit.n_evals == 10
    assert np.isfinite(fit.deviance)


def test_default_budget_formula():
    assert default_budget(1) == 2000
    assert default_budget(16) == 2560
    assert default_budget(72) == 51840


def test_oracle_equivalence_over_seeds():
    for seed in range(5):
        ds = simulate_lmm(one_way_spec(seed))
        oracle = closed_form_one_way(ds.numeric("y"), ds.factor("subject"))
        if oracle.msb <= oracle.msw:
            continue
        fit = fit_formula("y ~ 1 + (1|subject)", ds)
        sigma_b2 = (fit.sigma * fit.theta[0]) ** 2
        assert sigma_b2 == pytest.approx(oracle.sigma_b2, rel=1e-6)
        assert fit.deviance == pytest.approx(oracle.reml_deviance, abs=1e-8)
