import numpy as np
import pytest

from parsimix import (
    DesignSpec,
    FactorSpec,
    RandomTruth,
    TruthSpec,
    effective_dimensionality,
    fit_formula,
    from_columns,
    re_pca,
    simulate_lmm,
)


def fit_with_theta(dataset, formula, theta):
    """Fit, then pin theta to inspect the decomposition of a known factor."""
    fit = fit_formula(formula, dataset, budget=20)
    fit.theta = np.asarray(theta, dtype=np.float64)
    return fit


@pytest.fixture(scope="module")
def toy_dataset():
    rng = np.random.default_rng(0)
    n = 60
    return from_columns(
        {
            "y": rng.standard_normal(n),
            "a": ["a1", "a2"] * 30,
            "g": [f"g{i % 10}" for i in range(n)],
        }
    )


def test_diagonal_factor_proportions(toy_dataset):
    # lambda = diag(2, 1): variances (4, 1)
    fit = fit_with_theta(toy_dataset, "y ~ a + (1+a|g)", [2.0, 0.0, 1.0])
    pca = re_pca(fit).by_group["g"]
    assert np.allclose(pca.singular_values, [2.0, 1.0])
    assert np.allclose(pca.proportions, [0.8, 0.2])
    assert np.allclose(pca.cumulative, [0.8, 1.0])
    assert pca.dim == 2


def test_rank_one_factor(toy_dataset):
    # lambda = [[1,0],[1,0]]: covariance [[1,1],[1,1]], eigenvalues (2, 0)
    fit = fit_with_theta(toy_dataset, "y ~ a + (1+a|g)", [1.0, 1.0, 0.0])
    pca = re_pca(fit).by_group["g"]
    assert np.allclose(pca.proportions, [1.0, 0.0], atol=1e-12)
    assert pca.dim == 1


def test_identity_factor_equal_shares(toy_dataset):
    fit = fit_with_theta(toy_dataset, "y ~ a + (1+a|g)", [1.0, 0.0, 1.0])
    pca = re_pca(fit).by_group["g"]
    assert np.allclose(pca.proportions, [0.5, 0.5])
    assert pca.dim == 2


def test_all_zero_factor(toy_dataset):
    fit = fit_with_theta(toy_dataset, "y ~ a + (1+a|g)", [0.0, 0.0, 0.0])
    pca = re_pca(fit).by_group["g"]
    assert np.all(pca.proportions == 0.0)
    assert pca.dim == 0


def test_blocks_sharing_a_factor_are_assembled(toy_dataset):
    fit = fit_with_theta(toy_dataset, "y ~ a + (1+a||g)", [2.0, 1.0])
    pca = re_pca(fit).by_group["g"]
    assert len(pca.singular_values) == 2
    assert np.allclose(pca.proportions, [0.8, 0.2])


def test_effective_dimensionality_table_rows():
    subject_row = [0.73, 0.85, 0.94, 1.00, 1.00, 1.00, 1.00, 1.00]
    item_row = [0.79, 0.94, 0.97, 0.99, 1.00, 1.00, 1.00, 1.00]
    assert effective_dimensionality(np.array(subject_row)) == 4
    assert effective_dimensionality(np.array(item_row)) == 5
    assert effective_dimensionality(np.array([1.0])) == 1
    assert effective_dimensionality(np.array([0.5, 0.9])) == 0  # never reaches 1


def test_dimensionality_matches_rank_and_singularity(slope_dataset):
    fit = fit_formula("y ~ a + (1+a|subject)", slope_dataset)
    pca = re_pca(fit)
    for group, fp in pca.by_group.items():
        lam = fit.factor_lambda(group)
        svals = np.linalg.svd(lam, compute_uv=False)
        numeric_rank = int(np.sum(svals >= 1e-4 * max(svals[0], 1e-300)))
        assert fp.dim == numeric_rank
    assert not fit.singular  # truth has full-rank covariance here


def test_scale_invariance_of_proportions(slope_dataset):
    ds = slope_dataset
    fit1 = fit_formula("y ~ a + (1+a|subject)", ds)
    scaled = from_columns(
        {"y": 5.0 * ds.numeric("y"), "subject": ds.factor("subject"),
         "a": ds.factor("a")}
    )
    fit2 = fit_formula("y ~ a + (1+a|subject)", scaled)
    p1 = re_pca(fit1).by_group["subject"].proportions
    p2 = re_pca(fit2).by_group["subject"].proportions
    assert np.allclose(p1, p2, atol=1e-6)


def test_rank_deficient_truth_detected_most_of_the_time():
    hits = 0
    reps = 20
    for seed in range(reps):
        spec = TruthSpec(
            design=DesignSpec(n_subjects=100, reps=10,
                              factors=(FactorSpec("a", ("a1", "a2")),)),
            beta={"(Intercept)": 1.0},
            ranef={"subject": RandomTruth(
                ("(Intercept)", "a[a1]"),
                64.0 * np.array([[1.0, 1.0], [1.0, 1.0]]),  # slope == intercept
            )},
            sigma=1.0,
            seed=seed,
        )
        ds = simulate_lmm(spec)
        fit = fit_formula("y ~ a + (1+a|subject)", ds)
        if re_pca(fit).by_group["subject"].dim <= 1:
            hits += 1
    assert hits >= int(0.9 * reps)


def test_no_random_effects_is_an_error():
    rng = np.random.default_rng(1)
    ds = from_columns({"y": rng.standard_normal(10), "x": rng.standard_normal(10)})
    fit = fit_formula("y ~ x", ds)
    with pytest.raises(ValueError, match="no random effects"):
        re_pca(fit)
