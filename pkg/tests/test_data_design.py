import numpy as np
import pytest

from parsimix import (
    ContrastScheme,
    DataError,
    DesignError,
    build_model_matrices,
    contrast_columns,
    from_columns,
    ingest_csv,
    parse_formula,
)
from parsimix.data import factor_from_strings


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_ingest_basic(tmp_path):
    path = write(tmp_path, "Y,A\n1.5,a1\n2.5,a2\n")
    ds = ingest_csv(path)
    assert ds.n_rows == 2
    assert not ds.is_factor("Y")
    assert ds.factor("A").levels == ("a1", "a2")


def test_ingest_drops_missing_rows(tmp_path):
    path = write(tmp_path, "Y,A\n1.0,a1\n,a2\n2.0,NA\n3.0,a2\n")
    ds = ingest_csv(path)
    assert ds.n_rows == 2
    assert ds.n_dropped == 2


def test_ingest_factor_override_on_numeric_ids(tmp_path):
    path = write(tmp_path, "Y,Subject\n1.0,101\n2.0,102\n")
    ds = ingest_csv(path, factors=("Subject",))
    assert ds.is_factor("Subject")
    assert ds.factor("Subject").levels == ("101", "102")


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError, match="empty file"):
        ingest_csv(write(tmp_path, "", "empty.csv"))
    with pytest.raises(DataError, match="expected 2 fields"):
        ingest_csv(write(tmp_path, "Y,A\n1.0,a1,extra\n", "ragged.csv"))
    with pytest.raises(DataError, match="unknown column"):
        ingest_csv(write(tmp_path, "Y,A\n1.0,a1\n", "f.csv"), factors=("B",))


def test_factor_level_order_is_first_appearance():
    f = factor_from_strings(["b", "a", "b", "c"])
    assert f.levels == ("b", "a", "c")
    assert f.codes.tolist() == [0, 1, 0, 2]


def test_treatment_contrasts_two_level():
    f = factor_from_strings(["x", "y", "x"])
    cols, labels = contrast_columns(f, "treatment", "A")
    assert cols[:, 0].tolist() == [0.0, 1.0, 0.0]
    assert labels == ["A[y]"]


def test_sum_contrasts_two_level():
    f = factor_from_strings(["x", "y", "x"])
    cols, labels = contrast_columns(f, "sum", "A")
    assert cols[:, 0].tolist() == [1.0, -1.0, 1.0]
    assert labels == ["A[x]"]


def test_sum_contrasts_three_level_last_row():
    f = factor_from_strings(["l1", "l2", "l3"])
    cols, _ = contrast_columns(f, "sum", "A")
    assert cols.shape == (3, 2)
    assert cols[2].tolist() == [-1.0, -1.0]
    assert cols[0].tolist() == [1.0, 0.0]
    assert cols[1].tolist() == [0.0, 1.0]


def test_single_level_factor_rejected():
    f = factor_from_strings(["only", "only"])
    with pytest.raises(DesignError, match="single level"):
        contrast_columns(f, "sum", "A")


def _crossed_data(n_subj=56, n_item=4, rng=None):
    rng = rng or np.random.default_rng(0)
    rows = n_subj * n_item
    subj = [f"s{i:02d}" for i in range(n_subj) for _ in range(n_item)]
    a = (["a1", "a2"] * (rows // 2 + 1))[:rows]
    return from_columns(
        {"y": rng.standard_normal(rows), "subject": subj, "A": a}
    )


def test_vector_valued_block_dimensions():
    ds = _crossed_data()
    mm = build_model_matrices(parse_formula("y ~ 1 + A + (1+A|subject)"), ds)
    block = mm.blocks[0]
    assert block.dim == 2
    assert block.n_levels == 56
    assert block.n_columns == 112
    assert mm.q == 112


def test_intercept_only_block():
    ds = _crossed_data()
    mm = build_model_matrices(parse_formula("y ~ 1 + (1|subject)"), ds)
    assert mm.blocks[0].dim == 1
    assert mm.blocks[0].values.shape[1] == 1


def test_full_factorial_fixed_has_eight_columns():
    rng = np.random.default_rng(1)
    n = 64
    ds = from_columns(
        {
            "y": rng.standard_normal(n),
            "S": (["s1"] * 4 + ["s2"] * 4) * 8,
            "P": (["p1", "p1", "p2", "p2"] * 16),
            "C": (["c1", "c2"] * 32),
        }
    )
    mm = build_model_matrices(parse_formula("y ~ S*P*C"), ds)
    assert mm.p == 8


def test_zcp_expansion_splits_after_contrast_coding():
    rng = np.random.default_rng(2)
    n = 90
    ds = from_columns(
        {
            "y": rng.standard_normal(n),
            "g": [f"g{i}" for i in range(15) for _ in range(6)],
            "A": ["l1", "l2", "l3"] * 30,
        }
    )
    mm = build_model_matrices(parse_formula("y ~ A + (1+A||g)"), ds)
    # intercept + two contrast columns, each its own independent block
    assert len(mm.blocks) == 3
    assert all(b.dim == 1 for b in mm.blocks)
    assert mm.n_theta == 3
    corr = build_model_matrices(parse_formula("y ~ A + (1+A|g)"), ds)
    assert len(corr.blocks) == 1
    assert corr.blocks[0].dim == 3
    assert corr.n_theta == 6


def test_rank_deficient_x_rejected():
    ds = from_columns(
        {
            "y": np.arange(8.0),
            "A": ["a1", "a2"] * 4,
            "B": ["a1", "a2"] * 4,  # duplicate of A
            "g": ["g1", "g2", "g3", "g4"] * 2,
        }
    )
    with pytest.raises(DesignError, match="rank deficient"):
        build_model_matrices(parse_formula("y ~ A + B + (1|g)"), ds)


def test_unresolved_names_and_bad_group():
    ds = _crossed_data()
    with pytest.raises(DesignError, match="unknown column"):
        build_model_matrices(parse_formula("y ~ nope + (1|subject)"), ds)
    with pytest.raises(DesignError, match="must be a factor"):
        build_model_matrices(parse_formula("y ~ A + (1|y)"), ds)
    with pytest.raises(DataError, match="is a factor"):
        build_model_matrices(parse_formula("A ~ 1 + (1|subject)"), ds)


def test_column_count_identity():
    ds = _crossed_data()
    mm = build_model_matrices(parse_formula("y ~ A + (1 + A | subject)"), ds)
    assert mm.p == 1 + 1  # intercept + one contrast column
    assert mm.q == sum(b.dim * b.n_levels for b in mm.blocks)
