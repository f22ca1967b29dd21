import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parsimix import (
    Formula,
    FormulaError,
    RandomTerm,
    Term,
    format_formula,
    parse_formula,
    zcp_transform,
)
from parsimix.formula import INTERCEPT


def terms(f):
    return [str(t) for t in f.fixed]


def test_intercept_and_main_effect_with_random_intercept():
    f = parse_formula("Y ~ 1 + A + (1|Subject)")
    assert f.response == "Y"
    assert terms(f) == ["1", "A"]
    assert len(f.random) == 1
    rt = f.random[0]
    assert rt.group == "Subject"
    assert rt.correlated is True
    assert [str(t) for t in rt.terms] == ["1"]


def test_random_slope_term():
    f = parse_formula("Y ~ 1 + A + (1+A|Subject)")
    rt = f.random[0]
    assert [str(t) for t in rt.terms] == ["1", "A"]
    assert rt.correlated is True


def test_double_bar_marks_uncorrelated():
    f = parse_formula("Y ~ 1 + A + (1+A||Subject)")
    assert f.random[0].correlated is False


def test_star_expansion():
    f = parse_formula("y ~ A*B")
    assert terms(f) == ["1", "A", "B", "A:B"]


def test_three_way_star_expansion():
    f = parse_formula("y ~ S*P*C")
    assert set(terms(f)) == {"1", "S", "P", "C", "S:P", "S:C", "P:C", "S:P:C"}
    assert len(terms(f)) == 8


def test_implicit_intercept_and_suppression():
    assert parse_formula("y ~ A").has_intercept
    assert not parse_formula("y ~ 0 + A").has_intercept
    assert parse_formula("y ~ A + (B|g)").random[0].has_intercept
    assert not parse_formula("y ~ A + (0 + B|g)").random[0].has_intercept


def test_format_canonical():
    f = parse_formula("y~1+A+(1|S)")
    assert format_formula(f) == "y ~ 1 + A + (1 | S)"
    z = zcp_transform(parse_formula("y ~ 1 + A + (1 + A | S)"))
    assert "||" in format_formula(z)
    assert str(Term(("S", "P"))) == "S:P"


def test_zcp_transform_flags_only():
    f = parse_formula("y ~ A + (1+A|s) + (1|g)")
    z = zcp_transform(f)
    assert all(not rt.correlated for rt in z.random)
    assert z.fixed == f.fixed
    assert [rt.terms for rt in z.random] == [rt.terms for rt in f.random]
    assert zcp_transform(z) == z


def test_duplicate_fixed_terms_dedupe():
    assert terms(parse_formula("y ~ A + A + B")) == ["1", "A", "B"]


def test_errors_carry_positions():
    cases = [
        ("y ~ (1 + A g)", "expected '|'"),
        ("y ~ x + + z", "expected a column name"),
        ("y ~ (|g)", "expected a column name"),
        ("y ~ (1|g", "expected ')'"),
        ("y ~ (1|)", "grouping factor"),
        ("y ~~ x", "exactly one '~'"),
        ("y ~ x $ z", "unexpected character"),
        ("y ~ A + (1|g) + (1|g)", "duplicate random term"),
        ("y ~ A + (0|g)", "no components"),
    ]
    for text, fragment in cases:
        with pytest.raises(FormulaError) as err:
            parse_formula(text)
        assert fragment in str(err.value)
        assert err.value.position >= 0
        assert "^" in err.value.pointer()


def test_variable_names():
    f = parse_formula("rt ~ a*b + (1 + a | subj) + (1 | item)")
    assert f.variable_names() == ["rt", "a", "b", "subj", "item"]


# ---------------------------------------------------------------------------
# Round-trip property
# ---------------------------------------------------------------------------

_names = st.sampled_from(["a", "b", "c", "d2", "x_1", "Subject", "item.id"])


@st.composite
def _term(draw):
    n = draw(st.integers(1, 3))
    factors = draw(
        st.lists(_names, min_size=n, max_size=n, unique=True)
    )
    return Term(tuple(factors))


@st.composite
def _term_list(draw):
    with_intercept = draw(st.booleans())
    others = draw(st.lists(_term(), min_size=0 if with_intercept else 1,
                           max_size=4, unique=True))
    out = ([INTERCEPT] if with_intercept else []) + others
    return tuple(out)


@st.composite
def formulas(draw):
    response = draw(st.sampled_from(["y", "rt", "score"]))
    fixed = draw(_term_list())
    n_random = draw(st.integers(0, 3))
    groups = draw(
        st.lists(
            st.sampled_from(["g1", "g2", "g3"]),
            min_size=n_random,
            max_size=n_random,
            unique=True,
        )
    )
    random = tuple(
        RandomTerm(draw(_term_list()), group, draw(st.booleans()))
        for group in groups
    )
    return Formula(response=response, fixed=fixed, random=random)


@settings(max_examples=300, deadline=None)
@given(formulas())
def test_parse_format_round_trip(f):
    assert parse_formula(format_formula(f)) == f
