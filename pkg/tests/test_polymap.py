import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import exact_components, exact_compose, exact_distance
from gdsmap.errors import DegreeOverflow, DimensionMismatch
from gdsmap.gds import build_gds
from gdsmap.polymap import (
    DiffeoChain,
    ElementaryTransform,
    PolyMap,
    TransformKind,
    apply_chains,
    compose,
    compose_all,
)
from gdsmap.reduction import umbrella_normal_form
from gdsmap.verify import jacobian_finite_difference


def umbrella(n):
    return umbrella_normal_form(n)


# ------------------------------------------------------------------ eval


def test_eval_umbrella_n1():
    # (x0^2, x0 x1, x1) at (2, 3)
    assert umbrella(1).eval([2.0, 3.0]).tolist() == [4.0, 6.0, 3.0]


def test_eval_identity():
    a, b = 0.37, -1.25
    assert PolyMap.identity(2).eval([a, b]).tolist() == [a, b]


def test_eval_gds_vanishes_at_own_center(rng):
    A = rng.uniform(0.5, 2.0, (5, 3))
    p = rng.uniform(-1, 1, (5, 3))
    G = build_gds(p, A)
    for i in range(5):
        assert abs(G.eval(p[i])[i]) <= 1e-14


def test_eval_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        umbrella(1).eval([1.0, 2.0, 3.0])


# ------------------------------------------------------------------ coefficients


def test_coefficient_readout_of_expanded_square():
    # 3 (x0 - 1)^2 + 4 (x1 - 2)^2
    f = build_gds([[1.0, 2.0]], [[3.0, 4.0]], validate=False)
    assert f.coefficient(0, (1, 0)) == -6.0
    assert f.coefficient(0, (0, 0)) == 19.0
    assert f.coefficient(0, (1, 1)) == 0.0


def test_canonical_form_has_no_zero_and_unique_monomials():
    f = PolyMap(2, [[((1, 0), 1.0), ((1, 0), -1.0), ((0, 1), 2.0), ((0, 1), 3.0)]])
    assert f.components[0] == {(0, 1): 5.0}


def test_canonical_form_drops_float_dust():
    f = PolyMap(1, [[((1,), 1.0), ((0,), 1e-13)]])
    assert f.components[0] == {(1,): 1.0}


def test_degree_cap():
    with pytest.raises(DegreeOverflow):
        PolyMap(1, [[((5,), 1.0)]])
    square = PolyMap(1, [[((2,), 1.0)]])
    with pytest.raises(DegreeOverflow):
        compose(square, compose(square, square))


# ------------------------------------------------------------------ compose


def test_compose_identity_outer():
    f = umbrella(2)
    assert compose(PolyMap.identity(f.n_out), f) == f


def test_compose_cancels_exactly():
    outer = PolyMap(2, [[((1, 0), 1.0), ((0, 2), -1.0)]])  # X0 - X1^2
    inner = PolyMap(1, [[((2,), 1.0)], [((1,), 1.0)]])  # (x0^2, x0)
    out = compose(outer, inner)
    assert out.components == ({},)


def test_compose_h5_unit_d_gives_umbrella():
    # n = 1, unit d's: (x0^2, (x1 - x0)^2, x1) -> umbrella
    from gdsmap.reduction import _umbrella_h5

    H5 = _umbrella_h5(np.array([1.0]), np.array([1.0]))
    inner = PolyMap(2, [[((2, 0), 1.0)], [((0, 2), 1.0), ((1, 1), -2.0), ((2, 0), 1.0)], [((0, 1), 1.0)]])
    # hand multiplication: Y1 = -X1/2 + X0/2 + X2^2/2 = -(x1-x0)^2/2 + x0^2/2 + x1^2/2 = x0 x1
    out = compose(H5.forward, inner)
    assert out == umbrella(1)


def test_compose_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        compose(PolyMap.identity(3), PolyMap.identity(2))


def test_compose_matches_exact_oracle(rng):
    for _ in range(20):
        f = _random_map(rng, 3, 2, 2)
        g = _random_map(rng, 2, 3, 2)
        float_result = exact_components(compose(f, g))
        oracle = exact_compose(exact_components(f), exact_components(g), 2)
        assert exact_distance(float_result, oracle) <= 1e-12 * (1 + max(f.max_abs_coefficient(), 1) ** 3)


def _random_map(rng, n_vars, n_out, degree, terms=4):
    comps = []
    for _ in range(n_out):
        comp = []
        for _ in range(terms):
            e = rng.multinomial(int(rng.integers(0, degree + 1)), np.ones(n_vars) / n_vars)
            comp.append((tuple(int(v) for v in e), float(rng.uniform(-2, 2))))
        comps.append(comp)
    return PolyMap(n_vars, comps)


coef = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def polymaps(draw, n_vars, n_out, degree):
    comps = []
    for _ in range(n_out):
        k = draw(st.integers(0, 4))
        comp = []
        for _ in range(k):
            exp = draw(st.lists(st.integers(0, degree), min_size=n_vars, max_size=n_vars).filter(
                lambda e: sum(e) <= degree))
            comp.append((tuple(exp), draw(coef)))
        comps.append(comp)
    return PolyMap(n_vars, comps)


@settings(max_examples=60, deadline=None)
@given(polymaps(2, 2, 2), polymaps(2, 2, 1), polymaps(2, 2, 1))
def test_compose_associative(f, g, h):
    left = compose(compose(f, g), h)
    right = compose(f, compose(g, h))
    scale = 1.0 + max(left.max_abs_coefficient(), right.max_abs_coefficient())
    assert left.coefficient_distance(right) <= 1e-12 * scale


@settings(max_examples=60, deadline=None)
@given(polymaps(3, 2, 2), polymaps(2, 3, 2), st.integers(0, 2**32 - 1))
def test_eval_of_compose_equals_nested_eval(f, g, seed):
    X = np.random.default_rng(seed).uniform(-2, 2, (100, 2))
    lhs = compose(f, g).eval_many(X)
    rhs = f.eval_many(g.eval_many(X))
    assert np.max(np.abs(lhs - rhs), initial=0.0) <= 1e-10 * (1 + np.max(np.abs(rhs), initial=0.0))


def test_compose_all_order():
    a = PolyMap.affine([[2.0]], [1.0])
    b = PolyMap(1, [[((2,), 1.0)]])
    # a o b : x -> 2 x^2 + 1
    assert compose_all([a, b]) == PolyMap(1, [[((2,), 2.0), ((0,), 1.0)]])


# ------------------------------------------------------------------ jacobian


def test_jacobian_rank_on_umbrella():
    # column 0 is (2 x0, x1, ..., xn, 0, ...): rank drops only at the origin
    for n in (1, 2, 3):
        f = umbrella(n)
        assert np.linalg.matrix_rank(f.jacobian(np.zeros(n + 1))) == n
        x = np.r_[0.0, np.linspace(0.3, 1.1, n)]
        assert np.linalg.matrix_rank(f.jacobian(x)) == n + 1
        x[0] = 0.7
        assert np.linalg.matrix_rank(f.jacobian(x)) == n + 1


def test_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        A = rng.uniform(0.5, 2.0, (5, 3)) * rng.choice([-1, 1], (5, 3))
        G = build_gds(rng.uniform(-1, 1, (5, 3)), A)
        x = rng.uniform(-2, 2, 3)
        J = G.jacobian(x)
        fd = jacobian_finite_difference(G, x, 1e-6)
        assert np.max(np.abs(J - fd)) <= 1e-6 * (1 + np.max(np.abs(J)))


def test_derivative_and_linear_part():
    f = PolyMap(2, [[((2, 0), 3.0), ((0, 1), -2.0), ((0, 0), 5.0)]])
    assert f.derivative(0) == PolyMap(2, [[((1, 0), 6.0)]])
    M, v = f.linear_part()
    assert M.tolist() == [[0.0, -2.0]] and v.tolist() == [5.0]


# ------------------------------------------------------------------ transforms


def test_transform_roundtrip_affine(rng):
    M = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    t = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, M, rng.standard_normal(4), "T")
    assert t.roundtrip_coefficient_error() <= 1e-12


def test_affine_transform_degree_guard():
    with pytest.raises(DegreeOverflow):
        ElementaryTransform(TransformKind.SOURCE_AFFINE, umbrella(1).select([0, 2]), PolyMap.identity(2), "bad")


def test_transform_serialization_roundtrip(rng):
    t = ElementaryTransform.translation(TransformKind.SOURCE_AFFINE, rng.standard_normal(3), "h1")
    again = ElementaryTransform.from_dict(json.loads(json.dumps(t.to_dict())))
    assert again == t


def test_polymap_serialization_is_graded_lex():
    f = PolyMap(2, [[((0, 0), 1.0), ((0, 1), 2.0), ((1, 0), 3.0), ((2, 0), 4.0), ((1, 1), 5.0)]])
    exps = [t["exp"] for t in f.to_dict()["components"][0]]
    assert exps == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1]]
    assert PolyMap.from_dict(f.to_dict()) == f


def test_chain_application_order():
    g = PolyMap(1, [[((2,), 1.0)]])
    T = DiffeoChain("target", 1).append(
        ElementaryTransform.translation(TransformKind.TARGET_AFFINE, [1.0], "H"))
    S = DiffeoChain("source", 1).append(
        ElementaryTransform.translation(TransformKind.SOURCE_AFFINE, [2.0], "h"))
    # (x + 2)^2 + 1 regardless of the order of steps
    expected = PolyMap(1, [[((2,), 1.0), ((1,), 4.0), ((0,), 5.0)]])
    assert apply_chains(T, g, S) == expected
    assert apply_chains(T, g, S, ["source", "target"]) == expected
    assert compose(compose(T.compose(), g), S.compose()) == expected
    with pytest.raises(DimensionMismatch):
        apply_chains(T, g, S, ["target"])


def test_chain_rejects_wrong_side():
    t = ElementaryTransform.translation(TransformKind.SOURCE_AFFINE, [1.0], "h")
    with pytest.raises(DimensionMismatch):
        DiffeoChain("target", 1, (t,))
