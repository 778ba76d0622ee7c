import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    exact_components,
    exact_compose,
    exact_distance,
    random_deficient_instance,
    random_fullrank_instance,
    random_matrix,
)
from gdsmap.errors import BadSet, ConditioningWarning, RankMismatch, WrongBranch
from gdsmap.gds import ProblemInstance, distance_squared_matrix, lorentzian_matrix
from gdsmap.polymap import PolyMap, compose
from gdsmap.reduction import (
    BADSET,
    INCLUSION,
    UMBRELLA,
    _umbrella_h5,
    _umbrella_h5_factors,
    badset_certificate,
    classify,
    fullrank_certificate,
    inclusion_normal_form,
    linear_part,
    reduce_full_rank,
    reduce_to_inclusion,
    solve_alpha,
    solve_gamma,
    solve_lambda,
    umbrella_normal_form,
)
from gdsmap.verify import SampleSpec, check_roundtrip, find_singular_point, min_relative_singular_value


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


def centers_with_affine_b(A, q, target):
    """Centers whose first block is ``q`` and whose affine-row ``b`` equals ``target``.

    ``b_ij = beta_ij - 2 a_ij p_ij`` for affine rows, where ``beta`` depends on
    ``q`` only, so each affine center entry is fixed by one division.
    """
    A = np.asarray(A, dtype=float)
    n1 = A.shape[1]
    _, L2 = solve_lambda(A)
    beta = -2.0 * L2.T @ (A[:n1] * q)
    return np.vstack([q, (beta - target) / (2.0 * A[n1:])])


def umbrella_instance():
    return np.array([[1.0, 1.0], [1.0, 2.0], [2.0, 1.0]])


# ------------------------------------------------------------------ STEP 1


def test_solve_lambda_example():
    A = np.array([[1.0, 1.0], [1.0, 2.0], [1.0, 1.0]])
    L1, L2 = solve_lambda(A)
    # multiply back: A1^T L1 = E, A1^T L2 = -A2^T
    assert np.allclose(A[:2].T @ L1, np.eye(2), atol=1e-15)
    assert np.allclose(L1, [[2.0, -1.0], [-1.0, 1.0]], atol=1e-15)
    assert np.allclose(L2, [[-1.0], [0.0]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_solve_lambda_residuals(n, seed):
    A = random_matrix(np.random.default_rng(seed), 2 * n + 1, n + 1)
    L1, L2 = solve_lambda(A)
    scale = np.linalg.norm(A)
    assert np.linalg.norm(A[: n + 1].T @ L1 - np.eye(n + 1)) <= 1e-10 * scale * np.linalg.cond(A[: n + 1])
    assert np.linalg.norm(A[: n + 1].T @ L2 + A[n + 1:].T) <= 1e-10 * scale * np.linalg.cond(A[: n + 1])


def test_linear_part_zero_centers(rng):
    for n in (1, 2, 3):
        A = random_matrix(rng, 2 * n + 1, n + 1)
        inst = ProblemInstance(A, np.zeros(A.shape))
        b, c = linear_part(inst, *solve_lambda(A))
        assert np.all(b == 0.0) and np.all(c == 0.0)


def test_step1_quadratic_structure(rng):
    from gdsmap.reduction import _h1_fullrank

    for n in (1, 2, 3):
        inst = random_fullrank_instance(rng, n)
        L1, L2 = solve_lambda(inst.A)
        phi1 = compose(_h1_fullrank(inst.A, L1, L2).forward, inst.gds())
        for i in range(2 * n + 1):
            quad = {e: c for e, c in phi1.components[i].items() if sum(e) == 2}
            if i <= n:
                e = tuple(2 * int(j == i) for j in range(n + 1))
                assert quad.keys() == {e} and abs(quad[e] - 1.0) <= 1e-12
            else:
                assert quad == {}


# ------------------------------------------------------------------ certificate


def test_certificate_one_by_one_determinants():
    b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    cert = fullrank_certificate(b)
    assert cert.entry("det B_0").det == pytest.approx(7.0, rel=1e-15)
    assert cert.entry("det B_1").det == pytest.approx(5.0, rel=1e-15)
    assert cert.outside


def test_constructed_badset_full_rank(rng):
    A = umbrella_instance()
    q = rng.uniform(-1, 1, (2, 2))
    p = centers_with_affine_b(A, q, np.array([[0.8, 0.0]]))
    inst = ProblemInstance(A, p)
    cert = quiet(badset_certificate, inst, "fullrank")
    assert not cert.outside
    assert abs(cert.entry("det B_0").det) <= 1e-15
    with pytest.raises(BadSet) as err:
        quiet(reduce_full_rank, inst)
    assert err.value.failing == ["det B_0"]
    assert classify(inst).kind == BADSET


@pytest.mark.parametrize("n", [2, 3])
def test_constructed_badset_labels(rng, n):
    A = random_matrix(rng, 2 * n + 1, n + 1)
    for j in range(n + 1):
        target = rng.uniform(0.5, 1.5, (n, n + 1))
        target[0] = 0.0
        target[0, j] = 1.0  # the first affine row has no entries outside column j
        p = centers_with_affine_b(A, rng.uniform(-1, 1, (n + 1, n + 1)), target)
        with pytest.raises(BadSet) as err:
            quiet(reduce_full_rank, ProblemInstance(A, p))
        assert err.value.failing == [f"det B_{j}"]


def test_conditioning_band_warns(rng):
    n = 2
    A = random_matrix(rng, 5, 3)
    target = rng.uniform(0.5, 1.5, (n, n + 1))
    target[0, 1:] = target[1, 1:]
    target[0, 2] += 3e-9 * target[1, 2]  # B_0 rows nearly parallel
    p = centers_with_affine_b(A, rng.uniform(-1, 1, (3, 3)), target)
    with pytest.warns(ConditioningWarning):
        cert = badset_certificate(ProblemInstance(A, p), "fullrank")
    e = cert.entry("det B_0")
    assert e.warning and e.outside == (abs(e.det) > 1e-9 * e.scale)


def test_constructed_badset_deficient(rng):
    # all-ones, n = 1: b_i0 = -2 (p_i0 - p_00) for the affine rows
    A = distance_squared_matrix(1, 2)
    p = rng.uniform(-1, 1, (3, 2))
    p[1, 0] = p[2, 0] = p[0, 0]
    inst = ProblemInstance(A, p)
    with pytest.raises(BadSet) as err:
        quiet(reduce_to_inclusion, inst)
    assert err.value.failing == ["det B"]
    cls = quiet(classify, inst)
    assert cls.kind == BADSET and not cls.certificate.entry("det B").outside


def test_random_centers_rarely_bad(rng):
    A = random_matrix(rng, 5, 3)
    verdicts = [quiet(badset_certificate, ProblemInstance(A, rng.uniform(-1, 1, A.shape)), "fullrank").outside
                for _ in range(1000)]
    assert np.mean(verdicts) >= 0.99


# ------------------------------------------------------------------ STEP 3


def test_solve_gamma_example():
    b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    gs = solve_gamma(b)
    assert gs.gamma[0, 0] == pytest.approx(-2.0 / 7.0, abs=1e-15)
    assert gs.d_diag[0] == pytest.approx(-3.0 / 7.0, abs=1e-15)
    # 1x1 solve for j = 1: 5 gamma = -3, d_11 = 4 + 7 gamma
    assert gs.gamma[0, 1] == pytest.approx(-3.0 / 5.0, abs=1e-15)
    assert gs.d_diag[1] == pytest.approx(4.0 - 21.0 / 5.0, abs=1e-15)
    # empty kernel problem: gamma = 1, d copies b
    assert gs.gamma[0, 2] == 1.0
    assert gs.d0.tolist() == [5.0] and gs.d1.tolist() == [7.0]


def test_solve_gamma_zero_quadratic_row():
    b = np.array([[0.0, 0.0], [3.0, 4.0], [5.0, 7.0]])
    gs = solve_gamma(b)
    assert gs.gamma[0, 0] == 0.0 and gs.d_diag[0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_solve_gamma_equations(n, seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(-2, 2, (2 * n + 1, n + 1))
    gs = solve_gamma(b)
    Bfull = b[n + 1:]
    for j in range(n + 1):
        lhs = np.delete(Bfull, j, axis=1).T @ gs.gamma[:, j]
        assert np.allclose(lhs, -np.delete(b[j], j), atol=1e-9 * (1 + np.abs(gs.gamma[:, j]).max()))
        assert gs.d_diag[j] == pytest.approx(b[j, j] + gs.gamma[:, j] @ Bfull[:, j], abs=1e-9)
    for l in range(1, n + 1):
        g = gs.gamma[:, n + l]
        assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-14)
        assert gs.d0[l - 1] > 0
        # g annihilates the columns 1..n except l
        others = [c for c in range(1, n + 1) if c != l]
        assert np.all(np.abs(g @ Bfull[:, others]) <= 1e-9 * np.linalg.norm(Bfull))


# ------------------------------------------------------------------ full-rank reduction


def _replay_exact(result):
    """Brute-force rational replay of the stored chain in application order."""
    n1 = result.instance.n + 1
    f = exact_components(result.instance.gds())
    targets = iter(result.target.transforms)
    sources = iter(result.source.transforms)
    for side in result.order:
        if side == "target":
            f = exact_compose(exact_components(next(targets).forward), f, n1)
        else:
            t = next(sources)
            f = exact_compose(f, exact_components(t.forward), n1)
    return f


def test_reduce_full_rank_n1_exact_oracle(rng):
    A = umbrella_instance()
    for _ in range(5):
        inst = random_fullrank_instance_with(A, rng)
        res = reduce_full_rank(inst)
        assert res.kind == UMBRELLA and res.residual <= 1e-9
        oracle = _replay_exact(res)
        nf = exact_components(umbrella_normal_form(1))
        assert exact_distance(oracle, nf) <= 1e-9 * inst.gds().max_abs_coefficient()


def random_fullrank_instance_with(A, rng):
    while True:
        inst = ProblemInstance(A, rng.uniform(-1, 1, A.shape))
        if quiet(badset_certificate, inst, "fullrank").outside:
            return inst


def test_reduce_full_rank_trace_and_snapshots(rng):
    for n in (1, 2, 3):
        res = quiet(reduce_full_rank, random_fullrank_instance(rng, n))
        t = res.trace
        for key in ("Lambda1", "Lambda2", "b", "c", "Gamma", "d_diag", "d_affine_0", "d_affine_j", "d_tilde"):
            assert key in t
        assert all(abs(v) > 0 for v in t["d_affine_0"] + t["d_affine_j"])
        assert res.target.labels[-6:] == ["H1", "H2", "H3", "H4", "S5", "H5"]
        assert res.source.labels[-2:] == ["h1", "h2"]
        # each snapshot is the composition of the transforms applied so far
        G = res.instance.gds()
        f = G if not res.pivot.row_permutation_required else None
        snaps = t["snapshots"]
        f = PolyMap.from_dict(snaps["phi0"])
        steps = [x for x in zip(res.order, _labels_in_order(res)) if x[1] not in ("P", "sigma")]
        transforms = {tr.label: tr for tr in res.transforms}
        for s, (side, label) in enumerate(steps, start=1):
            tr = transforms[label]
            f = compose(tr.forward, f) if side == "target" else compose(f, tr.forward)
            snap = PolyMap.from_dict(snaps[f"phi{s}"])
            assert f.coefficient_distance(snap) <= 1e-10 * (1 + snap.max_abs_coefficient())


def test_umbrella_shear_factors(rng):
    for n in (1, 2, 3):
        d0 = rng.uniform(0.5, 2.0, n)
        d1 = rng.uniform(1e-4, 2.0, n) * rng.choice([-1, 1], n)
        S5, H5 = _umbrella_h5_factors(d0, d1)
        single = _umbrella_h5(d0, d1)
        both = compose(H5.forward, S5.forward)
        assert both.coefficient_distance(single.forward) <= 1e-12 * (1 + single.forward.max_abs_coefficient())
        # each factor is far better conditioned than the product for small d1
        for t in (S5, H5):
            assert check_roundtrip(t).max_error <= 1e-10


def _labels_in_order(res):
    it = {"target": iter(res.target.labels), "source": iter(res.source.labels)}
    return [next(it[side]) for side in res.order]


def test_reduce_full_rank_zero_d_diag(rng):
    # first block of centers at the origin: all quadratic-row b vanish, d_jj = 0
    A = umbrella_instance()
    p = np.zeros((3, 2))
    p[2] = [0.4, -0.7]
    res = reduce_full_rank(ProblemInstance(A, p))
    assert res.trace["d_diag"] == [0.0, 0.0]
    assert res.residual <= 1e-9


def test_reduce_full_rank_with_row_permutation(rng):
    A = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 2.0]])
    res = reduce_full_rank(random_fullrank_instance_with(A, rng))
    assert res.pivot.row_permutation_required and res.target.labels[0] == "P"
    assert res.residual <= 1e-9


def test_reduced_umbrella_is_singular_at_some_point(rng):
    for n in (1, 2, 3):
        res = quiet(reduce_full_rank, random_fullrank_instance(rng, n))
        sp = find_singular_point(res.reduced_map(), SampleSpec(seed=n))
        assert sp.found and sp.sigma_min <= 1e-8 * sp.sigma_max


def test_wrong_branch_and_rank_mismatch(rng):
    inst = ProblemInstance(umbrella_instance(), rng.uniform(-1, 1, (3, 2)))
    with pytest.raises(WrongBranch):
        reduce_to_inclusion(inst)
    with pytest.raises(RankMismatch):
        reduce_full_rank(ProblemInstance(np.ones((3, 2)), rng.uniform(-1, 1, (3, 2))))


# ------------------------------------------------------------------ deficient branch


def test_solve_alpha_examples():
    assert np.allclose(solve_alpha(np.ones((3, 2)), 1), [[-1.0, -1.0]])
    assert np.allclose(solve_alpha(lorentzian_matrix(1, 2), 1), [[-1.0, -1.0]])
    A = np.array([[1.0, 3.0], [2.0, 6.0], [-1.5, -4.5]])
    assert np.allclose(solve_alpha(A, 1), [[-2.0, 1.5]])


@pytest.mark.parametrize("helper", [distance_squared_matrix, lorentzian_matrix])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_special_matrices_reduce_to_inclusion(rng, helper, n):
    A = helper(n, 2 * n)
    inst = ProblemInstance(A, rng.uniform(-1, 1, A.shape))
    cls = quiet(classify, inst)
    assert cls.kind == INCLUSION
    assert cls.result.residual <= 1e-9
    assert cls.result.reduced_map().coefficient_distance(inclusion_normal_form(n, 2 * n)) <= 1e-9 * (
        inst.gds().max_abs_coefficient())


@pytest.mark.parametrize("n,k", [(1, 3), (1, 4), (2, 5), (2, 6)])
def test_surplus_rows_reduce_to_inclusion(rng, n, k):
    # k > 2n with a full-rank A is the inclusion branch as well
    A = random_matrix(rng, k + 1, n + 1)
    inst = ProblemInstance(A, rng.uniform(-1, 1, A.shape))
    res = quiet(reduce_to_inclusion, inst)
    assert res.kind == INCLUSION and res.residual <= 1e-9
    assert len(res.trace["surplus_coefficients"]) == k - 2 * n - 1  # k - n affine rows, n + 1 form B


@pytest.mark.parametrize("n", [1, 2, 3])
def test_inclusion_every_rank(rng, n):
    for r in range(1, n + 1):
        res = quiet(reduce_to_inclusion, random_deficient_instance(rng, n, 2 * n, r))
        assert res.trace["rank"] == r and res.residual <= 1e-9
        assert min_relative_singular_value(res.reduced_map(), SampleSpec(count=200)) > 1e-8


def test_classify_dispatch(rng):
    assert quiet(classify, random_fullrank_instance(rng, 2)).kind == UMBRELLA
    assert quiet(classify, random_deficient_instance(rng, 2, 4, 2)).kind == INCLUSION


def test_result_serializes(rng):
    import json

    res = quiet(reduce_full_rank, random_fullrank_instance(rng, 2))
    data = json.loads(json.dumps(res.to_dict()))
    assert data["kind"] == UMBRELLA and data["order"] == list(res.order)
    assert "snapshots" not in res.to_dict(snapshots=False)["trace"]


def test_exact_oracle_sanity():
    # the oracle itself: (x + 1)^2 expanded exactly
    sq = [{(2,): Fraction(1)}]
    inner = [{(1,): Fraction(1), (0,): Fraction(1)}]
    assert exact_compose(sq, inner, 1) == [{(2,): 1, (1,): 2, (0,): 1}]
