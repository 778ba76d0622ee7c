"""Shared generators and independent oracles for the test-suite."""

from __future__ import annotations

import warnings
from fractions import Fraction

import numpy as np
import pytest

from gdsmap.gds import ProblemInstance
from gdsmap.reduction import badset_certificate


def random_matrix(rng, rows, cols):
    """Entries uniform in +-[0.5, 2]."""
    return rng.uniform(0.5, 2.0, (rows, cols)) * rng.choice([-1.0, 1.0], (rows, cols))


def random_centers(rng, shape):
    return rng.uniform(-1.0, 1.0, shape)


def random_fullrank_instance(rng, n):
    """Full-rank ``k = 2n`` instance outside the bad set (rejects resampled)."""
    while True:
        A = random_matrix(rng, 2 * n + 1, n + 1)
        inst = ProblemInstance(A, random_centers(rng, A.shape))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if badset_certificate(inst, "fullrank").outside:
                return inst


def random_deficient_matrix(rng, n, k, rank):
    """``(k+1) x (n+1)`` matrix of rank ``rank`` with all entries away from zero."""
    while True:
        M = rng.standard_normal((k + 1, rank)) @ rng.standard_normal((rank, n + 1))
        if np.min(np.abs(M)) > 0.05 and np.linalg.matrix_rank(M) == rank:
            return M


def random_deficient_instance(rng, n, k, rank):
    while True:
        A = random_deficient_matrix(rng, n, k, rank)
        inst = ProblemInstance(A, random_centers(rng, A.shape))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if badset_certificate(inst, "deficient").outside:
                return inst


def random_qc(rng, n):
    """Well-conditioned ``A1``, first-block centers ``q`` and a perturbation ``c``."""
    while True:
        A1 = random_matrix(rng, n + 1, n + 1)
        s = np.linalg.svd(A1, compute_uv=False)
        if s[-1] > 0.05 * s[0]:
            break
    q = random_centers(rng, (n + 1, n + 1))
    c = random_matrix(rng, n, n + 1)
    return A1, q, c


# ------------------------------------------------- exact composition oracle


def exact_components(pm):
    """PolyMap components as dicts with exact rational coefficients."""
    return [{e: Fraction(c) for e, c in comp.items()} for comp in pm.components]


def _exact_mul(p, q):
    out = {}
    for e1, c1 in p.items():
        for e2, c2 in q.items():
            e = tuple(a + b for a, b in zip(e1, e2))
            out[e] = out.get(e, 0) + c1 * c2
    return out


def exact_compose(outer, inner, n_vars):
    """Brute-force expansion of ``outer o inner`` by repeated multiplication."""
    one = {(0,) * n_vars: Fraction(1)}
    out = []
    for poly in outer:
        acc = {}
        for e, c in poly.items():
            term = one
            for var, power in enumerate(e):
                for _ in range(power):
                    term = _exact_mul(term, inner[var])
            for ee, cc in term.items():
                acc[ee] = acc.get(ee, 0) + c * cc
        out.append(acc)
    return out


def exact_distance(f, g):
    return max(
        (abs(float(a.get(e, 0) - b.get(e, 0))) for a, b in zip(f, g) for e in set(a) | set(b)),
        default=0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
