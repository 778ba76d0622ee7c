"""Generalized distance-squared mappings and their coefficient matrices.

``G_(p,A)(x)_i = sum_j a_ij (x_j - p_ij)^2`` for ``0 <= i <= k``, with ``A``
a ``(k+1) x (n+1)`` matrix of non-zero entries and ``p_i`` points of
``R^(n+1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidInstance, RankMismatch
from .polymap import ElementaryTransform, PolyMap, TransformKind

EPS_RANK = 1e-10
ZERO_ENTRY_REL = 1e-12

MATRIX_HELPERS = ("distance-squared", "lorentzian")


def distance_squared_matrix(n: int, k: int) -> np.ndarray:
    """All-ones matrix: the plain distance-squared mapping."""
    return np.ones((k + 1, n + 1))


def lorentzian_matrix(n: int, k: int) -> np.ndarray:
    """``a_i0 = -1`` and ``a_ij = 1`` for ``j != 0``."""
    A = np.ones((k + 1, n + 1))
    A[:, 0] = -1.0
    return A


def singular_values(M) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros(0)
    return np.linalg.svd(M, compute_uv=False)


def numerical_rank(M, eps: float = EPS_RANK) -> int:
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > eps * s[0]))


def validate_matrix(A, reduction: bool = False) -> list:
    """Report hypothesis violations of ``A``; an empty list means ok.

    With ``reduction=True`` the dimension requirement ``k >= 2n`` of the
    reduction pipelines is checked as well.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] < 2 or A.shape[1] < 2:
        return [f"matrix must be (k+1)x(n+1) with k, n >= 1, got shape {A.shape}"]
    violations = []
    if not np.all(np.isfinite(A)):
        violations.append("non-finite entries")
        return violations
    big = np.max(np.abs(A))
    for i, j in zip(*np.nonzero(np.abs(A) <= ZERO_ENTRY_REL * big)):
        violations.append(f"zero entry at ({i}, {j})")
    k, n = A.shape[0] - 1, A.shape[1] - 1
    if reduction and k < 2 * n:
        violations.append(f"k < 2n: k={k}, n={n} (reduction needs k >= {2 * n})")
    return violations


def build_gds(p, A, validate: bool = True) -> PolyMap:
    """Expand ``G_(p,A)`` into canonical sparse form.

    ``validate=False`` skips the non-zero-entry check (used when certifying
    candidate matrices that may violate it).
    """
    A = np.asarray(A, dtype=float)
    p = np.asarray(p, dtype=float)
    if A.ndim != 2 or p.shape != A.shape:
        raise DimensionMismatch(f"centers shape {p.shape} does not match matrix shape {A.shape}")
    bad = validate_matrix(A) if validate else []
    if bad:
        raise InvalidInstance("; ".join(bad), bad)
    n1 = A.shape[1]
    units = [tuple(int(i == j) for i in range(n1)) for j in range(n1)]
    squares = [tuple(2 * int(i == j) for i in range(n1)) for j in range(n1)]
    zero = (0,) * n1
    comps = []
    for a, c in zip(A, p):
        terms = [(squares[j], a[j]) for j in range(n1)]
        terms += [(units[j], -2.0 * a[j] * c[j]) for j in range(n1)]
        terms.append((zero, float(np.sum(a * c * c))))
        comps.append(terms)
    return PolyMap(n1, comps)


@dataclass(frozen=True)
class ProblemInstance:
    """``n``, ``k``, the coefficient matrix ``A`` and centers ``p`` (rows p_0..p_k)."""

    A: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        p = np.array(self.p, dtype=float)
        if A.ndim != 2 or p.shape != A.shape:
            raise DimensionMismatch(f"centers shape {p.shape} does not match matrix shape {A.shape}")
        A.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.A.shape[1] - 1

    @property
    def k(self) -> int:
        return self.A.shape[0] - 1

    def gds(self) -> PolyMap:
        return build_gds(self.p, self.A)

    def with_centers(self, p) -> "ProblemInstance":
        return ProblemInstance(self.A, p)

    def to_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "A": self.A.tolist(), "p": self.p.tolist()}


def random_centers(n: int, k: int, rng, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=(k + 1, n + 1))


def instance_from_dict(data: dict, rng=None) -> ProblemInstance:
    """Parse the instance schema ``{"n", "k", "A", "p"}``.

    ``A`` may be a helper name ("distance-squared" or "lorentzian").  When
    ``p`` is absent and ``rng`` is given, centers are drawn uniformly from
    ``[-1, 1]``.
    """
    try:
        n, k = int(data["n"]), int(data["k"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInstance(f"instance needs integer 'n' and 'k': {exc}") from exc
    if n < 1 or k < 1:
        raise InvalidInstance(f"n and k must be >= 1, got n={n}, k={k}")
    A = data.get("A", "distance-squared")
    if isinstance(A, str):
        if A == "distance-squared":
            A = distance_squared_matrix(n, k)
        elif A == "lorentzian":
            A = lorentzian_matrix(n, k)
        else:
            raise InvalidInstance(f"unknown matrix helper {A!r}; expected one of {MATRIX_HELPERS}")
    A = np.asarray(A, dtype=float)
    if A.shape != (k + 1, n + 1):
        raise InvalidInstance(f"A has shape {A.shape}, expected {(k + 1, n + 1)}")
    if "p" in data and data["p"] is not None:
        p = np.asarray(data["p"], dtype=float)
        if p.shape != A.shape:
            raise InvalidInstance(f"p has shape {p.shape}, expected {A.shape}")
    elif rng is not None:
        p = random_centers(n, k, rng)
    else:
        raise InvalidInstance("instance has no centers 'p'")
    return ProblemInstance(A, p)


def load_instance(path, rng=None) -> ProblemInstance:
    with open(Path(path)) as fh:
        return instance_from_dict(json.load(fh), rng)


# ------------------------------------------------------------------ pivoting


@dataclass(frozen=True)
class PivotPlan:
    """Row/column permutations making the leading ``rank x rank`` minor nonsingular.

    ``rows[l]`` is the original row placed at position ``l``; ``cols[m]`` the
    original column placed at position ``m``.
    """

    branch: str
    rank: int
    rows: tuple
    cols: tuple
    row_transform: ElementaryTransform
    col_transform: ElementaryTransform

    @property
    def column_permutation_required(self) -> bool:
        return list(self.cols) != sorted(self.cols)

    @property
    def row_permutation_required(self) -> bool:
        return list(self.rows) != sorted(self.rows)

    def apply(self, inst: ProblemInstance) -> ProblemInstance:
        r, c = list(self.rows), list(self.cols)
        return ProblemInstance(inst.A[r][:, c], inst.p[r][:, c])

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "rank": self.rank,
            "rows": list(self.rows),
            "cols": list(self.cols),
            "column_permutation_required": self.column_permutation_required,
        }


def _permutation_transforms(rows, cols):
    m, n = len(rows), len(cols)
    P = np.zeros((m, m))
    P[np.arange(m), rows] = 1.0  # Y_l = X_rows[l]
    S = np.zeros((n, n))
    S[cols, np.arange(n)] = 1.0  # x_cols[m] = y_m
    row_t = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, P, None, "P", inverse_matrix=P.T)
    col_t = ElementaryTransform.affine(TransformKind.SOURCE_AFFINE, S, None, "sigma", inverse_matrix=S.T)
    return row_t, col_t


def _complete_pivoting(A: np.ndarray, steps: int):
    """Greedy complete pivoting on |entry|; ties go to the lowest index."""
    W = A.astype(float).copy()
    free_r = list(range(W.shape[0]))
    free_c = list(range(W.shape[1]))
    rows, cols = [], []
    for _ in range(steps):
        sub = np.abs(W[np.ix_(free_r, free_c)])
        a, b = np.unravel_index(int(np.argmax(sub)), sub.shape)
        r, c = free_r[a], free_c[b]
        if W[r, c] == 0.0:
            break
        rows.append(r)
        cols.append(c)
        free_r.remove(r)
        free_c.remove(c)
        for i in free_r:
            W[i] -= (W[i, c] / W[r, c]) * W[r]
    return rows, cols


def _leading_ok(A: np.ndarray, r: int, eps: float) -> bool:
    s = singular_values(A[:r, :r])
    return s.size > 0 and s[-1] > eps * s[0]


def select_pivot(A, branch: str, eps_rank: float = EPS_RANK) -> PivotPlan:
    """Choose permutations for the ``fullrank`` or ``deficient`` branch.

    ``fullrank`` needs ``rank(A) = n+1`` and returns a row order whose
    leading ``(n+1) x (n+1)`` block is nonsingular.  ``deficient`` needs
    ``rank(A) = r <= n`` and makes the leading ``r x r`` minor nonsingular,
    which may require a column (source coordinate) permutation.  Identity
    permutations are returned whenever they already work.
    """
    A = np.asarray(A, dtype=float)
    m, n1 = A.shape
    r = numerical_rank(A, eps_rank)
    if branch == "fullrank":
        if r != n1:
            raise RankMismatch(f"fullrank branch needs rank {n1}, matrix has rank {r}")
    elif branch == "deficient":
        if r >= n1:
            raise RankMismatch(f"deficient branch needs rank <= {n1 - 1}, matrix has rank {r}")
    else:
        raise ValueError(f"unknown branch {branch!r}")

    if _leading_ok(A, r, eps_rank):
        rows, cols = list(range(m)), list(range(n1))
    else:
        pr, pc = _complete_pivoting(A, r)
        rows = sorted(pr) + [i for i in range(m) if i not in pr]
        if branch == "fullrank":
            cols = list(range(n1))
        else:
            cols = sorted(pc) + [j for j in range(n1) if j not in pc]
        if not _leading_ok(A[rows][:, cols], r, eps_rank):
            raise RankMismatch("pivot search failed to find a nonsingular leading minor")
    row_t, col_t = _permutation_transforms(rows, cols)
    return PivotPlan(branch, r, tuple(rows), tuple(cols), row_t, col_t)
