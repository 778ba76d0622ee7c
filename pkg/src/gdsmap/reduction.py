"""Constructive reduction of ``G_(p,A)`` to a normal form.

Two branches, both for ``A`` of size ``(k+1) x (n+1)`` with non-zero entries:

* ``k = 2n`` and ``rank A = n+1``: seven steps bring ``G`` to the Whitney
  umbrella ``(x0^2, x0 x1, ..., x0 xn, x1, ..., xn)``.
* ``rank A <= n`` (any ``k >= 2n``), or ``k > 2n``: five steps bring ``G`` to
  the inclusion ``(x0, ..., xn, 0, ..., 0)``.

Each step is an :class:`~gdsmap.polymap.ElementaryTransform` applied by
exact composition.  Quantities such as ``b``, ``c``, ``d`` are read off the
composed maps and cross-checked against closed-form expressions.  Centers
for which a step's linear system is singular form the bad set; they are
reported with a :class:`BadSetCertificate`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadSet,
    ConditioningWarning,
    DegenerateKernel,
    InvalidInstance,
    RankMismatch,
    SelfCheckFailure,
    SingularA1,
    WrongBranch,
)
from .gds import EPS_RANK, PivotPlan, ProblemInstance, numerical_rank, select_pivot, validate_matrix
from .polymap import DiffeoChain, ElementaryTransform, PolyMap, TransformKind, apply_chains, compose

DET_EPS = 1e-9
CHECK_TOL = 1e-10
NF_TOL = 1e-9

UMBRELLA = "WhitneyUmbrella"
INCLUSION = "Inclusion"
BADSET = "BadSet"


def _unit(n1, j, power=1):
    return tuple(power * int(i == j) for i in range(n1))


def umbrella_normal_form(n: int) -> PolyMap:
    """``(x0^2, x0 x1, ..., x0 xn, x1, ..., xn)``."""
    n1 = n + 1
    comps = [[(_unit(n1, 0, 2), 1.0)]]
    for j in range(1, n1):
        e = [0] * n1
        e[0] = e[j] = 1
        comps.append([(tuple(e), 1.0)])
    comps += [[(_unit(n1, j), 1.0)] for j in range(1, n1)]
    return PolyMap(n1, comps)


def inclusion_normal_form(n: int, k: int) -> PolyMap:
    """``(x0, ..., xn, 0, ..., 0)`` in ``R^(k+1)``."""
    n1 = n + 1
    return PolyMap(n1, [[(_unit(n1, j), 1.0)] for j in range(n1)] + [{} for _ in range(k - n)])


# ------------------------------------------------------------- certificates


def hadamard_bound(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.prod(np.linalg.norm(M, axis=1)))


@dataclass(frozen=True)
class CertificateEntry:
    label: str
    det: float
    scale: float
    outside: bool
    warning: bool

    def to_dict(self):
        return {
            "label": self.label,
            "det": self.det,
            "scale": self.scale,
            "verdict": "outside" if self.outside else "inside",
            "warning": self.warning,
        }


@dataclass(frozen=True)
class BadSetCertificate:
    """Determinants deciding bad-set membership, each against its Hadamard bound."""

    branch: str
    entries: tuple
    eps: float = DET_EPS

    @property
    def outside(self) -> bool:
        return all(e.outside for e in self.entries)

    @property
    def warnings(self) -> list:
        return [
            f"{e.label}: |det| = {abs(e.det):.3e} within a factor 10 of threshold {self.eps * e.scale:.3e}"
            for e in self.entries
            if e.warning
        ]

    def entry(self, label) -> CertificateEntry:
        return next(e for e in self.entries if e.label == label)

    def to_dict(self):
        return {
            "branch": self.branch,
            "eps": self.eps,
            "verdict": "outside" if self.outside else "inside",
            "entries": [e.to_dict() for e in self.entries],
            "warnings": self.warnings,
        }


def _certify(label, M, eps) -> CertificateEntry:
    det = float(np.linalg.det(M))
    scale = hadamard_bound(M)
    cut = eps * scale
    outside = abs(det) > cut
    return CertificateEntry(label, det, scale, outside, bool(cut / 10 < abs(det) <= 10 * cut))


def _finish_certificate(cert: BadSetCertificate) -> BadSetCertificate:
    for msg in cert.warnings:
        warnings.warn(msg, ConditioningWarning, stacklevel=3)
    return cert


# --------------------------------------------------------- shared utilities


def _require(err: float, scale: float, tol: float, what: str, checks: dict | None = None):
    if checks is not None:
        checks[what] = err
    if not err <= tol * scale:
        raise SelfCheckFailure(f"{what}: deviation {err:.3e} exceeds {tol:.0e} x {scale:.3e}")


def _compare(phi: PolyMap, expected: PolyMap, what: str, checks: dict, tol: float = CHECK_TOL):
    err = phi.coefficient_distance(expected)
    scale = 1.0 + max(phi.max_abs_coefficient(), expected.max_abs_coefficient())
    _require(err, scale, tol, what, checks)


def _readout(phi: PolyMap, rows):
    """Linear coefficients ``b`` and constants ``c`` of the given components."""
    n1 = phi.n_vars
    b = np.array([[phi.coefficient(i, _unit(n1, j)) for j in range(n1)] for i in rows])
    c = np.array([phi.coefficient(i, (0,) * n1) for i in rows])
    return b.reshape(len(rows), n1), c


def _linear_form_map(n1, rows_coefs, consts=None) -> PolyMap:
    comps = []
    for i, row in enumerate(rows_coefs):
        terms = [(_unit(n1, j), float(v)) for j, v in enumerate(row)]
        if consts is not None:
            terms.append(((0,) * n1, float(consts[i])))
        comps.append(terms)
    return PolyMap(n1, comps)


@dataclass
class ReductionResult:
    kind: str
    instance: ProblemInstance
    pivot: PivotPlan
    source: DiffeoChain
    target: DiffeoChain
    certificate: BadSetCertificate
    normal_form: PolyMap
    trace: dict = field(default_factory=dict)
    order: tuple = ()
    residual: float = float("nan")

    def reduced_map(self) -> PolyMap:
        """Replay the transforms on ``G`` in the order the reduction applied them."""
        return apply_chains(self.target, self.instance.gds(), self.source, self.order or None)

    @property
    def transforms(self) -> list:
        return list(self.target.transforms) + list(self.source.transforms)

    def to_dict(self, snapshots: bool = True) -> dict:
        trace = dict(self.trace)
        if not snapshots:
            trace.pop("snapshots", None)
        return {
            "kind": self.kind,
            "instance": self.instance.to_dict(),
            "certificate": self.certificate.to_dict(),
            "pivot": self.pivot.to_dict(),
            "trace": trace,
            "source_chain": self.source.to_dict(),
            "target_chain": self.target.to_dict(),
            "order": list(self.order),
            "normal_form": self.normal_form.to_dict(),
            "residual": self.residual,
        }


def _chains(pivot: PivotPlan, n1: int, m: int):
    source = DiffeoChain("source", n1)
    target = DiffeoChain("target", m)
    order = []
    if pivot.column_permutation_required:
        source = source.append(pivot.col_transform)
        order.append("source")
    if pivot.row_permutation_required:
        target = target.append(pivot.row_transform)
        order.append("target")
    return source, target, order


def _final_residual(result: ReductionResult, tol: float) -> float:
    G = result.instance.gds()
    reduced = result.reduced_map()
    res = reduced.coefficient_distance(result.normal_form) / G.max_abs_coefficient()
    result.residual = res
    if not res <= tol:
        raise SelfCheckFailure(f"composed chain misses the normal form by {res:.3e} (relative)")
    return res


def _snap(phi: PolyMap):
    return phi.to_dict()


# ----------------------------------------------------------- full-rank branch


def solve_lambda(A):
    """Solve ``A1^T L1 = E`` and ``A1^T L2 = -A2^T`` (A1 = leading (n+1) rows)."""
    A = np.asarray(A, dtype=float)
    n1 = A.shape[1]
    A1, A2 = A[:n1], A[n1:]
    if numerical_rank(A1) < n1:
        raise SingularA1("leading (n+1)x(n+1) block of A is singular")
    L1 = np.linalg.solve(A1.T, np.eye(n1))
    L2 = np.linalg.solve(A1.T, -A2.T)
    scale = np.linalg.norm(A)
    r1 = np.linalg.norm(A1.T @ L1 - np.eye(n1))
    r2 = np.linalg.norm(A1.T @ L2 + A2.T) if A2.size else 0.0
    if max(r1, r2) > 1e-10 * max(scale, 1.0) * max(1.0, np.linalg.norm(L1)):
        raise SingularA1(f"lambda residuals {r1:.2e}, {r2:.2e} too large; A1 ill-conditioned")
    return L1, L2


def _h1_fullrank(A, L1, L2) -> ElementaryTransform:
    """``H1(X) = X M`` with ``M = [[L1, L2], [0, E]]``; inverse ``M^-1 = [[A1^T, A2^T], [0, E]]``."""
    n1 = A.shape[1]
    m = A.shape[0]
    M = np.eye(m)
    M[:n1, :n1] = L1
    M[:n1, n1:] = L2
    Minv = np.eye(m)
    Minv[:n1, :n1] = A[:n1].T
    Minv[:n1, n1:] = A[n1:].T
    return ElementaryTransform.affine(TransformKind.TARGET_AFFINE, M.T, None, "H1", inverse_matrix=Minv.T)


def linear_part_closed_form(p, A, L1, L2):
    """``b``, ``c`` of ``H1 o G`` from the explicit formulas (full-rank branch)."""
    p = np.asarray(p, dtype=float)
    A = np.asarray(A, dtype=float)
    n1 = A.shape[1]
    lam = np.hstack([L1, L2])  # lam[k, i] = lambda_{k,i}
    ap = A * p
    ap2 = np.sum(A * p * p, axis=1)
    b = -2.0 * lam.T @ ap[:n1]
    b[n1:] -= 2.0 * ap[n1:]
    c = lam.T @ ap2[:n1]
    c[n1:] += ap2[n1:]
    return b, c


def linear_part(inst: ProblemInstance, L1, L2, phi1: PolyMap | None = None, tol: float = CHECK_TOL):
    """Read ``b_ij`` and ``c_i`` off ``H1 o G`` and check them against the closed forms.

    Returns ``(b, c)`` with ``b`` of shape ``(k+1, n+1)``.  Raises
    :class:`SelfCheckFailure` if readout and formula disagree.
    """
    if phi1 is None:
        phi1 = compose(_h1_fullrank(inst.A, L1, L2).forward, inst.gds())
    b, c = _readout(phi1, range(phi1.n_out))
    bf, cf = linear_part_closed_form(inst.p, inst.A, L1, L2)
    _require(np.max(np.abs(b - bf)), 1.0 + np.max(np.abs(bf)), tol, "b readout vs closed form")
    _require(np.max(np.abs(c - cf)), 1.0 + np.max(np.abs(cf)), tol, "c readout vs closed form")
    return b, c


def fullrank_certificate(b, eps: float = DET_EPS) -> BadSetCertificate:
    """``det B_j`` for ``j = 0..n``; ``B_j`` = affine-row linear coefficients without column j."""
    b = np.asarray(b, dtype=float)
    n1 = b.shape[1]
    Bfull = b[n1:]
    entries = tuple(_certify(f"det B_{j}", np.delete(Bfull, j, axis=1), eps) for j in range(n1))
    return BadSetCertificate("fullrank", entries, eps)


def _stage_fullrank(inst: ProblemInstance, eps_rank: float):
    n, k = inst.n, inst.k
    if k != 2 * n:
        raise WrongBranch(f"umbrella branch needs k = 2n, got k={k}, n={n}")
    pivot = select_pivot(inst.A, "fullrank", eps_rank)
    work = pivot.apply(inst)
    L1, L2 = solve_lambda(work.A)
    H1 = _h1_fullrank(work.A, L1, L2)
    phi0 = work.gds()
    phi1 = compose(H1.forward, phi0)
    b, c = linear_part(work, L1, L2, phi1)
    return pivot, work, L1, L2, H1, phi0, phi1, b, c


def _stage_deficient(inst: ProblemInstance, eps_rank: float):
    n, k = inst.n, inst.k
    r = numerical_rank(inst.A, eps_rank)
    if k == 2 * n and r == n + 1:
        raise WrongBranch("k = 2n with rank n+1 belongs to the umbrella branch")
    if k < 2 * n or (k + 1) - r < n + 1:
        raise RankMismatch(f"inclusion branch needs k >= 2n and k+1-rank >= n+1 (k={k}, n={n}, rank={r})")
    pivot = select_pivot(inst.A, "deficient" if r <= n else "fullrank", eps_rank)
    work = pivot.apply(inst)
    alpha = solve_alpha(work.A, r)
    T1 = np.eye(k + 1)
    T1[r:, :r] = alpha.T
    T1inv = np.eye(k + 1)
    T1inv[r:, :r] = -alpha.T
    H1 = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, T1, None, "H1", inverse_matrix=T1inv)
    phi0 = work.gds()
    phi1 = compose(H1.forward, phi0)
    rows = list(range(r, k + 1))
    b, c = _readout(phi1, rows)
    # closed form: b_ij = -2 (sum_m alpha_mi a_mj p_mj + a_ij p_ij)
    ap = work.A * work.p
    ap2 = np.sum(work.A * work.p ** 2, axis=1)
    bf = -2.0 * (alpha.T @ ap[:r] + ap[r:])
    cf = alpha.T @ ap2[:r] + ap2[r:]
    _require(np.max(np.abs(b - bf)), 1.0 + np.max(np.abs(bf)), CHECK_TOL, "b readout vs closed form")
    _require(np.max(np.abs(c - cf)), 1.0 + np.max(np.abs(cf)), CHECK_TOL, "c readout vs closed form")
    return pivot, work, r, alpha, H1, phi0, phi1, b, c


def deficient_certificate(b, n: int, eps: float = DET_EPS) -> BadSetCertificate:
    """``det B`` for the first ``n+1`` affine rows."""
    B = np.asarray(b, dtype=float)[: n + 1]
    return BadSetCertificate("deficient", (_certify("det B", B, eps),), eps)


def badset_certificate(inst: ProblemInstance, branch: str | None = None, eps: float = DET_EPS,
                       eps_rank: float = EPS_RANK) -> BadSetCertificate:
    """Bad-set certificate of ``inst`` for ``branch`` ('fullrank', 'deficient' or None = auto)."""
    if branch is None:
        branch = _auto_branch(inst, eps_rank)
    if branch == "fullrank":
        b = _stage_fullrank(inst, eps_rank)[7]
        return _finish_certificate(fullrank_certificate(b, eps))
    if branch == "deficient":
        b = _stage_deficient(inst, eps_rank)[7]
        return _finish_certificate(deficient_certificate(b, inst.n, eps))
    raise ValueError(f"unknown branch {branch!r}")


@dataclass(frozen=True)
class GammaSolution:
    """Coefficients of ``H3`` and the constants ``d`` of the umbrella branch.

    ``gamma[i - (n+1), j]`` is ``gamma_{i,j}`` for affine rows ``i``.
    ``d_diag[j] = d_{j,j}``; ``d0[l-1] = d_{n+l,0}``; ``d1[l-1] = d_{n+l,l}``.
    """

    gamma: np.ndarray
    d_diag: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    certificate: BadSetCertificate


def solve_gamma(b, eps: float = DET_EPS, eps_rank: float = EPS_RANK) -> GammaSolution:
    """Solve for the ``H3`` coefficients given ``b`` of shape ``(2n+1, n+1)``.

    For quadratic rows ``j`` the column solves ``B_j^T gamma = -(b_j without
    entry j)``.  For affine rows ``n+l`` the column spans the kernel of
    ``Btilde_l^T`` (columns ``1..n`` of the affine block without ``l``),
    normalized to unit length with ``d_{n+l,0} > 0``.
    """
    b = np.asarray(b, dtype=float)
    n1 = b.shape[1]
    n = n1 - 1
    cert = fullrank_certificate(b, eps)
    if not cert.outside:
        raise BadSet(cert)
    Bfull = b[n1:]
    gamma = np.zeros((n, 2 * n + 1))
    d_diag = np.zeros(n1)
    for j in range(n1):
        Bj = np.delete(Bfull, j, axis=1)
        rhs = -np.delete(b[j], j)
        g = np.linalg.solve(Bj.T, rhs)
        gamma[:, j] = g
        d_diag[j] = b[j, j] + g @ Bfull[:, j]
    d0 = np.zeros(n)
    d1 = np.zeros(n)
    scale = max(np.linalg.norm(Bfull), np.finfo(float).tiny)
    for l in range(1, n1):
        Bt = np.delete(Bfull[:, 1:], l - 1, axis=1)  # n x (n-1)
        if Bt.shape[1] == 0:
            g = np.ones(1)
        else:
            _, s, vt = np.linalg.svd(Bt.T)
            if s.size < n - 1 or s[-1] <= eps_rank * s[0]:
                raise DegenerateKernel(f"kernel of Btilde_{l}^T is not one-dimensional")
            g = vt[-1]
        g = g / np.linalg.norm(g)
        if g @ Bfull[:, 0] < 0:
            g = -g
        d0[l - 1] = g @ Bfull[:, 0]
        d1[l - 1] = g @ Bfull[:, l]
        if abs(d0[l - 1]) <= 1e-10 * scale or abs(d1[l - 1]) <= 1e-10 * scale:
            raise DegenerateKernel(f"d_{n + l},0 or d_{n + l},{l} vanishes numerically")
        gamma[:, n + l] = g
    return GammaSolution(gamma, d_diag, d0, d1, cert)


def _umbrella_h5(d0, d1) -> ElementaryTransform:
    n = len(d0)
    m = 2 * n + 1
    ident = [(_unit(m, i), 1.0) for i in range(m)]
    fwd = [[ident[i]] for i in range(m)]
    inv = [[ident[i]] for i in range(m)]
    for l in range(1, n + 1):
        a, c = d0[l - 1], d1[l - 1]
        fwd[l] = [
            (_unit(m, l), -c * c / (2 * a)),
            (_unit(m, 0), a / 2),
            (_unit(m, n + l, 2), 1.0 / (2 * a)),
        ]
        inv[l] = [
            (_unit(m, l), -2 * a / (c * c)),
            (_unit(m, 0), a * a / (c * c)),
            (_unit(m, n + l, 2), 1.0 / (c * c)),
        ]
    return ElementaryTransform(TransformKind.TARGET_SHEAR, PolyMap(m, fwd), PolyMap(m, inv), "H5")


def _umbrella_h5_factors(d0, d1):
    """``_umbrella_h5`` split as ``H5 o S5`` with ``S5`` a diagonal scaling.

    The single shear has Jacobian condition about ``(d0/d1)^2``; scaling row
    ``l`` by ``sqrt|alpha_l|`` first leaves two steps of condition about
    ``|d0/d1|`` each, which keeps every step's round trip near rounding.
    """
    n = len(d0)
    m = 2 * n + 1
    alpha = -np.asarray(d1) ** 2 / (2 * np.asarray(d0))
    s = np.sqrt(np.abs(alpha))
    scale = np.ones(m)
    scale[1:n + 1] = s
    S5 = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, np.diag(scale), None, "S5",
                                    inverse_matrix=np.diag(1.0 / scale))
    ident = [(_unit(m, i), 1.0) for i in range(m)]
    fwd = [[ident[i]] for i in range(m)]
    inv = [[ident[i]] for i in range(m)]
    for l in range(1, n + 1):
        a, t = d0[l - 1], alpha[l - 1] / s[l - 1]
        fwd[l] = [(_unit(m, l), t), (_unit(m, 0), a / 2), (_unit(m, n + l, 2), 1.0 / (2 * a))]
        inv[l] = [(_unit(m, l), 1.0 / t), (_unit(m, 0), -a / (2 * t)), (_unit(m, n + l, 2), -1.0 / (2 * a * t))]
    H5 = ElementaryTransform(TransformKind.TARGET_SHEAR, PolyMap(m, fwd), PolyMap(m, inv), "H5")
    return S5, H5


def reduce_full_rank(inst: ProblemInstance, eps: float = DET_EPS, eps_rank: float = EPS_RANK,
                     tol: float = NF_TOL) -> ReductionResult:
    """Reduce ``G_(p,A)`` (``k = 2n``, rank ``n+1``) to the Whitney umbrella.

    Raises :class:`BadSet` when some ``det B_j`` vanishes.
    """
    n = inst.n
    n1, m = n + 1, 2 * n + 1
    checks: dict = {}
    pivot, work, L1, L2, H1, phi0, phi1, b, c = _stage_fullrank(inst, eps_rank)
    source, target, order = _chains(pivot, n1, m)
    target = target.append(H1)
    order.append("target")

    for i in range(n1):
        _require(abs(phi1.coefficient(i, _unit(n1, i, 2)) - 1.0), 1.0, CHECK_TOL, f"phi1[{i}] x{i}^2 = 1", checks)
    expected1 = PolyMap(
        n1,
        [[(_unit(n1, i, 2), 1.0)] * (i < n1) + [(_unit(n1, j), b[i, j]) for j in range(n1)] + [((0,) * n1, c[i])]
         for i in range(m)],
    )
    _compare(phi1, expected1, "STEP 1 form", checks)

    H2 = ElementaryTransform.translation(TransformKind.TARGET_AFFINE, -c, "H2")
    target = target.append(H2)
    order.append("target")
    phi2 = compose(H2.forward, phi1)
    _compare(phi2, expected1 - PolyMap(n1, [[((0,) * n1, ci)] for ci in c]), "STEP 2 constants removed", checks)

    cert = _finish_certificate(fullrank_certificate(b, eps))
    if not cert.outside:
        raise BadSet(cert)
    gs = solve_gamma(b, eps, eps_rank)
    R3 = np.zeros((m, m))  # row-vector form: H3(X) = X R3
    R3[:n1, :n1] = np.eye(n1)
    R3[n1:, :] = gs.gamma
    H3 = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, R3.T, None, "H3")
    target = target.append(H3)
    order.append("target")
    phi3 = compose(H3.forward, phi2)
    d_diag = np.array([phi3.coefficient(j, _unit(n1, j)) for j in range(n1)])
    d0 = np.array([phi3.coefficient(n + l, _unit(n1, 0)) for l in range(1, n1)])
    d1 = np.array([phi3.coefficient(n + l, _unit(n1, l)) for l in range(1, n1)])
    dscale = 1.0 + np.max(np.abs(b))
    _require(np.max(np.abs(d_diag - gs.d_diag)), dscale, CHECK_TOL, "d_jj readout vs solve", checks)
    _require(np.max(np.abs(np.r_[d0 - gs.d0, d1 - gs.d1])), dscale, CHECK_TOL, "d_affine readout vs solve", checks)
    expected3 = PolyMap(
        n1,
        [[(_unit(n1, j, 2), 1.0), (_unit(n1, j), d_diag[j])] for j in range(n1)]
        + [[(_unit(n1, 0), d0[l - 1]), (_unit(n1, l), d1[l - 1])] for l in range(1, n1)],
    )
    _compare(phi3, expected3, "STEP 3 form", checks)

    h1 = ElementaryTransform.translation(TransformKind.SOURCE_AFFINE, -0.5 * d_diag, "h1")
    source = source.append(h1)
    order.append("source")
    phi4 = compose(phi3, h1.forward)
    d_tilde = np.array([phi4.coefficient(i, (0,) * n1) for i in range(m)])
    dt_closed = np.r_[-d_diag ** 2 / 4, -(d0 * d_diag[0] + d1 * d_diag[1:]) / 2]
    _require(np.max(np.abs(d_tilde - dt_closed)), 1.0 + np.max(np.abs(dt_closed)), CHECK_TOL,
             "d_tilde readout vs closed form", checks)

    H4 = ElementaryTransform.translation(TransformKind.TARGET_AFFINE, -d_tilde, "H4")
    target = target.append(H4)
    order.append("target")
    phi5 = compose(H4.forward, phi4)
    expected5 = PolyMap(
        n1,
        [[(_unit(n1, j, 2), 1.0)] for j in range(n1)]
        + [[(_unit(n1, 0), d0[l - 1]), (_unit(n1, l), d1[l - 1])] for l in range(1, n1)],
    )
    _compare(phi5, expected5, "STEP 5 form", checks)

    S2 = np.eye(n1)
    S2inv = np.eye(n1)
    for l in range(1, n1):
        S2[l, l] = 1.0 / d1[l - 1]
        S2[l, 0] = -d0[l - 1] / d1[l - 1]
        S2inv[l, l] = d1[l - 1]
        S2inv[l, 0] = d0[l - 1]
    h2 = ElementaryTransform.affine(TransformKind.SOURCE_AFFINE, S2, None, "h2", inverse_matrix=S2inv)
    source = source.append(h2)
    order.append("source")
    phi6 = compose(phi5, h2.forward)
    sq = [PolyMap(n1, [[(_unit(n1, l), 1.0 / d1[l - 1]), (_unit(n1, 0), -d0[l - 1] / d1[l - 1])]]) for l in range(1, n1)]
    sq = [compose(PolyMap(1, [[((2,), 1.0)]]), s) for s in sq]
    expected6 = PolyMap(
        n1,
        [[(_unit(n1, 0, 2), 1.0)]] + [s.components[0] for s in sq] + [[(_unit(n1, l), 1.0)] for l in range(1, n1)],
    )
    _compare(phi6, expected6, "STEP 6 form", checks)

    S5, H5 = _umbrella_h5_factors(d0, d1)
    target = target.append(S5).append(H5)
    order += ["target", "target"]
    phi7 = compose(S5.forward, phi6)
    phi8 = compose(H5.forward, phi7)
    nf = umbrella_normal_form(n)
    _compare(phi8, nf, "STEP 7 normal form", checks, tol=tol)
    if phi8.chop(tol).degree > 2:
        raise SelfCheckFailure("final form has degree above 2")

    trace = {
        "branch": "fullrank",
        "column_permutation_required": pivot.column_permutation_required,
        "Lambda1": L1.tolist(),
        "Lambda2": L2.tolist(),
        "b": b.tolist(),
        "c": c.tolist(),
        "Gamma": gs.gamma.tolist(),
        "d_diag": d_diag.tolist(),
        "d_affine_0": d0.tolist(),
        "d_affine_j": d1.tolist(),
        "d_tilde": d_tilde.tolist(),
        "checks": checks,
        "snapshots": {
            f"phi{s}": _snap(f) for s, f in enumerate((phi0, phi1, phi2, phi3, phi4, phi5, phi6, phi7, phi8))
        },
    }
    result = ReductionResult(UMBRELLA, inst, pivot, source, target, cert, nf, trace, tuple(order))
    _final_residual(result, tol)
    return result


# ------------------------------------------------------------ deficient branch


def solve_alpha(A, rank: int | None = None):
    """Coefficients with ``sum_j alpha_ji a_j + a_i = 0`` for every row ``i >= rank``.

    ``A`` must already be pivoted so its leading ``rank`` rows span the row
    space.  Returns ``alpha`` of shape ``(rank, k+1-rank)``; column ``i - rank``
    belongs to row ``i``.
    """
    A = np.asarray(A, dtype=float)
    r = numerical_rank(A) if rank is None else int(rank)
    if r > A.shape[1] or r < 1:
        raise RankMismatch(f"invalid rank {r}")
    Q = A[:r]
    alpha, *_ = np.linalg.lstsq(Q.T, -A[r:].T, rcond=None)
    res = np.max(np.linalg.norm(Q.T @ alpha + A[r:].T, axis=0), initial=0.0)
    if res > 1e-10 * np.linalg.norm(A):
        raise RankMismatch(f"rows beyond {r} are not spanned by the leading rows (residual {res:.2e})")
    return alpha


def _inclusion_h5(ap_quad, p_quad, n, k) -> ElementaryTransform:
    """Shear sending (quadratic rows, x0..xn, zeros) to (x0..xn, 0, ..., 0).

    ``ap_quad``/``p_quad`` are ``a_mj``/``p_mj`` of the ``r`` quadratic rows.
    """
    r = ap_quad.shape[0]
    m = k + 1
    n1 = n + 1
    fwd = [None] * m
    inv = [None] * m
    for j in range(n1):
        fwd[j] = [(_unit(m, r + j), 1.0)]
        inv[r + j] = [(_unit(m, j), 1.0)]
    for q in range(r):
        fwd[n1 + q] = [(_unit(m, q), 1.0)]
        inv[q] = [(_unit(m, n1 + q), 1.0)]
        for j in range(n1):
            a, pj = ap_quad[q, j], p_quad[q, j]
            fwd[n1 + q] += [(_unit(m, r + j, 2), -a), (_unit(m, r + j), 2 * a * pj)]
            inv[q] += [(_unit(m, j, 2), a), (_unit(m, j), -2 * a * pj)]
    for s in range(r + n1, m):
        fwd[s] = [(_unit(m, s), 1.0)]
        inv[s] = [(_unit(m, s), 1.0)]
    return ElementaryTransform(TransformKind.TARGET_SHEAR, PolyMap(m, fwd), PolyMap(m, inv), "H5")


def reduce_to_inclusion(inst: ProblemInstance, eps: float = DET_EPS, eps_rank: float = EPS_RANK,
                        tol: float = NF_TOL) -> ReductionResult:
    """Reduce ``G_(p,A)`` to the inclusion; needs ``k >= 2n`` and ``k+1-rank >= n+1``.

    The ``rank`` independent rows keep their quadratic terms; all other rows
    become affine.  The first ``n+1`` affine rows form ``B``; any further
    affine rows are eliminated against them in ``H3``.
    """
    n, k = inst.n, inst.k
    n1, m = n + 1, k + 1
    checks: dict = {}
    pivot, work, r, alpha, H1, phi0, phi1, b, c = _stage_deficient(inst, eps_rank)
    source, target, order = _chains(pivot, n1, m)
    target = target.append(H1)
    order.append("target")
    affine_rows = list(range(r, m))

    flat = max((abs(coef) for i in affine_rows for e, coef in phi1.components[i].items() if sum(e) > 1), default=0.0)
    _require(flat, 1.0 + phi0.max_abs_coefficient(), CHECK_TOL, "STEP 1 quadratics removed", checks)

    shift = np.zeros(m)
    shift[r:] = -c
    H2 = ElementaryTransform.translation(TransformKind.TARGET_AFFINE, shift, "H2")
    target = target.append(H2)
    order.append("target")
    phi2 = compose(H2.forward, phi1)
    expected2 = PolyMap(n1, list(phi0.components[:r]) + list(_linear_form_map(n1, b).components))
    _compare(phi2, expected2, "STEP 2 form", checks)

    cert = _finish_certificate(deficient_certificate(b, n, eps))
    if not cert.outside:
        raise BadSet(cert)
    B = b[:n1]
    surplus = b[n1:]
    Binv = np.linalg.inv(B)
    mu = surplus @ Binv
    T3 = np.eye(m)
    T3inv = np.eye(m)
    S = slice(r, r + n1)
    U = slice(r + n1, m)
    T3[S, S] = Binv
    T3[U, S] = -mu
    T3inv[S, S] = B
    T3inv[U, S] = surplus
    H3 = ElementaryTransform.affine(TransformKind.TARGET_AFFINE, T3, None, "H3", inverse_matrix=T3inv)
    target = target.append(H3)
    order.append("target")
    phi3 = compose(H3.forward, phi2)
    expected3 = PolyMap(
        n1,
        list(phi0.components[:r]) + [[(_unit(n1, j), 1.0)] for j in range(n1)] + [{} for _ in range(m - r - n1)],
    )
    _compare(phi3, expected3, "STEP 3 form", checks)

    consts = np.array([phi3.coefficient(q, (0,) * n1) for q in range(r)])
    closed = np.sum(work.A[:r] * work.p[:r] ** 2, axis=1)
    _require(np.max(np.abs(consts - closed)), 1.0 + np.max(np.abs(closed)), CHECK_TOL,
             "quadratic-row constants vs closed form", checks)
    shift = np.zeros(m)
    shift[:r] = -consts
    H4 = ElementaryTransform.translation(TransformKind.TARGET_AFFINE, shift, "H4")
    target = target.append(H4)
    order.append("target")
    phi4 = compose(H4.forward, phi3)

    H5 = _inclusion_h5(work.A[:r], work.p[:r], n, k)
    target = target.append(H5)
    order.append("target")
    phi5 = compose(H5.forward, phi4)
    nf = inclusion_normal_form(n, k)
    _compare(phi5, nf, "STEP 5 normal form", checks, tol=tol)

    trace = {
        "branch": "deficient",
        "rank": r,
        "column_permutation_required": pivot.column_permutation_required,
        "alpha": alpha.tolist(),
        "b": b.tolist(),
        "c": c.tolist(),
        "B": B.tolist(),
        "surplus_coefficients": mu.tolist(),
        "quadratic_constants": consts.tolist(),
        "checks": checks,
        "snapshots": {f"phi{s}": _snap(f) for s, f in enumerate((phi0, phi1, phi2, phi3, phi4, phi5))},
    }
    result = ReductionResult(INCLUSION, inst, pivot, source, target, cert, nf, trace, tuple(order))
    _final_residual(result, tol)
    return result


# ------------------------------------------------------------ classification


def _auto_branch(inst: ProblemInstance, eps_rank: float) -> str:
    r = numerical_rank(inst.A, eps_rank)
    return "fullrank" if inst.k == 2 * inst.n and r == inst.n + 1 else "deficient"


@dataclass
class Classification:
    kind: str
    branch: str
    rank: int
    certificate: BadSetCertificate
    result: ReductionResult | None = None

    def to_dict(self, include_result: bool = False) -> dict:
        out = {
            "kind": self.kind,
            "branch": self.branch,
            "rank": self.rank,
            "certificate": self.certificate.to_dict(),
        }
        if self.result is not None:
            out["residual"] = self.result.residual
            if include_result:
                out["result"] = self.result.to_dict()
        return out


def check_reducible(inst: ProblemInstance):
    violations = validate_matrix(inst.A, reduction=True)
    if violations:
        raise InvalidInstance("; ".join(violations), violations)


def classify(inst: ProblemInstance, eps: float = DET_EPS, eps_rank: float = EPS_RANK,
             tol: float = NF_TOL) -> Classification:
    """Dispatch on ``rank A`` and ``k``; bad-set centers give kind ``BadSet``."""
    check_reducible(inst)
    branch = _auto_branch(inst, eps_rank)
    rank = numerical_rank(inst.A, eps_rank)
    reducer = reduce_full_rank if branch == "fullrank" else reduce_to_inclusion
    try:
        result = reducer(inst, eps=eps, eps_rank=eps_rank, tol=tol)
    except BadSet as exc:
        return Classification(BADSET, branch, rank, exc.certificate)
    return Classification(result.kind, branch, rank, result.certificate, result)
