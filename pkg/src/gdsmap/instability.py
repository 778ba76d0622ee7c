"""Unstable perturbations of full-rank matrices (``k = 2n``).

Keep the leading block ``A1`` of ``A`` and replace the last ``n`` rows by a
free matrix ``c``.  The affine-row linear coefficients ``b_ij`` of
``H1 o G_(p, (A1|c))`` are linear in ``c`` for fixed centers ``p``.  When
they all vanish, the last ``n`` components of ``H1 o G`` are constant, so the
image is flat, while ``G`` still has singular points: such a map cannot be
stable.

``psi_map`` is the forward construction: given the first ``n+1`` centers
``q`` and ``c``, it returns the remaining centers making every ``b_ij``
zero.  ``find_unstable_perturbation`` works at fixed ``p`` instead, as a
kernel problem for the linear map ``c -> b(p, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CertificationError,
    DimensionMismatch,
    InvalidInstance,
    RankMismatch,
    SelfCheckFailure,
    SingularA1,
)
from .gds import EPS_RANK, ProblemInstance, build_gds, numerical_rank, select_pivot, validate_matrix
from .polymap import compose
from .reduction import _h1_fullrank, linear_part, solve_lambda
from .verify import SampleSpec, check_image_flat, find_singular_point

KERNEL_TOL = 1e-9
RESIDUAL_TOL = 1e-10
FLAT_TOL = 1e-10
SINGULAR_TOL = 1e-8
MIN_ENTRY = 1e-6


def _leading_block(A1):
    A1 = np.asarray(A1, dtype=float)
    n1 = A1.shape[1]
    if A1.shape != (n1, n1):
        raise DimensionMismatch(f"A1 must be square (n+1)x(n+1), got {A1.shape}")
    if numerical_rank(A1) < n1:
        raise SingularA1("A1 is singular")
    return A1


def _check_c(c, n1):
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[1] != n1:
        raise DimensionMismatch(f"c must have shape (n, {n1}), got {c.shape}")
    if np.any(c == 0.0):
        raise InvalidInstance("c has a zero entry")
    return c


def affine_coefficients(p, A1, c) -> np.ndarray:
    """``b_ij`` (affine rows only) of ``H1 o G_(p, (A1|c))``, shape ``(n, n+1)``.

    ``b_ij = -2 (sum_k lambda_{k,i} a_kj p_kj + c_ij p_ij)`` with
    ``Lambda2 = -(A1^T)^-1 c^T``.
    """
    A1 = np.asarray(A1, dtype=float)
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    n1 = A1.shape[1]
    L2 = np.linalg.solve(A1.T, -c.T)
    return -2.0 * (L2.T @ (A1 * p[:n1]) + c * p[n1:])


def psi_map(q, c, A1) -> np.ndarray:
    """Centers ``p = Psi(q, c)``: first block ``q``, second block making ``b = 0``."""
    A1 = _leading_block(A1)
    n1 = A1.shape[1]
    q = np.asarray(q, dtype=float)
    if q.shape != (n1, n1):
        raise DimensionMismatch(f"q must have shape {(n1, n1)}, got {q.shape}")
    c = _check_c(c, n1)
    L2 = np.linalg.solve(A1.T, -c.T)
    numer = L2.T @ (A1 * q)
    return np.vstack([q, -numer / c])


def _psi_flat(z, A1):
    n1 = A1.shape[1]
    q = z[: n1 * n1].reshape(n1, n1)
    c = z[n1 * n1:].reshape(-1, n1)
    return psi_map(q, c, A1).ravel()


def psi_c_block(q, c, A1) -> np.ndarray:
    """Analytic ``d psi_tilde / d c``; block diagonal over affine rows.

    With ``K = A1^-1 (A1 * q)`` one has ``psi_tilde_ij = (c_i . K[:, j]) / c_ij``.
    """
    A1 = _leading_block(A1)
    q = np.asarray(q, dtype=float)
    c = _check_c(c, A1.shape[1])
    n, n1 = c.shape
    K = np.linalg.solve(A1, A1 * q)
    psi = (c @ K) / c
    D = np.zeros((n * n1, n * n1))
    for i in range(n):
        block = K.T / c[i][:, None] - np.diag(psi[i] / c[i])
        D[i * n1:(i + 1) * n1, i * n1:(i + 1) * n1] = block
    return D


@dataclass
class PsiJacobianReport:
    det_finite_difference: float
    det_block: float
    scale: float
    agree: bool

    def to_dict(self):
        return dict(self.__dict__)


def psi_jacobian_det(q, c, A1, step: float = 1e-6, rtol: float = 1e-5) -> PsiJacobianReport:
    """``det J Psi(q, c)`` by central differences and via the triangular block structure.

    ``J Psi = [[E, 0], [d psi/dq, d psi/dc]]`` so ``det J Psi = det(d psi/dc)``.
    ``scale`` is the Hadamard bound of the finite-difference Jacobian;
    agreement means ``|difference| <= rtol * (1 + scale)``.
    """
    A1 = _leading_block(A1)
    q = np.asarray(q, dtype=float)
    c = _check_c(c, A1.shape[1])
    z = np.r_[q.ravel(), c.ravel()]
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((_psi_flat(z + e, A1) - _psi_flat(z - e, A1)) / (2 * step))
    J = np.stack(cols, axis=1)
    det_fd = float(np.linalg.det(J))
    det_block = float(np.linalg.det(psi_c_block(q, c, A1)))
    scale = float(np.prod(np.linalg.norm(J, axis=0)))
    return PsiJacobianReport(det_fd, det_block, scale, abs(det_fd - det_block) <= rtol * (1 + scale))


def build_instability_matrix(p, A, check_linearity: bool = True) -> np.ndarray:
    """Matrix ``L_p`` of ``c -> b(p, c)`` (``c`` and ``b`` flattened row-major).

    Only the leading ``(n+1) x (n+1)`` block of ``A`` enters.
    """
    A = np.asarray(A, dtype=float)
    p = np.asarray(p, dtype=float)
    n1 = A.shape[1]
    n = n1 - 1
    if p.shape != (2 * n + 1, n1):
        raise DimensionMismatch(f"p must have shape {(2 * n + 1, n1)}, got {p.shape}")
    A1 = _leading_block(A[:n1])
    size = n * n1
    L = np.zeros((size, size))
    for col in range(size):
        e = np.zeros(size)
        e[col] = 1.0
        L[:, col] = affine_coefficients(p, A1, e.reshape(n, n1)).ravel()
    if check_linearity:
        rng = np.random.default_rng(0)
        c1, c2 = rng.standard_normal((2, n, n1))
        lhs = affine_coefficients(p, A1, 0.7 * c1 - 1.3 * c2)
        rhs = 0.7 * affine_coefficients(p, A1, c1) - 1.3 * affine_coefficients(p, A1, c2)
        if np.max(np.abs(lhs - rhs)) > 1e-11 * (1 + np.max(np.abs(rhs))):
            raise SelfCheckFailure("b(p, c) is not linear in c")
    return L


@dataclass
class InstabilityWitness:
    """A perturbed matrix ``(A1|c)`` and centers ``p`` with every ``b_ij = 0``.

    Arrays are in the pivoted frame; ``rows[l]`` is the original row at
    position ``l``.
    """

    q: np.ndarray
    c: np.ndarray
    p: np.ndarray
    A1: np.ndarray
    residual: float
    flatness: float
    scale: float
    singular_point: dict
    rows: tuple = ()

    @property
    def A_tilde(self) -> np.ndarray:
        return np.vstack([self.A1, self.c])

    def original_order(self):
        """``(A_tilde, p)`` with rows restored to the input order."""
        rows = list(self.rows) or list(range(self.p.shape[0]))
        At = np.empty_like(self.A_tilde)
        pp = np.empty_like(self.p)
        At[rows] = self.A_tilde
        pp[rows] = self.p
        return At, pp

    def to_dict(self):
        At, pp = self.original_order()
        return {
            "q": self.q.tolist(),
            "c": self.c.tolist(),
            "p": self.p.tolist(),
            "A_tilde": self.A_tilde.tolist(),
            "rows": list(self.rows) or list(range(self.p.shape[0])),
            "A_tilde_input_order": At.tolist(),
            "p_input_order": pp.tolist(),
            "residual": self.residual,
            "flatness": self.flatness,
            "scale": self.scale,
            "singular_point": self.singular_point,
        }


def build_witness(p, A1, c, spec: SampleSpec = SampleSpec(), rows=()) -> InstabilityWitness:
    A1 = _leading_block(A1)
    n1 = A1.shape[1]
    c = np.asarray(c, dtype=float)
    p = np.asarray(p, dtype=float)
    At = np.vstack([A1, c])
    G = build_gds(p, At, validate=False)
    L1, L2 = solve_lambda(At)
    phi1 = compose(_h1_fullrank(At, L1, L2).forward, G)
    b, _ = linear_part(ProblemInstance(At, p), L1, L2, phi1)
    flat = check_image_flat(phi1, n1 - 1)
    sp = find_singular_point(G, spec)
    return InstabilityWitness(
        q=p[:n1].copy(),
        c=c.copy(),
        p=p.copy(),
        A1=A1.copy(),
        residual=float(np.max(np.abs(b[n1:]))),
        flatness=flat.max_nonconstant,
        scale=1.0 + G.max_abs_coefficient(),
        singular_point=sp.to_dict(),
        rows=tuple(rows),
    )


def witness_from_psi(q, c, A1, spec: SampleSpec = SampleSpec()) -> InstabilityWitness:
    return build_witness(psi_map(q, c, A1), A1, c, spec)


@dataclass
class DestabilizeReport:
    singular_values: list
    kernel_dim: int
    kernel_tol: float
    rows: list
    witness: InstabilityWitness | None = None
    evidence: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return self.witness is not None

    def to_dict(self):
        return {
            "found": self.found,
            "singular_values": self.singular_values,
            "kernel_dim": self.kernel_dim,
            "kernel_tol": self.kernel_tol,
            "rows": self.rows,
            "witness": None if self.witness is None else self.witness.to_dict(),
            "evidence": self.evidence,
        }


def _best_kernel_vector(V: np.ndarray, seed: int = 0):
    """Unit combination of the kernel basis rows ``V`` maximizing min |entry|."""
    d = V.shape[0]
    if d == 1:
        cands = V
    else:
        pts = [np.eye(d)]
        if d == 2:
            th = np.linspace(0.0, np.pi, 3601)
            pts.append(np.stack([np.cos(th), np.sin(th)], axis=1))
        g = np.random.default_rng(seed).standard_normal((4096, d))
        pts.append(g / np.linalg.norm(g, axis=1, keepdims=True))
        cands = np.vstack(pts) @ V
    cands = cands / np.linalg.norm(cands, axis=1, keepdims=True)
    score = np.min(np.abs(cands), axis=1)
    best = int(np.argmax(score))
    return cands[best], float(score[best])


def find_unstable_perturbation(p, A, spec: SampleSpec = SampleSpec(), kernel_tol: float = KERNEL_TOL,
                               eps_rank: float = EPS_RANK) -> DestabilizeReport:
    """Search ``c`` with ``b(p, c) = 0`` and all entries non-zero.

    Returns a report whose ``witness`` is ``None`` when the kernel of
    ``L_p`` is trivial (or contains no vector without zero entries); the
    singular values of ``L_p`` are the evidence either way.
    """
    A = np.asarray(A, dtype=float)
    p = np.asarray(p, dtype=float)
    n1 = A.shape[1]
    n = n1 - 1
    if A.shape != (2 * n + 1, n1) or p.shape != A.shape:
        raise DimensionMismatch(f"need k = 2n with matching centers; got A {A.shape}, p {p.shape}")
    try:
        pivot = select_pivot(A, "fullrank", eps_rank)
    except RankMismatch as exc:
        raise SingularA1(str(exc)) from exc
    rows = list(pivot.rows)
    Ap, pp = A[rows], p[rows]
    L = build_instability_matrix(pp, Ap)
    s, vt = np.linalg.svd(L)[1:]
    smax = float(s[0]) if s.size else 0.0
    rank = int(np.sum(s > kernel_tol * smax)) if smax > 0 else 0
    kdim = L.shape[1] - rank
    report = DestabilizeReport(s.tolist(), kdim, kernel_tol, rows)
    report.evidence["sigma_min_relative"] = float(s[-1] / smax) if smax > 0 else 0.0
    if kdim == 0:
        report.evidence["reason"] = "L_p has trivial kernel"
        return report
    v, score = _best_kernel_vector(vt[rank:], spec.seed)
    report.evidence["min_abs_entry"] = score
    if score <= MIN_ENTRY:
        report.evidence["reason"] = "kernel contains no vector with all entries non-zero"
        return report
    A2 = Ap[n1:]
    c = v.reshape(n, n1) * (np.linalg.norm(A2) / np.linalg.norm(v))
    idx = np.unravel_index(int(np.argmax(np.abs(A2))), A2.shape)
    if np.sign(c[idx]) != np.sign(A2[idx]):
        c = -c
    report.witness = build_witness(pp, Ap[:n1], c, spec, rows)
    return report


@dataclass
class CertificationReport:
    checks: dict
    details: dict

    @property
    def failures(self) -> list:
        return [name for name, ok in self.checks.items() if not ok]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self):
        return {"passed": self.passed, "checks": self.checks, "failures": self.failures, "details": self.details}


def certify_witness(w: InstabilityWitness, A, spec: SampleSpec = SampleSpec(), strict: bool = True,
                    eps_rank: float = EPS_RANK) -> CertificationReport:
    """Re-verify a witness from scratch.

    Checks: ``b_residual`` (all affine ``b_ij`` vanish), ``flat_image`` (last
    ``n`` components of ``H1 o G`` constant), ``singular_point`` (a point with
    rank-deficient Jacobian exists), ``matrix_hypothesis`` (``(A1|c)`` has
    rank ``n+1``, non-zero entries, and ``A1`` is the leading block of ``A``).
    With ``strict`` a failure raises :class:`CertificationError`.
    """
    A = np.asarray(A, dtype=float)
    n1 = A.shape[1]
    rows = list(w.rows) or list(range(A.shape[0]))
    At = w.A_tilde
    G = build_gds(w.p, At, validate=False)
    scale = 1.0 + G.max_abs_coefficient()
    checks, details = {}, {}

    b = affine_coefficients(w.p, w.A1, w.c)
    details["b_residual"] = float(np.max(np.abs(b)))
    checks["b_residual"] = details["b_residual"] <= RESIDUAL_TOL * scale

    try:
        L1, L2 = solve_lambda(At)
        flat = check_image_flat(compose(_h1_fullrank(At, L1, L2).forward, G), n1 - 1, FLAT_TOL)
        details["flat_image"] = flat.to_dict()
        checks["flat_image"] = flat.flat
    except SingularA1 as exc:
        details["flat_image"] = str(exc)
        checks["flat_image"] = False

    sp = find_singular_point(G, spec, tol=SINGULAR_TOL)
    details["singular_point"] = sp.to_dict()
    checks["singular_point"] = sp.found

    problems = validate_matrix(At)
    if numerical_rank(At, eps_rank) != n1:
        problems.append("rank of (A1|c) is not n+1")
    if not np.allclose(A[rows][:n1], w.A1, rtol=0, atol=0):
        problems.append("A1 of the witness differs from the leading block of A")
    details["matrix_hypothesis"] = problems
    checks["matrix_hypothesis"] = not problems

    report = CertificationReport(checks, details)
    if strict and not report.passed:
        raise CertificationError(report)
    return report
