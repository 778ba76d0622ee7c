"""Sparse polynomial maps with exact-coefficient composition.

A :class:`PolyMap` is a tuple of sparse polynomials in ``n_vars`` variables.
Each polynomial is a dict from exponent tuples to float coefficients.  All
pipeline steps in :mod:`gdsmap.reduction` are carried out by composing maps
and reading coefficients back, so every intermediate form can be compared
coefficient by coefficient.

Maps are treated as immutable; no operation mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from operator import add
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegreeOverflow, DimensionMismatch

Monomial = tuple
Poly = dict

MAX_DEGREE = 4
# canonical form drops |coef| <= DROP_REL * max |coef| of the component
DROP_REL = 1e-12


def _canonical(poly: Mapping, rel: float = DROP_REL) -> dict:
    big = max((abs(c) for c in poly.values()), default=0.0)
    cut = rel * big
    return {e: float(c) for e, c in poly.items() if c != 0.0 and abs(c) > cut}


def _mul(p: Mapping, q: Mapping) -> dict:
    out: dict = {}
    for e1, c1 in p.items():
        for e2, c2 in q.items():
            e = tuple(map(add, e1, e2))
            out[e] = out.get(e, 0.0) + c1 * c2
    return out


def _axpy(out: dict, a: float, p: Mapping) -> None:
    for e, c in p.items():
        out[e] = out.get(e, 0.0) + a * c


def grlex_key(exp: Sequence[int]):
    """Sort key for graded lexicographic order (x0 > x1 > ... within a degree)."""
    return (sum(exp), tuple(-e for e in exp))


class PolyMap:
    """Polynomial map R^n_vars -> R^len(components).

    Parameters
    ----------
    n_vars : int
        Source dimension.
    components : iterable
        One entry per target coordinate.  Each entry is either a mapping
        ``{exponent tuple: coefficient}`` or an iterable of
        ``(exponent, coefficient)`` pairs (repeated exponents are summed).
    max_degree : int
        Construction fails with :class:`DegreeOverflow` above this degree.
    """

    def __init__(self, n_vars: int, components: Iterable, max_degree: int = MAX_DEGREE):
        if n_vars < 0:
            raise DimensionMismatch("n_vars must be non-negative")
        self.n_vars = int(n_vars)
        comps = []
        for raw in components:
            items = raw.items() if isinstance(raw, Mapping) else raw
            poly: dict = {}
            for exp, coef in items:
                exp = tuple(int(e) for e in exp)
                if len(exp) != self.n_vars:
                    raise DimensionMismatch(
                        f"exponent {exp} has length {len(exp)}, expected {self.n_vars}"
                    )
                if any(e < 0 for e in exp):
                    raise ValueError(f"negative exponent in {exp}")
                poly[exp] = poly.get(exp, 0.0) + float(coef)
            comps.append(_canonical(poly))
        self._components = tuple(comps)
        deg = self.degree
        if deg > max_degree:
            raise DegreeOverflow(f"degree {deg} exceeds cap {max_degree}")

    # ---------------------------------------------------------------- basics
    @property
    def components(self) -> tuple:
        return self._components

    @property
    def n_out(self) -> int:
        return len(self._components)

    @cached_property
    def degree(self) -> int:
        return max((sum(e) for p in self._components for e in p), default=0)

    def terms(self, i: int) -> list:
        """Terms of component ``i`` as ``(exp, coef)`` pairs in graded-lex order."""
        return sorted(self._components[i].items(), key=lambda t: grlex_key(t[0]))

    def coefficient(self, component: int, monomial: Sequence[int]) -> float:
        return self._components[component].get(tuple(monomial), 0.0)

    def max_abs_coefficient(self) -> float:
        return max((abs(c) for p in self._components for c in p.values()), default=0.0)

    def __repr__(self):
        return f"PolyMap(n_vars={self.n_vars}, n_out={self.n_out}, degree={self.degree})"

    def __eq__(self, other):
        if not isinstance(other, PolyMap):
            return NotImplemented
        return self.n_vars == other.n_vars and self._components == other._components

    __hash__ = None

    # ---------------------------------------------------------- constructors
    @classmethod
    def identity(cls, n: int) -> "PolyMap":
        return cls.affine(np.eye(n), np.zeros(n))

    @classmethod
    def affine(cls, matrix, offset=None) -> "PolyMap":
        """The map ``x -> matrix @ x + offset``."""
        M = np.atleast_2d(np.asarray(matrix, dtype=float))
        m, n = M.shape
        v = np.zeros(m) if offset is None else np.asarray(offset, dtype=float)
        if v.shape != (m,):
            raise DimensionMismatch("offset length must equal number of matrix rows")
        units = [tuple(int(i == j) for i in range(n)) for j in range(n)]
        zero = (0,) * n
        comps = []
        for r in range(m):
            comps.append([(units[j], M[r, j]) for j in range(n)] + [(zero, v[r])])
        return cls(n, comps)

    @classmethod
    def zeros(cls, n_vars: int, n_out: int) -> "PolyMap":
        return cls(n_vars, [{} for _ in range(n_out)])

    # ------------------------------------------------------------ arithmetic
    def _check_same_shape(self, other: "PolyMap"):
        if (self.n_vars, self.n_out) != (other.n_vars, other.n_out):
            raise DimensionMismatch(
                f"shape ({self.n_vars}->{self.n_out}) vs ({other.n_vars}->{other.n_out})"
            )

    def __add__(self, other: "PolyMap") -> "PolyMap":
        self._check_same_shape(other)
        comps = []
        for p, q in zip(self._components, other._components):
            out = dict(p)
            _axpy(out, 1.0, q)
            comps.append(out)
        return PolyMap(self.n_vars, comps)

    def __sub__(self, other: "PolyMap") -> "PolyMap":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "PolyMap":
        return PolyMap(self.n_vars, [{e: a * c for e, c in p.items()} for p in self._components])

    def coefficient_distance(self, other: "PolyMap") -> float:
        """Max absolute coefficient difference, without any dropping of small terms."""
        self._check_same_shape(other)
        worst = 0.0
        for p, q in zip(self._components, other._components):
            for e in set(p) | set(q):
                worst = max(worst, abs(p.get(e, 0.0) - q.get(e, 0.0)))
        return worst

    def chop(self, tol: float) -> "PolyMap":
        """Drop terms with ``|coef| <= tol * max(1, max |coef| of the map)``."""
        cut = tol * max(1.0, self.max_abs_coefficient())
        return PolyMap(
            self.n_vars, [{e: c for e, c in p.items() if abs(c) > cut} for p in self._components]
        )

    def select(self, indices: Sequence[int]) -> "PolyMap":
        return PolyMap(self.n_vars, [self._components[i] for i in indices])

    def compose(self, inner: "PolyMap") -> "PolyMap":
        return compose(self, inner)

    def derivative(self, var: int) -> "PolyMap":
        comps = []
        for p in self._components:
            out = {}
            for e, c in p.items():
                if e[var]:
                    d = list(e)
                    d[var] -= 1
                    out[tuple(d)] = c * e[var]
            comps.append(out)
        return PolyMap(self.n_vars, comps)

    def linear_part(self):
        """Return ``(M, v)`` with the degree-1 coefficients and constants."""
        n = self.n_vars
        M = np.zeros((self.n_out, n))
        v = np.zeros(self.n_out)
        zero = (0,) * n
        for i, p in enumerate(self._components):
            v[i] = p.get(zero, 0.0)
            for j in range(n):
                M[i, j] = p.get(tuple(int(k == j) for k in range(n)), 0.0)
        return M, v

    # ------------------------------------------------------------ evaluation
    @cached_property
    def _arrays(self):
        """Distinct exponents ``E`` (rows) and coefficient matrix ``C`` with ``f(x) = mono(x) @ C``."""
        exps = sorted({e for p in self._components for e in p}, key=grlex_key)
        index = {e: k for k, e in enumerate(exps)}
        E = np.array(exps, dtype=np.int64).reshape(len(exps), self.n_vars)
        C = np.zeros((len(exps), self.n_out))
        for i, p in enumerate(self._components):
            for e, c in p.items():
                C[index[e], i] = c
        return E, C

    def _check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_vars:
            raise DimensionMismatch(f"point has dimension {x.shape[-1]}, expected {self.n_vars}")
        return x

    def eval_many(self, X) -> np.ndarray:
        """Evaluate at each row of ``X`` (shape ``(N, n_vars)``); returns ``(N, n_out)``."""
        X = self._check_point(np.atleast_2d(X))
        E, C = self._arrays
        if not E.shape[0]:
            return np.zeros((X.shape[0], self.n_out))
        # powers[d, :, j] = X[:, j] ** d
        powers = np.ones((int(E.max(initial=0)) + 1,) + X.shape)
        for d in range(1, powers.shape[0]):
            powers[d] = powers[d - 1] * X
        mono = np.ones((X.shape[0], E.shape[0]))
        for j in range(self.n_vars):
            mono *= powers[E[:, j], :, j].T
        return mono @ C

    def eval(self, x) -> np.ndarray:
        x = self._check_point(x)
        if x.ndim != 1:
            raise DimensionMismatch("eval expects a single point; use eval_many")
        return self.eval_many(x[None, :])[0]

    __call__ = eval

    @cached_property
    def _partials(self):
        return [self.derivative(j) for j in range(self.n_vars)]

    def jacobian_many(self, X) -> np.ndarray:
        X = self._check_point(np.atleast_2d(X))
        J = np.zeros((X.shape[0], self.n_out, self.n_vars))
        for j, d in enumerate(self._partials):
            J[:, :, j] = d.eval_many(X)
        return J

    def jacobian(self, x) -> np.ndarray:
        x = self._check_point(x)
        if x.ndim != 1:
            raise DimensionMismatch("jacobian expects a single point; use jacobian_many")
        return self.jacobian_many(x[None, :])[0]

    # --------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        return {
            "n_vars": self.n_vars,
            "components": [
                [{"exp": list(e), "coef": c} for e, c in self.terms(i)] for i in range(self.n_out)
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolyMap":
        return cls(
            int(data["n_vars"]),
            [[(t["exp"], t["coef"]) for t in comp] for comp in data["components"]],
        )


def compose(outer: PolyMap, inner: PolyMap) -> PolyMap:
    """Coefficient-level composition ``outer o inner``.

    Raises :class:`DimensionMismatch` unless ``outer.n_vars == inner.n_out``;
    the result must have degree <= 4 after canonicalization.
    """
    if outer.n_vars != inner.n_out:
        raise DimensionMismatch(
            f"outer expects {outer.n_vars} inputs, inner has {inner.n_out} outputs"
        )
    n = inner.n_vars
    one = {(0,) * n: 1.0}
    powers: dict = {}

    def power(k, e):
        if e == 0:
            return one
        key = (k, e)
        if key not in powers:
            powers[key] = _mul(power(k, e - 1), inner.components[k])
        return powers[key]

    comps = []
    for p in outer.components:
        out: dict = {}
        for exp, coef in p.items():
            term = one
            for k, e in enumerate(exp):
                if e:
                    term = _mul(term, power(k, e))
            _axpy(out, coef, term)
        comps.append(out)
    return PolyMap(n, comps)


def compose_all(maps: Sequence[PolyMap]) -> PolyMap:
    """``maps[0] o maps[1] o ... o maps[-1]``."""
    result = maps[-1]
    for m in reversed(maps[:-1]):
        result = compose(m, result)
    return result


class TransformKind(str, Enum):
    SOURCE_AFFINE = "SourceAffine"
    TARGET_AFFINE = "TargetAffine"
    TARGET_SHEAR = "TargetShear"


@dataclass(frozen=True)
class ElementaryTransform:
    """An invertible coordinate change stored together with its inverse."""

    kind: TransformKind
    forward: PolyMap
    inverse: PolyMap
    label: str

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        f, g = self.forward, self.inverse
        if not (f.n_vars == f.n_out == g.n_vars == g.n_out):
            raise DimensionMismatch(f"transform {self.label} must be square with matching inverse")
        cap = 2 if self.kind is TransformKind.TARGET_SHEAR else 1
        if f.degree > cap or g.degree > cap:
            raise DegreeOverflow(f"{self.kind.value} {self.label} has degree above {cap}")

    @property
    def dim(self) -> int:
        return self.forward.n_vars

    @property
    def on_source(self) -> bool:
        return self.kind is TransformKind.SOURCE_AFFINE

    @classmethod
    def affine(cls, kind, matrix, offset, label, inverse_matrix=None) -> "ElementaryTransform":
        """Affine transform ``x -> M x + v``; the inverse is ``M^-1 (y - v)``."""
        M = np.asarray(matrix, dtype=float)
        v = np.zeros(M.shape[0]) if offset is None else np.asarray(offset, dtype=float)
        Minv = np.linalg.inv(M) if inverse_matrix is None else np.asarray(inverse_matrix, dtype=float)
        return cls(kind, PolyMap.affine(M, v), PolyMap.affine(Minv, -Minv @ v), label)

    @classmethod
    def translation(cls, kind, offset, label) -> "ElementaryTransform":
        v = np.asarray(offset, dtype=float)
        eye = np.eye(v.size)
        return cls.affine(kind, eye, v, label, inverse_matrix=eye)

    def roundtrip_coefficient_error(self) -> float:
        ident = PolyMap.identity(self.dim)
        a = compose(self.forward, self.inverse).coefficient_distance(ident)
        b = compose(self.inverse, self.forward).coefficient_distance(ident)
        return max(a, b)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "label": self.label,
            "forward": self.forward.to_dict(),
            "inverse": self.inverse.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ElementaryTransform":
        return cls(
            TransformKind(data["kind"]),
            PolyMap.from_dict(data["forward"]),
            PolyMap.from_dict(data["inverse"]),
            data["label"],
        )


@dataclass(frozen=True)
class DiffeoChain:
    """Ordered transforms on one side of a map.

    Transforms are listed in the order they are applied during the
    reduction.  A target chain ``[H1, H2, ...]`` composes to
    ``... o H2 o H1``; a source chain ``[h1, h2, ...]`` composes to
    ``h1 o h2 o ...``, so that ``target o G o source`` is the reduced map.
    """

    side: str
    dim: int
    transforms: tuple = ()

    def __post_init__(self):
        if self.side not in ("source", "target"):
            raise ValueError("side must be 'source' or 'target'")
        for t in self.transforms:
            if t.dim != self.dim or t.on_source != (self.side == "source"):
                raise DimensionMismatch(f"transform {t.label} does not fit a {self.side} chain")

    def append(self, t: ElementaryTransform) -> "DiffeoChain":
        return DiffeoChain(self.side, self.dim, self.transforms + (t,))

    def compose(self) -> PolyMap:
        if not self.transforms:
            return PolyMap.identity(self.dim)
        fwd = [t.forward for t in self.transforms]
        return compose_all(fwd[::-1] if self.side == "target" else fwd)

    def compose_inverse(self) -> PolyMap:
        if not self.transforms:
            return PolyMap.identity(self.dim)
        inv = [t.inverse for t in self.transforms]
        return compose_all(inv if self.side == "target" else inv[::-1])

    @property
    def labels(self) -> list:
        return [t.label for t in self.transforms]

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "dim": self.dim,
            "transforms": [t.to_dict() for t in self.transforms],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DiffeoChain":
        return cls(
            data["side"],
            int(data["dim"]),
            tuple(ElementaryTransform.from_dict(t) for t in data["transforms"]),
        )


def apply_chains(target: DiffeoChain, f: PolyMap, source: DiffeoChain, order: Sequence[str] | None = None) -> PolyMap:
    """``compose(target) o f o compose(source)``, one transform at a time.

    ``order`` lists the side ("target" or "source") of each step; the next
    unused transform of that side is applied.  The default applies the
    whole target chain first.  Pre-composing a chain on its own is avoided:
    its coefficients can be orders of magnitude larger than those of the
    reduced map, and canonical chopping then discards genuine terms.
    """
    if order is None:
        order = ["target"] * len(target.transforms) + ["source"] * len(source.transforms)
    order = list(order)
    if order.count("target") != len(target.transforms) or order.count("source") != len(source.transforms):
        raise DimensionMismatch("application order does not match the chain lengths")
    it = {"target": iter(target.transforms), "source": iter(source.transforms)}
    for side in order:
        t = next(it[side])
        f = compose(t.forward, f) if side == "target" else compose(f, t.forward)
    return f
