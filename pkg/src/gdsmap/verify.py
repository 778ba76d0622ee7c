"""Independent numerical oracles: sampled equality, round trips, singular points, flatness.

Every check takes a :class:`SampleSpec`; the sample stream is a function of
``(seed, index)`` only, so reports are reproducible bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConditioningWarning, DimensionMismatch
from .polymap import ElementaryTransform, PolyMap

COEF_TOL = 1e-9
SINGULAR_TOL = 1e-8
ROUNDTRIP_TOL = 1e-10
FLAT_TOL = 1e-10
COND_LIMIT = 1e6


@dataclass(frozen=True)
class SampleSpec:
    half_width: float = 2.0
    count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("sample count must be >= 1")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    def points(self, dim: int) -> np.ndarray:
        return _box_samples(self.seed, self.count, dim, self.half_width)

    def rng(self, stream: int) -> np.random.Generator:
        """Generator for an auxiliary stream (lines, projections) under this seed."""
        return np.random.default_rng([self.seed, stream])


@lru_cache(maxsize=64)
def _box_samples(seed, count, dim, half_width):
    # row i depends only on (seed, i) for a fixed dimension
    X = np.random.default_rng([seed, 0]).uniform(-half_width, half_width, size=(count, dim))
    X.setflags(write=False)
    return X


def _report(obj) -> dict:
    return asdict(obj)


@dataclass
class EqualityReport:
    max_relative_deviation: float
    coefficient_distance: float
    samples: int
    tol: float
    equal: bool

    to_dict = _report


def check_map_equality(f: PolyMap, g: PolyMap, spec: SampleSpec = SampleSpec(), tol: float = COEF_TOL):
    """Compare ``f`` and ``g`` on samples and by coefficients.

    The sampled deviation is ``max |f(x) - g(x)| / (1 + |g(x)|)``.
    """
    if (f.n_vars, f.n_out) != (g.n_vars, g.n_out):
        raise DimensionMismatch("maps have different shapes")
    X = spec.points(f.n_vars)
    fx, gx = f.eval_many(X), g.eval_many(X)
    dev = np.linalg.norm(fx - gx, axis=1) / (1.0 + np.linalg.norm(gx, axis=1))
    worst = float(np.max(dev))
    coef = f.coefficient_distance(g)
    scale = 1.0 + g.max_abs_coefficient()
    return EqualityReport(worst, coef, spec.count, tol, worst <= tol and coef <= tol * scale)


@dataclass
class RoundtripReport:
    label: str
    max_error: float
    coefficient_error: float
    condition: float
    tol: float
    ok: bool
    warnings: list = field(default_factory=list)

    to_dict = _report


def check_roundtrip(t: ElementaryTransform, spec: SampleSpec = SampleSpec(), tol: float = ROUNDTRIP_TOL,
                    cond_limit: float = COND_LIMIT):
    """Max relative round-trip error of ``t`` in both directions.

    A :class:`ConditioningWarning` is emitted when the forward Jacobian has
    condition number above ``cond_limit`` somewhere on the samples.
    """
    X = spec.points(t.dim)
    scale = 1.0 + np.linalg.norm(X, axis=1)
    e1 = np.linalg.norm(t.inverse.eval_many(t.forward.eval_many(X)) - X, axis=1) / scale
    e2 = np.linalg.norm(t.forward.eval_many(t.inverse.eval_many(X)) - X, axis=1) / scale
    err = float(max(e1.max(), e2.max()))
    if t.forward.degree <= 1:
        cond = float(np.linalg.cond(t.forward.linear_part()[0]))
    else:
        cond = float(np.max(np.linalg.cond(t.forward.jacobian_many(X))))
    notes = []
    if not np.isfinite(cond) or cond > cond_limit:
        msg = f"{t.label}: condition number {cond:.3g} exceeds {cond_limit:.0e}"
        warnings.warn(msg, ConditioningWarning, stacklevel=2)
        notes.append(msg)
    return RoundtripReport(t.label, err, t.roundtrip_coefficient_error(), cond, tol, err <= tol, notes)


@dataclass
class SingularPointReport:
    found: bool
    point: list | None
    sigma_min: float | None
    sigma_max: float | None
    tol: float
    lines_tried: int
    minor: str | None = None
    method: str | None = None

    to_dict = _report


def _bisect(g, lo, hi, glo, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        gm = g(mid)
        if gm == 0.0:
            return mid
        if np.sign(gm) == np.sign(glo):
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigma(f: PolyMap, x):
    s = np.linalg.svd(f.jacobian(x), compute_uv=False)
    return float(s[-1]), float(s[0])


def _polish(f: PolyMap, x, iters: int = 60):
    """Gauss-Newton on ``J(x) v = 0, |v|^2 = 1`` started at ``x``.

    ``v`` starts as the right singular vector of the smallest singular
    value.  The system is square when ``n_out = 2 n_vars - 1``, the case of
    isolated singular points.
    """
    n1 = f.n_vars
    x = np.array(x, dtype=float)
    v = np.linalg.svd(f.jacobian(x))[2][-1]
    second = f._partials
    for _ in range(iters):
        J = f.jacobian(x)
        T = np.stack([d.jacobian(x) for d in second], axis=1)  # T[i, j, l] = d2 f_i / dx_j dx_l
        F = np.r_[J @ v, 0.5 * (v @ v - 1.0)]
        D = np.zeros((F.size, 2 * n1))
        D[:-1, :n1] = np.einsum("ijl,j->il", T, v)
        D[:-1, n1:] = J
        D[-1, n1:] = v
        step = np.linalg.lstsq(D, -F, rcond=None)[0]
        x = x + step[:n1]
        v = v + step[n1:]
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e8:
            return None
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            break
    return x


def find_singular_point(f: PolyMap, spec: SampleSpec = SampleSpec(), tol: float = SINGULAR_TOL,
                        lines: int = 50, grid: int = 129):
    """Search for ``x*`` with ``sigma_min(Jf(x*)) <= tol * sigma_max(Jf(x*))``.

    Along random lines ``x0 + t v`` the determinant of a square
    ``(n+1) x (n+1)`` minor of ``Jf`` is a polynomial in ``t``; each sign
    change is refined by bisection and the candidate kept if the full
    Jacobian is numerically rank deficient there.  The leading rows are
    tried first, then a fixed random combination of all rows (the leading
    minor can have only even-order zeros, e.g. ``2 x0^2`` for the umbrella
    with ``n = 1``).  Candidates that fail, or the line's base point when
    there is no sign change, seed a Gauss-Newton polish: a singular point
    of an umbrella-type map is isolated, so no line meets it.
    """
    n1, m = f.n_vars, f.n_out
    if m < n1:
        raise DimensionMismatch(f"need at least {n1} components, map has {m}")
    R = spec.rng(2).standard_normal((n1, m))
    minors = [("leading", lambda J: J[..., :n1, :])]
    if m > n1:
        minors.append(("projected", lambda J: R @ J))
    line_rng = spec.rng(1)
    span = 2.0 * spec.half_width
    ts = np.linspace(-span, span, grid)

    def accept(x, line, name, method):
        smin, smax = _sigma(f, x)
        if smax == 0.0 or smin <= tol * smax:
            return SingularPointReport(True, x.tolist(), smin, smax, tol, line, name, method)
        return None

    for line in range(1, lines + 1):
        x0 = line_rng.uniform(-spec.half_width, spec.half_width, n1)
        v = line_rng.standard_normal(n1)
        v /= np.linalg.norm(v)
        J = f.jacobian_many(x0[None, :] + ts[:, None] * v[None, :])
        seeds = []
        for name, minor in minors:
            d = np.linalg.det(minor(J))

            def g(t, minor=minor):
                return float(np.linalg.det(minor(f.jacobian(x0 + t * v))))

            for i in range(grid - 1):
                if d[i] == 0.0:
                    t = ts[i]
                elif np.sign(d[i]) != np.sign(d[i + 1]) and d[i + 1] != 0.0:
                    t = _bisect(g, ts[i], ts[i + 1], d[i])
                else:
                    continue
                x = x0 + t * v
                rep = accept(x, line, name, "bisection")
                if rep is not None:
                    return rep
                if len(seeds) < 3:
                    seeds.append((name, x))
        if not seeds:
            seeds.append((None, x0))
        for name, x in seeds:
            y = _polish(f, x)
            if y is not None:
                rep = accept(y, line, name, "newton")
                if rep is not None:
                    return rep
    return SingularPointReport(False, None, None, None, tol, lines, None, None)


@dataclass
class FlatReport:
    components: list
    max_nonconstant: float
    scale: float
    tol: float
    flat: bool

    to_dict = _report


def check_image_flat(f: PolyMap, last_m: int, tol: float = FLAT_TOL):
    """Are the last ``last_m`` components constant (up to ``tol * scale``)?"""
    if not 0 <= last_m <= f.n_out:
        raise DimensionMismatch(f"last_m={last_m} out of range for {f.n_out} components")
    idx = list(range(f.n_out - last_m, f.n_out))
    worst = 0.0
    for i in idx:
        for e, c in f.components[i].items():
            if any(e):
                worst = max(worst, abs(c))
    scale = 1.0 + f.max_abs_coefficient()
    return FlatReport(idx, worst, scale, tol, worst <= tol * scale)


def jacobian_finite_difference(f: PolyMap, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; an oracle independent of symbolic differentiation."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((f.eval(x + e) - f.eval(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def min_relative_singular_value(f: PolyMap, spec: SampleSpec = SampleSpec()) -> float:
    """Smallest ``sigma_min / sigma_max`` of ``Jf`` over the sample points."""
    s = np.linalg.svd(f.jacobian_many(spec.points(f.n_vars)), compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s[:, 0] > 0, s[:, -1] / s[:, 0], 0.0)
    return float(ratio.min())
