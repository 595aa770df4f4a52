"""Test functions on X with tracked Hoelder norms, fiber projections, Haar
quadrature and Wasserstein lower bounds.

Conventions
-----------
* ``H_a`` is the set of f with ``f(z x) = chi_a(z) f(x)`` for z in Z.
* ``U*(g) f (x) = f(g x)``, so that ``∫ f d(g_* nu) = ∫ U*(g) f d nu``.
* ``F_a f (x) = ∫_S chi_a(z) f(z^{-1} x) dz`` lands in ``H_a``.

Every node carries ``alpha`` and ``norm_bound``, an upper bound on
``||f||_inf + omega_alpha(f)`` for the right-invariant chart distance of
:mod:`nilwalk.nilgroup`.  Central translations are isometries of that
distance, so the operators ``F_a`` and Fejer smoothing never increase the
bound.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .affine import AffineMap, apply_np, lipschitz_upper, theta_Z
from .nilgroup import (
    CentralSubgroupSpec,
    NilGroupSchema,
    NilmanifoldPoint,
    center,
    diameter_bound,
)

TWO_PI = 2 * math.pi
GOLDEN = (math.sqrt(5) - 1) / 2


def e(t):
    return np.exp(2j * np.pi * t)


def _as_points(schema: NilGroupSchema, x) -> np.ndarray:
    if isinstance(x, NilmanifoldPoint):
        return x.as_array()[None]
    return np.atleast_2d(np.asarray(x, dtype=float))


def _interp(sup: float, holder_p: float, p: float, alpha: float) -> float:
    """omega_alpha <= (2 sup)^(1 - alpha/p) * omega_p^(alpha/p)."""
    if holder_p == 0 or sup == 0:
        return 0.0
    r = alpha / p
    return (2 * sup) ** (1 - r) * holder_p ** r


def _beta_norm(schema: NilGroupSchema) -> float:
    if schema.c == 0:
        return 0.0
    return float(math.sqrt(sum(np.linalg.norm(t.astype(float), 2) ** 2 for t in schema.beta)))


def _chart_factor(schema: NilGroupSchema, width: float) -> float:
    """Bound on |change of the Z coordinate| per unit of distance for a term
    of a periodized leaf whose base profile has half-width ``width``."""
    D = diameter_bound(schema)
    return 1.0 + _beta_norm(schema) * (1.5 * D + math.sqrt(schema.k) * (3 + width))


@functools.lru_cache(maxsize=4096)
def profile_hat(xi: float, width: float, p: float) -> float:
    """∫ rho(s) e(-xi s) ds for rho(s) = max(0, 1 - (|s|/w)^p) (real, even)."""
    f = lambda s: 1.0 - (s / width) ** p
    if xi == 0:
        return 2 * integrate.quad(f, 0, width)[0]
    val = integrate.quad(f, 0, width, weight="cos", wvar=TWO_PI * abs(xi), limit=200)[0]
    return 2 * val


def profile(s: np.ndarray, width: float, p: float) -> np.ndarray:
    return np.clip(1.0 - (np.abs(s) / width) ** p, 0.0, None)


def periodic_profile(s: np.ndarray, width: float, p: float, period: float) -> np.ndarray:
    s = (s + period / 2) % period - period / 2
    return profile(s, width, p)


class TestFunction:
    __test__ = False  # not a pytest class

    schema: NilGroupSchema
    alpha: float
    norm_bound: float
    Z: CentralSubgroupSpec | None
    freq: tuple | None  # known a with f in H_a, else None

    def eval_np(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.eval_np(_as_points(self.schema, x))

    # combinator sugar
    def pullback(self, g: AffineMap) -> "TestFunction":
        return Pullback(self, g)

    def __mul__(self, other: "TestFunction") -> "TestFunction":
        return Product(self, other)

    def conj(self) -> "TestFunction":
        return Conjugate(self)

    def abs2(self) -> "TestFunction":
        return Product(self, Conjugate(self))


def _default_Z(schema):
    return center(schema) if schema.c else None


@dataclass(eq=False)
class Constant(TestFunction):
    schema: NilGroupSchema
    value: complex = 1.0
    alpha: float = 1.0
    Z: CentralSubgroupSpec | None = None

    def __post_init__(self):
        self.norm_bound = abs(self.value)
        self.freq = (0,) * self.Z.dim if self.Z is not None else None

    def eval_np(self, pts):
        return np.full(len(pts), complex(self.value))


@dataclass(eq=False)
class TorusCharacter(TestFunction):
    """x -> e(<a, x_base>) on the maximal torus factor (all coordinates for a torus)."""

    schema: NilGroupSchema
    a: tuple
    alpha: float = 1.0
    Z: CentralSubgroupSpec | None = None

    def __post_init__(self):
        self.a = tuple(int(v) for v in self.a)
        if len(self.a) != self.schema.k:
            raise ValueError("frequency has wrong length")
        lip = TWO_PI * math.sqrt(sum(v * v for v in self.a))
        self.norm_bound = 1.0 + _interp(1.0, lip, 1.0, self.alpha)
        if self.Z is None:
            self.freq = None
        elif self.schema.c:
            self.freq = (0,) * self.Z.dim
        else:
            self.freq = tuple(self.a[i] for i in self.Z.indices)

    def eval_np(self, pts):
        return e(pts[:, :self.schema.k] @ np.asarray(self.a, dtype=float))


def _rest_shifts(schema, rest):
    k = len(rest)
    return np.array(list(itertools.product((-1, 0, 1), repeat=k)), dtype=float).reshape(-1, k)


@dataclass(eq=False)
class FiberMode(TestFunction):
    """Sum over n in Z^rest of psi(x_rest - c + n) e(<a, s * Zcoord(x n)>).

    Continuous, in H_a, and right-Lambda-invariant.  ``psi`` is a product of
    profiles ``max(0, 1 - (|u|/w)^p)`` with w < 1/2.  For a = 0 it is a bump
    pulled back from Y.
    """

    schema: NilGroupSchema
    Z: CentralSubgroupSpec
    a: tuple
    center: tuple
    width: float = 0.25
    p: float = 1.0
    alpha: float = 1.0
    amplitude: complex = 1.0

    def __post_init__(self):
        self.a = tuple(int(v) for v in self.a)
        if len(self.a) != self.Z.dim:
            raise ValueError("frequency has wrong length")
        if not 0 < self.width < 0.5:
            raise ValueError("width must lie in (0, 1/2)")
        if self.alpha > self.p:
            raise ValueError("alpha cannot exceed the profile exponent")
        self.freq = self.a
        rest = self.Z.rest
        self._rest = list(rest)
        self._z = list(self.Z.indices)
        self._scale = self.Z.scale
        self._shifts = _rest_shifts(self.schema, rest)
        kr = len(rest)
        amax = float(np.linalg.norm(np.asarray(self.a, float) * self._scale)) if self.a else 0.0
        holder = kr ** (1 - self.p / 2) / self.width ** self.p if kr else 0.0
        if amax:
            phase_lip = TWO_PI * amax * _chart_factor(self.schema, self.width)
            holder += 2 ** (1 - self.p) * phase_lip ** self.p
        holder *= 2  # at most one active term per point
        amp = abs(self.amplitude)
        self.norm_bound = amp * (1.0 + _interp(1.0, holder, self.p, self.alpha))

    def eval_np(self, pts):
        s = self.schema
        pts = s.reduce_np(pts)  # the shift stencil assumes box representatives
        out = np.zeros(len(pts), dtype=complex)
        c = np.asarray(self.center, dtype=float)
        freq = np.asarray(self.a, dtype=float) * self._scale
        for sh in self._shifts:
            lam = np.zeros(s.n)
            lam[self._rest] = sh
            moved = s.mul_np(pts, np.broadcast_to(lam, pts.shape)) if s.c else pts + lam
            u = moved[:, self._rest] - c
            w = np.prod(profile(u, self.width, self.p), axis=1) if self._rest else np.ones(len(pts))
            if not np.any(w):
                continue
            ph = e(moved[:, self._z] @ freq) if self._z else 1.0
            out += w * ph
        return self.amplitude * out


@dataclass(eq=False)
class Bump(TestFunction):
    """Periodized product bump centred at ``center`` (chart coordinates).

    Base coordinates use half-width ``width``; central coordinates use
    ``zwidth`` (< 1/(2q)) and are periodized with period 1/q.  The profile
    exponent ``p`` fixes the Hoelder regularity.
    """

    schema: NilGroupSchema
    center: tuple
    width: float = 0.25
    zwidth: float | None = None
    p: float = 1.0
    alpha: float = 1.0
    Z: CentralSubgroupSpec | None = None

    def __post_init__(self):
        s = self.schema
        if self.zwidth is None:
            self.zwidth = self.width / s.q
        if self.alpha > self.p:
            raise ValueError("alpha cannot exceed the profile exponent")
        if self.Z is None:
            self.Z = _default_Z(s)
        self.freq = None
        self._shifts = _rest_shifts(s, range(s.k))
        k, c = s.k, s.c
        holder = k ** (1 - self.p / 2) / self.width ** self.p
        if c:
            holder += 2 * c ** (1 - self.p / 2) * _chart_factor(s, self.width) ** self.p / self.zwidth ** self.p
        holder *= 2
        self.norm_bound = 1.0 + _interp(1.0, holder, self.p, self.alpha)

    def _widths(self):
        s = self.schema
        return [self.width] * s.k + [self.zwidth] * s.c

    def eval_np(self, pts):
        s = self.schema
        k = s.k
        pts = s.reduce_np(pts)
        c = np.asarray(self.center, dtype=float)
        out = np.zeros(len(pts))
        for sh in self._shifts:
            lam = np.concatenate([sh, np.zeros(s.c)])
            moved = s.mul_np(pts, np.broadcast_to(lam, pts.shape)) if s.c else pts + lam
            w = np.prod(profile(moved[:, :k] - c[:k], self.width, self.p), axis=1)
            if s.c:
                w = w * np.prod(periodic_profile(moved[:, k:] - c[k:], self.zwidth, self.p, 1.0 / s.q), axis=1)
            out += w
        return out.astype(complex)

    def fiber_coefficient(self, a: Sequence[int]) -> tuple[complex, tuple, float]:
        """F_a(self) = amp * FiberMode(a, center_rest, width_rest); returns amp and rest data."""
        Z = self.Z
        widths = self._widths()
        c = np.asarray(self.center, dtype=float)
        amp = 1.0 + 0j
        for ai, zi, sc in zip(a, Z.indices, Z.scale):
            period = 1.0 / sc
            amp *= profile_hat(float(ai * sc), widths[zi], self.p) / period
            amp *= e(-ai * sc * c[zi])
        rest_w = {widths[i] for i in Z.rest}
        if len(rest_w) > 1:
            raise ValueError("closed form needs equal widths on the rest coordinates")
        return amp, tuple(c[i] for i in Z.rest), (rest_w.pop() if rest_w else self.width)


@dataclass(eq=False)
class Pullback(TestFunction):
    f: TestFunction
    g: AffineMap

    def __post_init__(self):
        self.schema, self.alpha, self.Z = self.f.schema, self.f.alpha, self.f.Z
        self.norm_bound = lipschitz_upper(self.g) ** self.alpha * self.f.norm_bound
        if self.f.freq is not None and self.Z is not None and self.Z.dim:
            E = np.array(theta_Z(self.g.aut, self.Z), dtype=np.int64)
            self.freq = tuple(int(v) for v in E.T @ np.asarray(self.f.freq, dtype=np.int64))
        else:
            self.freq = self.f.freq

    def eval_np(self, pts):
        return self.f.eval_np(apply_np(self.g, pts))


@dataclass(eq=False)
class Product(TestFunction):
    f: TestFunction
    h: TestFunction

    def __post_init__(self):
        self.schema = self.f.schema
        self.alpha = min(self.f.alpha, self.h.alpha)
        self.Z = self.f.Z
        self.norm_bound = self.f.norm_bound * self.h.norm_bound
        if self.f.freq is not None and self.h.freq is not None:
            self.freq = tuple(a + b for a, b in zip(self.f.freq, self.h.freq))
        else:
            self.freq = None

    def eval_np(self, pts):
        return self.f.eval_np(pts) * self.h.eval_np(pts)


@dataclass(eq=False)
class Conjugate(TestFunction):
    f: TestFunction

    def __post_init__(self):
        self.schema, self.alpha, self.Z = self.f.schema, self.f.alpha, self.f.Z
        self.norm_bound = self.f.norm_bound
        self.freq = None if self.f.freq is None else tuple(-v for v in self.f.freq)

    def eval_np(self, pts):
        return np.conj(self.f.eval_np(pts))


@dataclass(eq=False)
class Combination(TestFunction):
    """sum_i c_i f_i; a convex average when the c_i are weights."""

    terms: list  # list of (coefficient, TestFunction)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("empty combination")
        fs = [f for _, f in self.terms]
        self.schema, self.Z = fs[0].schema, fs[0].Z
        self.alpha = min(f.alpha for f in fs)
        self.norm_bound = math.fsum(abs(c) * f.norm_bound for c, f in self.terms)
        freqs = {f.freq for f in fs}
        self.freq = freqs.pop() if len(freqs) == 1 else None

    def eval_np(self, pts):
        out = np.zeros(len(pts), dtype=complex)
        for c, f in self.terms:
            out += complex(c) * f.eval_np(pts)
        return out


def average(pairs) -> Combination:
    """Convex average; pairs of (weight, function)."""
    return Combination([(float(w), f) for w, f in pairs])


@dataclass(eq=False)
class Zero(TestFunction):
    schema: NilGroupSchema
    Z: CentralSubgroupSpec | None
    freq: tuple | None = None
    alpha: float = 1.0

    def __post_init__(self):
        self.norm_bound = 0.0

    def eval_np(self, pts):
        return np.zeros(len(pts), dtype=complex)


@dataclass(eq=False)
class FiberQuadrature(TestFunction):
    """F_a f by midpoint quadrature over the fiber torus S (general nodes)."""

    f: TestFunction
    a: tuple
    points: int = 64

    def __post_init__(self):
        self.schema, self.alpha, self.Z = self.f.schema, self.f.alpha, self.f.Z
        self.norm_bound = self.f.norm_bound
        self.freq = tuple(self.a)

    def eval_np(self, pts):
        s, Z = self.schema, self.Z
        M = self.points
        grid = (np.arange(M) + 0.5) / M
        out = np.zeros(len(pts), dtype=complex)
        weight = 1.0 / M ** Z.dim
        for t in itertools.product(grid, repeat=Z.dim):
            t = np.asarray(t)
            z = np.zeros(s.n)
            z[list(Z.indices)] = t / Z.scale
            zinv = s.inv_np(z[None])[0]
            moved = s.mul_np(np.broadcast_to(zinv, pts.shape), pts)
            out += weight * e(float(np.dot(self.a, t))) * self.f.eval_np(moved)
        return out


def fiber_project(f: TestFunction, a: Sequence[int], points: int = 64) -> TestFunction:
    """F_a f with a closed form on leaves and linear combinations."""
    a = tuple(int(v) for v in a)
    Z = f.Z
    if Z is None:
        raise ValueError("function has no central fiber attached")
    if f.freq is not None:
        return f if f.freq == a else Zero(f.schema, Z, a, f.alpha)
    if isinstance(f, Bump):
        amp, c_rest, w = f.fiber_coefficient(a)
        if abs(amp) < 1e-300:
            return Zero(f.schema, Z, a, f.alpha)
        out = FiberMode(f.schema, Z, a, c_rest, w, f.p, f.alpha, amplitude=amp)
        out.norm_bound = min(out.norm_bound, f.norm_bound)
        return out
    if isinstance(f, Combination):
        parts = [(c, fiber_project(g, a, points)) for c, g in f.terms]
        out = Combination(parts)
        out.freq = a
        out.norm_bound = min(out.norm_bound, f.norm_bound)
        return out
    return FiberQuadrature(f, a, points)


def fejer_weights(N: int, d: int):
    rng = range(-N + 1, N)
    for a in itertools.product(rng, repeat=d):
        w = math.prod(1 - abs(v) / N for v in a)
        if w > 0:
            yield a, w


def fejer_kernel(t, N: int):
    """(1/N) (sin(N pi t) / sin(pi t))^2 with the removable singularity filled."""
    t = np.asarray(t, dtype=float)
    s = np.sin(np.pi * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.sin(N * np.pi * t) ** 2 / (N * s * s)
    return np.where(np.abs(s) < 1e-12, float(N), val)


@dataclass(eq=False)
class Fejer(TestFunction):
    f: TestFunction
    N: int
    points: int = 64

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        self.schema, self.alpha, self.Z = self.f.schema, self.f.alpha, self.f.Z
        self.norm_bound = self.f.norm_bound
        self.freq = (0,) * self.Z.dim if self.N == 1 else None
        self.terms = [(w, fiber_project(self.f, a, self.points)) for a, w in fejer_weights(self.N, self.Z.dim)]

    def eval_np(self, pts):
        out = np.zeros(len(pts), dtype=complex)
        for w, g in self.terms:
            out += w * g.eval_np(pts)
        return out


def fejer(f: TestFunction, N: int) -> TestFunction:
    return Fejer(f, N)


def evaluate(f: TestFunction, x) -> complex | np.ndarray:
    vals = f(x)
    return complex(vals[0]) if isinstance(x, NilmanifoldPoint) else vals


@dataclass
class Quadrature:
    value: complex
    error: float
    converged: bool
    resolution: int


def _box_grid(schema, res, coords, offset=0.5):
    periods = [float(p) for p in schema.periods]
    axes = [(np.arange(res) + offset) / res * periods[i] for i in coords]
    pts = np.zeros((res ** len(coords), schema.n))
    if coords:
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(coords))
        pts[:, list(coords)] = mesh
    return pts


def _midpoint(f, schema, res, coords, offset=0.5, chunk=1 << 16):
    pts = _box_grid(schema, res, coords, offset)
    tot = 0j
    for i in range(0, len(pts), chunk):
        tot += np.sum(f.eval_np(pts[i:i + chunk]))
    return tot / len(pts)


def integrate_haar(f: TestFunction, resolution: int = 16, tol: float = 1e-3) -> Quadrature:
    """Midpoint rule on the fundamental box with one doubling for the error.

    Functions with a known nonzero fiber frequency integrate to 0 exactly;
    fiber-constant functions are integrated over the non-fiber coordinates.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    s = f.schema
    coords = list(range(s.n))
    if f.freq is not None and f.Z is not None and f.Z.dim:
        if any(f.freq):
            return Quadrature(0j, 0.0, True, resolution)
        coords = list(f.Z.rest)
    if isinstance(f, Constant):
        return Quadrature(complex(f.value), 0.0, True, resolution)
    coarse = _midpoint(f, s, resolution, coords)
    fine = _midpoint(f, s, 2 * resolution, coords)
    # aligned grids can agree while both sit on a kink; a shifted grid exposes it
    shifted = _midpoint(f, s, 2 * resolution, coords, offset=GOLDEN)
    value = (fine + shifted) / 2
    err = max(abs(fine - coarse), abs(fine - shifted))
    return Quadrature(value, err, err <= tol, 2 * resolution)


def integrate_empirical(f: TestFunction, nu) -> complex:
    return complex(np.sum(nu.weights * f.eval_np(nu.points)))


class QuadratureError(RuntimeError):
    pass


@dataclass
class WassersteinBound:
    value: float
    witness: TestFunction | None
    deviations: list = field(default_factory=list)
    quadrature_error: float = 0.0


def deviation(f: TestFunction, nu, haar: complex | None = None, resolution: int = 16) -> float:
    """|∫ f dnu - ∫ f dmes_X| / norm_bound."""
    if haar is None:
        haar = integrate_haar(f, resolution).value
    if f.norm_bound == 0:
        return 0.0
    return abs(integrate_empirical(f, nu) - haar) / f.norm_bound


def wasserstein_lower(nu, dictionary, haar_targets=None, resolution: int = 16,
                      tol: float = 1e-3, strict: bool = False) -> WassersteinBound:
    """Dictionary maximum: a lower bound on W_alpha(nu, mes_X) up to quadrature error."""
    if not dictionary:
        raise ValueError("dictionary must be nonempty")
    best, witness, devs, qerr = -1.0, None, [], 0.0
    for i, f in enumerate(dictionary):
        if not math.isfinite(f.norm_bound):
            raise ValueError("dictionary entries need finite norm bounds")
        if haar_targets is not None:
            h = haar_targets[i]
        else:
            q = integrate_haar(f, resolution, tol)
            if strict and not q.converged:
                raise QuadratureError(f"quadrature did not converge for entry {i}: {q.error}")
            h = q.value
            qerr = max(qerr, q.error / max(f.norm_bound, 1e-300))
        d = deviation(f, nu, h)
        devs.append(d)
        if d > best:
            best, witness = d, f
    return WassersteinBound(best, witness, devs, qerr)


def holder_ratio_samples(f: TestFunction, x: np.ndarray, y: np.ndarray, radius: int = 2) -> np.ndarray:
    """|f(x) - f(y)| / d(x,y)^alpha + |f(x)|; used by soundness tests."""
    from .nilgroup import distance_np

    d = distance_np(f.schema, x, y, radius)
    fx, fy = f.eval_np(x), f.eval_np(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(fx - fy) / d ** f.alpha
    r = np.where(d > 0, r, 0.0)
    return r + np.abs(fx)
