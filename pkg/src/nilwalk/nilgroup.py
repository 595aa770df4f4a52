"""Exact arithmetic on the four supported 2-step nilpotent families.

Every family is written in Mal'cev coordinates of the second kind as
``(x, y)`` with ``x`` in R^k (base) and ``y`` in R^c (central part), and the
law

    (x, y) (x', y') = (x + x', y + y' + beta(x, x'))

for an integer-valued bilinear map ``beta`` (one k x k matrix per central
coordinate).  The torus is the case ``c = 0``.  The lattice is
``Lambda = Z^k x (1/q) Z^c`` and the fundamental domain is
``[0, 1)^k x [0, 1/q)^c``; Haar measure on ``X = N / Lambda`` is Lebesgue
measure on that box.

Exponential (first kind) coordinates are ``(x, y - beta(x, x) / 2)``; they are
used for the metric and for automorphisms, which act linearly there.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

FAMILIES = ("torus", "heisenberg-polarized", "heisenberg-B", "free-2step-3gen")


class SchemaError(ValueError):
    pass


def as_rational(v):
    """Coerce ints/strings/Fractions to Fraction; floats pass through."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (int, np.integer)):
        return Fraction(int(v))
    if isinstance(v, str):
        return Fraction(v)
    return float(v)


def _half(v):
    return v / 2 if isinstance(v, float) else Fraction(v) / 2


def _cross_tensor():
    # beta_k(x, x') = (x ^ x')_k
    t = np.zeros((3, 3, 3), dtype=np.int64)
    for k, (i, j) in enumerate([(1, 2), (2, 0), (0, 1)]):
        t[k, i, j] = 1
        t[k, j, i] = -1
    return t


@dataclass(frozen=True)
class NilGroupSchema:
    family: str
    dim: int  # d for Heisenberg (H_{2d+1}), n for the torus, 3 for free-2step
    B: tuple = ()  # bilinear form rows for heisenberg-B
    q: int = 1
    beta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SchemaError(f"unknown family {self.family!r}")
        if self.q < 1:
            raise SchemaError("lattice denominator q must be >= 1")
        if self.family == "torus":
            beta = np.zeros((0, self.dim, self.dim), dtype=np.int64)
        elif self.family == "heisenberg-polarized":
            d = self.dim
            beta = np.zeros((1, 2 * d, 2 * d), dtype=np.int64)
            for i in range(d):
                beta[0, i, d + i] = 1  # p . q'
        elif self.family == "heisenberg-B":
            Bm = np.array(self.B, dtype=object)
            if Bm.shape != (2 * self.dim, 2 * self.dim):
                raise SchemaError("B must be a 2d x 2d matrix")
            if any(int(v) != v for v in Bm.ravel()):
                raise SchemaError("B must be integral")
            beta = np.array(Bm, dtype=np.int64)[None]
        else:
            if self.dim != 3:
                raise SchemaError("free-2step-3gen has dim 3")
            beta = _cross_tensor()
        object.__setattr__(self, "B", tuple(tuple(int(v) for v in r) for r in self.B))
        object.__setattr__(self, "beta", beta)

    @property
    def k(self) -> int:
        return self.beta.shape[1]

    @property
    def c(self) -> int:
        return self.beta.shape[0]

    @property
    def n(self) -> int:
        return self.k + self.c

    @property
    def central(self) -> tuple[int, ...]:
        """Coordinate indices of the central block (all of them for a torus)."""
        if self.c == 0:
            return tuple(range(self.k))
        return tuple(range(self.k, self.n))

    @property
    def commutator(self) -> tuple[int, ...]:
        """Coordinates spanning [N, N]; empty for the torus."""
        if self.c == 0:
            return ()
        return tuple(range(self.k, self.n))

    @property
    def periods(self) -> tuple:
        """Side lengths of the fundamental box."""
        return (1,) * self.k + (Fraction(1, self.q),) * self.c

    def is_abelian(self) -> bool:
        return self.c == 0 or not np.any(self.beta - self.beta.transpose(0, 2, 1))

    # -- serialization -----------------------------------------------------
    def to_json(self) -> dict:
        out = {"family": self.family, "q": self.q}
        out["n" if self.family == "torus" else "d"] = self.dim
        if self.family == "heisenberg-B":
            out["B"] = [v for row in self.B for v in row]
        return out

    @classmethod
    def from_json(cls, obj: dict | str) -> "NilGroupSchema":
        if isinstance(obj, str):
            obj = json.loads(obj)
        fam = obj["family"]
        dim = obj.get("n") if fam == "torus" else obj.get("d")
        if dim is None:
            raise SchemaError("missing dimension field")
        B = ()
        if fam == "heisenberg-B":
            flat = obj["B"]
            m = 2 * dim
            B = tuple(tuple(flat[i * m:(i + 1) * m]) for i in range(m))
        return cls(fam, int(dim), B, int(obj.get("q", 1)))

    # -- group law on raw coordinate sequences -----------------------------
    def _beta(self, x, xp):
        out = []
        for t in self.beta:
            s = 0
            for i, j in zip(*np.nonzero(t)):
                s += int(t[i, j]) * x[i] * xp[j]
            out.append(s)
        return out

    def mul(self, g: Sequence, h: Sequence) -> tuple:
        k = self.k
        x, y = g[:k], g[k:]
        xp, yp = h[:k], h[k:]
        b = self._beta(x, xp)
        return tuple(a + b_ for a, b_ in zip(x, xp)) + tuple(
            y[i] + yp[i] + b[i] for i in range(self.c))

    def inv(self, g: Sequence) -> tuple:
        k = self.k
        x, y = g[:k], g[k:]
        b = self._beta(x, x)
        return tuple(-v for v in x) + tuple(-y[i] + b[i] for i in range(self.c))

    def identity_coords(self) -> tuple:
        return (Fraction(0),) * self.n

    def to_exp(self, g: Sequence) -> tuple:
        k = self.k
        b = self._beta(g[:k], g[:k])
        return tuple(g[:k]) + tuple(g[k + i] - _half(b[i]) for i in range(self.c))

    def from_exp(self, w: Sequence) -> tuple:
        k = self.k
        b = self._beta(w[:k], w[:k])
        return tuple(w[:k]) + tuple(w[k + i] + _half(b[i]) for i in range(self.c))

    def reduce_coords(self, g: Sequence) -> tuple:
        """Right-multiply by the unique lattice element landing in the box."""
        k = self.k
        x = g[:k]
        n = [-math.floor(v) for v in x]
        h = self.mul(g, tuple(n) + (0,) * self.c)
        out = list(h[:k])
        q = self.q
        for i in range(self.c):
            v = h[k + i]
            out.append(v - Fraction(math.floor(v * q), q) if isinstance(v, Fraction)
                       else v - math.floor(v * q) / q)
        return tuple(out)

    # -- vectorized float versions (analysis layer) ------------------------
    def beta_np(self, x: np.ndarray, xp: np.ndarray) -> np.ndarray:
        if self.c == 0:
            return np.zeros(x.shape[:-1] + (0,))
        return np.einsum("...i,kij,...j->...k", x, self.beta.astype(float), xp)

    def mul_np(self, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        k = self.k
        b = self.beta_np(g[..., :k], h[..., :k])
        return np.concatenate([g[..., :k] + h[..., :k], g[..., k:] + h[..., k:] + b], axis=-1)

    def inv_np(self, g: np.ndarray) -> np.ndarray:
        k = self.k
        b = self.beta_np(g[..., :k], g[..., :k])
        return np.concatenate([-g[..., :k], -g[..., k:] + b], axis=-1)

    def to_exp_np(self, g: np.ndarray) -> np.ndarray:
        k = self.k
        b = self.beta_np(g[..., :k], g[..., :k])
        return np.concatenate([g[..., :k], g[..., k:] - b / 2], axis=-1)

    def from_exp_np(self, w: np.ndarray) -> np.ndarray:
        k = self.k
        b = self.beta_np(w[..., :k], w[..., :k])
        return np.concatenate([w[..., :k], w[..., k:] + b / 2], axis=-1)

    def reduce_np(self, g: np.ndarray) -> np.ndarray:
        k = self.k
        g = np.asarray(g, dtype=float)
        n = -np.floor(g[..., :k])
        h = self.mul_np(g, np.concatenate([n, np.zeros(g.shape[:-1] + (self.c,))], axis=-1))
        z = h[..., k:]
        z = z - np.floor(z * self.q) / self.q
        out = np.concatenate([h[..., :k], z], axis=-1)
        # fold values that rounded up to the period back to 0
        out[..., :k] = np.where(out[..., :k] >= 1.0, 0.0, out[..., :k])
        out[..., k:] = np.where(out[..., k:] >= 1.0 / self.q, 0.0, out[..., k:])
        return out

    def lattice_generators(self) -> list[tuple]:
        gens = []
        for i in range(self.n):
            v = [Fraction(0)] * self.n
            v[i] = Fraction(1) if i < self.k else Fraction(1, self.q)
            gens.append(tuple(v))
        return gens

    def in_lattice(self, g: Sequence) -> bool:
        k = self.k
        return (all(Fraction(v).denominator == 1 for v in g[:k])
                and all((Fraction(v) * self.q).denominator == 1 for v in g[k:]))


@dataclass(frozen=True)
class GroupElement:
    schema: NilGroupSchema
    coords: tuple

    def __post_init__(self):
        if len(self.coords) != self.schema.n:
            raise SchemaError(
                f"expected {self.schema.n} coordinates, got {len(self.coords)}")
        object.__setattr__(self, "coords", tuple(as_rational(v) for v in self.coords))

    @property
    def exact(self) -> bool:
        return all(isinstance(v, Fraction) for v in self.coords)

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return multiply(self, other)

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.coords])


@dataclass(frozen=True)
class NilmanifoldPoint:
    """A point of X stored through its canonical representative in the box."""

    schema: NilGroupSchema
    coords: tuple

    @property
    def representative(self) -> GroupElement:
        return GroupElement(self.schema, self.coords)

    @property
    def exact(self) -> bool:
        return all(isinstance(v, Fraction) for v in self.coords)

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.coords])


@dataclass(frozen=True)
class CentralSubgroupSpec:
    """Z given by coordinate indices; Z ∩ Λ uses the lattice's own basis."""

    schema: NilGroupSchema
    indices: tuple[int, ...]

    def __post_init__(self):
        s = self.schema
        idx = tuple(sorted(self.indices))
        object.__setattr__(self, "indices", idx)
        if not idx:
            return
        if s.c == 0:
            if any(i < 0 or i >= s.n for i in idx):
                raise SchemaError("index out of range")
        elif not set(idx) <= set(s.central):
            raise SchemaError("selected coordinates are not central")

    @property
    def dim(self) -> int:
        return len(self.indices)

    @property
    def rest(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.schema.n) if i not in self.indices)

    @property
    def scale(self) -> np.ndarray:
        """Multiplier taking chart coordinates of Z to Z ∩ Λ basis coordinates."""
        k = self.schema.k
        return np.array([1.0 if (self.schema.c == 0 or i < k) else float(self.schema.q)
                         for i in self.indices])

    def quotient_schema(self) -> NilGroupSchema:
        """Schema of Y = N / (Λ Z).  Only quotients that stay in the families."""
        s = self.schema
        rest = self.rest
        if s.c == 0 or set(self.indices) == set(s.central):
            return NilGroupSchema("torus", len([i for i in rest if i < s.k]) if s.c else len(rest))
        raise SchemaError("quotient by a partial center is not supported")


def center(schema: NilGroupSchema) -> CentralSubgroupSpec:
    return CentralSubgroupSpec(schema, schema.central if schema.c else ())


def identity(schema: NilGroupSchema) -> GroupElement:
    return GroupElement(schema, schema.identity_coords())


def _check(g, h):
    if g.schema != h.schema:
        raise SchemaError("schema mismatch")


def multiply(g: GroupElement, h: GroupElement) -> GroupElement:
    _check(g, h)
    return GroupElement(g.schema, g.schema.mul(g.coords, h.coords))


def inverse(g: GroupElement) -> GroupElement:
    return GroupElement(g.schema, g.schema.inv(g.coords))


def reduce(g: GroupElement) -> NilmanifoldPoint:
    return NilmanifoldPoint(g.schema, g.schema.reduce_coords(g.coords))


def point(schema: NilGroupSchema, coords: Sequence) -> NilmanifoldPoint:
    return reduce(GroupElement(schema, tuple(coords)))


def _shift_grid(k: int, radius: int) -> np.ndarray:
    r = range(-radius, radius + 1)
    return np.array(list(itertools.product(r, repeat=k)), dtype=float).reshape(-1, k)


def distance_np(schema: NilGroupSchema, x: np.ndarray, y: np.ndarray,
                radius: int = 2) -> np.ndarray:
    """Vectorized distance between arrays of points (last axis = coordinates).

    min over lattice elements lambda of the Euclidean norm of the exponential
    coordinates of y lambda x^-1.  The chart norm is right-invariant, so right
    multiplication by the lattice is an isometry and the minimum is a genuine
    metric on N / Lambda.  Central lattice parts are optimized in closed form
    by rounding; base parts are enumerated within ``radius``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    k, c, q = schema.k, schema.c, schema.q
    P = max(x.shape[0], y.shape[0])
    xinv = schema.inv_np(x)
    best = np.full(P, np.inf)
    for s in _shift_grid(k, radius):
        lam = np.concatenate([np.broadcast_to(s, (P, k)), np.zeros((P, c))], axis=1)
        g = schema.mul_np(schema.mul_np(y, lam), xinv)
        w = schema.to_exp_np(g)
        if c:
            zc = w[:, k:]
            w = np.concatenate([w[:, :k], zc - np.round(zc * q) / q], axis=1)
        best = np.minimum(best, np.sqrt(np.sum(w * w, axis=1)))
    return best


def distance(x: NilmanifoldPoint, y: NilmanifoldPoint, radius: int = 2) -> float:
    if x.schema != y.schema:
        raise SchemaError("schema mismatch")
    return float(distance_np(x.schema, x.as_array(), y.as_array(), radius)[0])


def diameter_bound(schema: NilGroupSchema) -> float:
    """Upper bound on the distance between any two points."""
    return math.sqrt(schema.k / 4 + schema.c / (4 * schema.q ** 2)) + 1e-12


def project_to_factor(x: NilmanifoldPoint, Z: CentralSubgroupSpec) -> NilmanifoldPoint:
    """Drop the Z coordinates; the quotient is reduced in its own schema."""
    if Z.schema != x.schema:
        raise SchemaError("schema mismatch")
    ys = Z.quotient_schema()
    rest = Z.rest
    coords = tuple(x.coords[i] for i in rest)
    return point(ys, coords)


def project_to_torus(x: NilmanifoldPoint) -> NilmanifoldPoint:
    s = x.schema
    if s.c == 0:
        return x
    return project_to_factor(x, CentralSubgroupSpec(s, s.commutator))
