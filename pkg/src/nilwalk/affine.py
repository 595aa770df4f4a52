"""Automorphisms, affine maps and finitely supported measures on Aff(X).

An automorphism is stored by its matrix in exponential coordinates,

    (x, w) -> (A x, E w + L x),

with ``A`` in GL_k(Z), ``E`` in GL_c(Z) and ``L`` a rational c x k matrix.  In
that chart every automorphism of a 2-step group is linear, so composition is
matrix multiplication; conversion to the Mal'cev chart happens only inside
``apply_aut``.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .nilgroup import (
    CentralSubgroupSpec,
    GroupElement,
    NilGroupSchema,
    NilmanifoldPoint,
    SchemaError,
    identity,
    inverse,
    multiply,
    reduce,
)

Mat = tuple  # tuple of row tuples


def _mat(rows) -> Mat:
    return tuple(tuple(Fraction(v) for v in r) for r in rows)


def _int_mat(rows) -> Mat:
    out = tuple(tuple(int(v) for v in r) for r in rows)
    for r, rr in zip(out, rows):
        for a, b in zip(r, rr):
            if a != b:
                raise SchemaError("matrix must be integral")
    return out


def matmul(a: Mat, b: Mat) -> Mat:
    if not a or not b:
        rows = len(a)
        cols = len(b[0]) if b else 0
        return tuple((0,) * cols for _ in range(rows))
    bt = list(zip(*b))
    return tuple(tuple(sum(x * y for x, y in zip(r, col)) for col in bt) for r in a)


def matvec(a: Mat, v: Sequence) -> tuple:
    return tuple(sum(x * y for x, y in zip(r, v)) for r in a)


def madd(a: Mat, b: Mat) -> Mat:
    return tuple(tuple(x + y for x, y in zip(r, s)) for r, s in zip(a, b))


def mneg(a: Mat) -> Mat:
    return tuple(tuple(-x for x in r) for r in a)


def eye(n: int) -> Mat:
    return tuple(tuple(1 if i == j else 0 for j in range(n)) for i in range(n))


def zeros(r: int, c: int) -> Mat:
    return tuple(tuple(Fraction(0) for _ in range(c)) for _ in range(r))


def transpose(a: Mat) -> Mat:
    return tuple(zip(*a)) if a else ()


def det(a: Mat):
    n = len(a)
    if n == 0:
        return 1
    m = [[Fraction(v) for v in r] for r in a]
    d = Fraction(1)
    for i in range(n):
        p = next((r for r in range(i, n) if m[r][i] != 0), None)
        if p is None:
            return Fraction(0)
        if p != i:
            m[i], m[p] = m[p], m[i]
            d = -d
        d *= m[i][i]
        for r in range(i + 1, n):
            f = m[r][i] / m[i][i]
            if f:
                m[r] = [x - f * y for x, y in zip(m[r], m[i])]
    return d


def minv(a: Mat) -> Mat:
    n = len(a)
    m = [[Fraction(v) for v in r] + [Fraction(int(i == j)) for j in range(n)]
         for i, r in enumerate(a)]
    for i in range(n):
        p = next((r for r in range(i, n) if m[r][i] != 0), None)
        if p is None:
            raise ZeroDivisionError("singular matrix")
        m[i], m[p] = m[p], m[i]
        piv = m[i][i]
        m[i] = [x / piv for x in m[i]]
        for r in range(n):
            if r != i and m[r][i]:
                f = m[r][i]
                m[r] = [x - f * y for x, y in zip(m[r], m[i])]
    return tuple(tuple(r[n:]) for r in m)


def int_inverse(a: Mat) -> Mat:
    inv = minv(a)
    return tuple(tuple(int(v) for v in r) for r in inv)


def _norm(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


@dataclass(frozen=True)
class Automorphism:
    schema: NilGroupSchema
    A: Mat
    E: Mat = ()
    L: Mat = ()

    def __post_init__(self):
        s = self.schema
        A = _int_mat(self.A)
        E = _int_mat(self.E) if s.c else ()
        L = _mat(self.L) if s.c else ()
        if not L and s.c:
            L = zeros(s.c, s.k)
        if len(A) != s.k or any(len(r) != s.k for r in A):
            raise SchemaError("A has wrong shape")
        if s.c and (len(E) != s.c or len(L) != s.c or any(len(r) != s.k for r in L)):
            raise SchemaError("E or L has wrong shape")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "L", L)

    # -- constructors ------------------------------------------------------
    @classmethod
    def identity(cls, schema: NilGroupSchema) -> "Automorphism":
        return cls(schema, eye(schema.k), eye(schema.c), zeros(schema.c, schema.k))

    @classmethod
    def torus(cls, schema: NilGroupSchema, A) -> "Automorphism":
        return cls(schema, A)

    @classmethod
    def heisenberg(cls, schema: NilGroupSchema, A, eps: int = 1, L=None) -> "Automorphism":
        if L is None:
            L = [[0] * schema.k]
        elif not isinstance(L[0], (list, tuple)):
            L = [list(L)]
        return cls(schema, A, ((eps,),), L)

    @classmethod
    def free2step(cls, schema: NilGroupSchema, A, B=None) -> "Automorphism":
        """The g_{A,B} form: central block is det(A) (A^T)^{-1}."""
        A = _int_mat(A)
        dA = det(A)
        E = tuple(tuple(dA * v for v in r) for r in minv(transpose(A)))
        E = tuple(tuple(int(v) for v in r) for r in E)
        if B is None:
            B = zeros(3, 3)
        return cls(schema, A, E, B)

    # -- algebra -----------------------------------------------------------
    @property
    def key(self) -> tuple:
        return (self.A, self.E, self.L)

    def matrix(self) -> Mat:
        """Full matrix in exponential coordinates."""
        k, c = self.schema.k, self.schema.c
        rows = [tuple(Fraction(v) for v in r) + (Fraction(0),) * c for r in self.A]
        for i in range(c):
            rows.append(tuple(self.L[i]) + tuple(Fraction(v) for v in self.E[i]))
        return tuple(rows)

    def compose(self, other: "Automorphism") -> "Automorphism":
        if self.schema != other.schema:
            raise SchemaError("schema mismatch")
        A = matmul(self.A, other.A)
        if not self.schema.c:
            return Automorphism(self.schema, A)
        E = matmul(self.E, other.E)
        L = madd(matmul(self.L, other.A), matmul(self.E, other.L))
        return Automorphism(self.schema, A, E, L)

    def inverse(self) -> "Automorphism":
        Ai = int_inverse(self.A)
        if not self.schema.c:
            return Automorphism(self.schema, Ai)
        Ei = int_inverse(self.E)
        L = mneg(matmul(matmul(Ei, self.L), Ai))
        return Automorphism(self.schema, Ai, Ei, L)

    def apply_coords(self, g: Sequence) -> tuple:
        s = self.schema
        w = s.to_exp(g)
        x, z = w[:s.k], w[s.k:]
        xn = matvec(self.A, x)
        if s.c:
            zn = tuple(a + b for a, b in zip(matvec(self.E, z), matvec(self.L, x)))
        else:
            zn = ()
        return s.from_exp(xn + zn)

    def __call__(self, g: GroupElement) -> GroupElement:
        return GroupElement(self.schema, self.apply_coords(g.coords))

    def apply_np(self, g: np.ndarray) -> np.ndarray:
        s = self.schema
        return s.from_exp_np(s.to_exp_np(g) @ exp_matrix_np(self).T)

    def to_json(self) -> dict:
        out = {"A": [list(r) for r in self.A]}
        if self.schema.c:
            out["E"] = [list(r) for r in self.E]
            out["L"] = [[str(v) for v in r] for r in self.L]
        return out

    @classmethod
    def from_json(cls, schema: NilGroupSchema, obj: dict) -> "Automorphism":
        return cls(schema, obj["A"], obj.get("E", ()), [[Fraction(v) for v in r] for r in obj.get("L", ())])


@dataclass
class ValidationReport:
    valid: bool
    violations: list

    def __bool__(self):
        return self.valid


def validate(aut: Automorphism, schema: NilGroupSchema | None = None) -> ValidationReport:
    """Check homomorphism compatibility and lattice preservation."""
    s = schema or aut.schema
    bad = []
    if s != aut.schema:
        return ValidationReport(False, ["schema mismatch"])
    if abs(det(aut.A)) != 1:
        bad.append("A is not unimodular")
    if s.c:
        if abs(det(aut.E)) != 1:
            bad.append("central block E is not unimodular")
        # antisymmetric part of beta must transform by E: A^T W_l A = sum_m E_lm W_m
        W = [(t - t.T) for t in s.beta]
        Anp = np.array(aut.A, dtype=object)
        for l in range(s.c):
            lhs = Anp.T.dot(np.array(W[l], dtype=object)).dot(Anp)
            rhs = sum(int(aut.E[l][m]) * np.array(W[m], dtype=object) for m in range(s.c))
            if np.any(lhs != rhs):
                bad.append("not compatible with the group law (form condition)")
                break
        # image of a base generator has central part L e_i plus a half-integer
        # correction from the chart change; it must land in (1/q) Z
        for i in range(s.k):
            e = [Fraction(0)] * s.n
            e[i] = Fraction(1)
            img = aut.apply_coords(tuple(e))
            if any((v * s.q).denominator != 1 for v in img[s.k:]):
                bad.append(f"L denominator violation at base generator {i}: "
                           f"column {[str(r[i]) for r in aut.L]}")
                break
    if not bad:
        try:
            inv = aut.inverse()
        except (ZeroDivisionError, ValueError):
            bad.append("not invertible over Z")
            inv = None
        for g in s.lattice_generators():
            if not s.in_lattice(aut.apply_coords(g)):
                bad.append(f"lattice generator {tuple(str(v) for v in g)} leaves the lattice")
                break
            if inv is not None and not s.in_lattice(inv.apply_coords(g)):
                bad.append("inverse does not preserve the lattice")
                break
    return ValidationReport(not bad, bad)


@dataclass(frozen=True)
class AffineMap:
    """x Lambda -> n gamma(x) Lambda."""

    aut: Automorphism
    translation: GroupElement

    @property
    def schema(self) -> NilGroupSchema:
        return self.aut.schema

    @classmethod
    def from_aut(cls, aut: Automorphism) -> "AffineMap":
        return cls(aut, identity(aut.schema))

    @classmethod
    def translation_by(cls, g: GroupElement) -> "AffineMap":
        return cls(Automorphism.identity(g.schema), g)

    @property
    def key(self) -> tuple:
        return (self.aut.key, self.translation.coords)

    def __call__(self, x: NilmanifoldPoint) -> NilmanifoldPoint:
        return apply(self, x)


def apply(g: AffineMap, x: NilmanifoldPoint) -> NilmanifoldPoint:
    lifted = GroupElement(x.schema, x.coords)
    return reduce(multiply(g.translation, g.aut(lifted)))


def apply_np(g: AffineMap, pts: np.ndarray) -> np.ndarray:
    s = g.schema
    moved = g.aut.apply_np(np.asarray(pts, dtype=float))
    n = np.broadcast_to(g.translation.as_array(), moved.shape)
    return s.reduce_np(s.mul_np(n, moved))


def compose(g: AffineMap, h: AffineMap) -> AffineMap:
    """g after h: x -> n_g gamma_g(n_h gamma_h(x))."""
    return AffineMap(g.aut.compose(h.aut), multiply(g.translation, g.aut(h.translation)))


def affine_inverse(g: AffineMap) -> AffineMap:
    ai = g.aut.inverse()
    return AffineMap(ai, ai(inverse(g.translation)))


def theta(g: AffineMap) -> Automorphism:
    return g.aut


def _check_invariant(aut: Automorphism, Z: CentralSubgroupSpec) -> np.ndarray:
    M = np.array(aut.matrix(), dtype=object)
    rest = list(Z.rest)
    idx = list(Z.indices)
    if rest and idx and np.any(M[np.ix_(rest, idx)] != 0):
        raise SchemaError("Z is not invariant under the automorphism")
    return M[np.ix_(idx, idx)]


def theta_Z(aut: Automorphism, Z: CentralSubgroupSpec) -> Mat:
    """Integer matrix of the action on Z in the basis of Z ∩ Λ."""
    block = _check_invariant(aut, Z)
    sc = Z.scale
    out = []
    for i in range(len(Z.indices)):
        row = []
        for j in range(len(Z.indices)):
            v = Fraction(block[i, j]) * Fraction(int(sc[i])) / Fraction(int(sc[j]))
            if v.denominator != 1:
                raise SchemaError("action on Z does not preserve Z ∩ Λ")
            row.append(int(v))
        out.append(tuple(row))
    return tuple(out)


def dual_action(aut: Automorphism, a: Sequence[int], Z: CentralSubgroupSpec | None = None) -> tuple:
    """gamma . a with chi_{gamma.a} = chi_a o gamma^{-1}, i.e. a -> E^{-T} a.

    With ``Z=None`` the action is the one on characters of the maximal torus
    factor (base coordinates), a -> A^{-T} a.
    """
    if Z is None:
        M = aut.A
    else:
        M = theta_Z(aut, Z)
    return tuple(int(v) for v in matvec(transpose(int_inverse(M)), a))


@functools.lru_cache(maxsize=65536)
def exp_matrix_np(aut: Automorphism) -> np.ndarray:
    return np.array([[float(v) for v in r] for r in aut.matrix()])


def adjoint_np(schema: NilGroupSchema, n: Sequence) -> np.ndarray:
    """Matrix of Ad_n in exponential coordinates: (u, w) -> (u, w + omega(n_base, u))."""
    k = schema.k
    M = np.eye(schema.n)
    nb = np.array([float(v) for v in n[:k]])
    for l, t in enumerate(schema.beta):
        W = (t - t.T).astype(float)
        M[k + l, :k] = nb @ W
    return M


def lipschitz_upper(g: AffineMap | Automorphism) -> float:
    """Upper bound on Lip_X for the right-invariant chart metric.

    x -> n gamma(x) acts on the exponential coordinates of y lambda x^-1 by
    Ad_n composed with the (linear) exponential-chart matrix of gamma, so
    the operator norm of that product bounds the Lipschitz constant.
    Central translations and all translations of a torus are isometries.
    A 1e-12 relative inflation absorbs the float SVD.
    """
    aut = g.aut if isinstance(g, AffineMap) else g
    M = exp_matrix_np(aut)
    if M.size == 0:
        return 1.0
    if isinstance(g, AffineMap) and aut.schema.c:
        M = adjoint_np(aut.schema, g.translation.coords) @ M
    return max(1.0, float(np.linalg.norm(M, 2)) * (1 + 1e-12))


@dataclass(frozen=True)
class FiniteMeasure:
    atoms: tuple  # tuple of (AffineMap, Fraction)

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("measure must have nonempty support")
        atoms = tuple((g, Fraction(w)) for g, w in self.atoms)
        if any(w <= 0 for _, w in atoms):
            raise ValueError("weights must be positive")
        if sum(w for _, w in atoms) != 1:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def uniform(cls, maps: Iterable) -> "FiniteMeasure":
        maps = [m if isinstance(m, AffineMap) else AffineMap.from_aut(m) for m in maps]
        w = Fraction(1, len(maps))
        return cls(tuple((m, w) for m in maps))

    @classmethod
    def merged(cls, pairs: Iterable) -> "FiniteMeasure":
        acc: dict = {}
        rep: dict = {}
        for g, w in pairs:
            acc[g.key] = acc.get(g.key, Fraction(0)) + Fraction(w)
            rep.setdefault(g.key, g)
        return cls(tuple((rep[k], acc[k]) for k in sorted(acc, key=repr)))

    @property
    def schema(self) -> NilGroupSchema:
        return self.atoms[0][0].schema

    @property
    def support(self) -> list:
        return [g for g, _ in self.atoms]

    @property
    def weights(self) -> list:
        return [w for _, w in self.atoms]

    def __len__(self):
        return len(self.atoms)

    def theta_push(self) -> dict:
        """theta_* mu as {Automorphism: weight}."""
        out: dict = {}
        for g, w in self.atoms:
            out[g.aut] = out.get(g.aut, Fraction(0)) + w
        return out

    def to_json(self) -> list:
        return [{"automorphism": g.aut.to_json(),
                 "translation": [str(v) for v in g.translation.coords],
                 "weight": str(w)} for g, w in self.atoms]

    @classmethod
    def from_json(cls, schema: NilGroupSchema, arr) -> "FiniteMeasure":
        if isinstance(arr, str):
            arr = json.loads(arr)
        atoms = []
        for it in arr:
            aut = Automorphism.from_json(schema, it["automorphism"])
            tr = GroupElement(schema, tuple(Fraction(v) for v in it["translation"]))
            atoms.append((AffineMap(aut, tr), Fraction(it["weight"])))
        return cls(tuple(atoms))


def exp_moment(mu: FiniteMeasure, beta: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    return math.fsum(float(w) * lipschitz_upper(g) ** beta for g, w in mu.atoms)


def perturb_translation(g: AffineMap, delta: Sequence) -> AffineMap:
    """Perturb the translation part in chart coordinates (the H' convention)."""
    coords = tuple(a + b for a, b in zip(g.translation.coords, delta))
    return AffineMap(g.aut, GroupElement(g.schema, coords))
