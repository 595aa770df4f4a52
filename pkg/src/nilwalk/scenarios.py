"""Registry of worked examples: schema, generator measure, fiber Z and the
qualitative outcome each one is expected to show."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .affine import AffineMap, Automorphism, FiniteMeasure, validate
from .nilgroup import CentralSubgroupSpec, NilGroupSchema, center


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioDescriptor:
    name: str
    schema: NilGroupSchema
    measure: FiniteMeasure
    Z: CentralSubgroupSpec | None
    anchor: str
    expected: dict = field(default_factory=dict)
    arithmetic_only: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for g in self.measure.support:
            rep = validate(g.aut, self.schema)
            if not rep:
                raise ScenarioError(f"{self.name}: invalid generator: {rep.violations}")

    def summary(self) -> dict:
        return {"name": self.name, "schema": self.schema.to_json(), "anchor": self.anchor,
                "atoms": len(self.measure), "expected": self.expected,
                "arithmetic_only": self.arithmetic_only}


def elementary(d: int, i: int, j: int, v: int = 1):
    M = np.eye(d, dtype=np.int64)
    M[i, j] = v
    return M.tolist()


def heisenberg_sl2() -> ScenarioDescriptor:
    H = NilGroupSchema("heisenberg-polarized", 1)
    # [[1,1],[0,1]] needs a half-integer central correction; the squares do not
    gens = [[[1, 2], [0, 1]], [[1, 0], [2, 1]]]
    mu = FiniteMeasure.uniform([Automorphism.heisenberg(H, A, 1) for A in gens])
    return ScenarioDescriptor(
        "heisenberg-sl2", H, mu, center(H),
        "3-dim Heisenberg nilmanifold, two SL2(Z)-derived automorphisms acting "
        "strongly irreducibly on the base torus, trivially on the center",
        {"theta_Z_values": [1], "tau_Z": 0.0})


def block_triangular(d: int = 2, k: int = 1) -> ScenarioDescriptor:
    if d < 2 or k < 1:
        raise ScenarioError("block-triangular needs d >= 2 and k >= 1")
    T = NilGroupSchema("torus", 2 * d)
    U, L = elementary(d, 0, 1), elementary(d, 1, 0)
    Ui, Li = elementary(d, 0, 1, -1), elementary(d, 1, 0, -1)
    eta = [U, L]
    nu = {tuple(map(tuple, np.eye(d, dtype=np.int64).tolist())): Fraction(1)}
    for _ in range(k):
        nxt: dict = {}
        for M in (U, Ui, L, Li):
            for P, w in nu.items():
                Q = tuple(map(tuple, (np.array(M) @ np.array(P)).tolist()))
                nxt[Q] = nxt.get(Q, Fraction(0)) + w / 4
        nu = nxt
    pairs = []
    for A in eta:
        for D, w in nu.items():
            M = np.zeros((2 * d, 2 * d), dtype=np.int64)
            M[:d, :d] = A
            M[:d, d:] = np.eye(d, dtype=np.int64)
            M[d:, d:] = D
            pairs.append((AffineMap.from_aut(Automorphism.torus(T, M.tolist())), Fraction(1, len(eta)) * w))
    mu = FiniteMeasure.merged(pairs)
    Z = CentralSubgroupSpec(T, tuple(range(d)))
    return ScenarioDescriptor(
        "block-triangular", T, mu, Z,
        "random block upper-triangular toral automorphisms [[A, I], [0, D]] with A ~ eta "
        "and D ~ nu = nu0^{*k}; Z is the first block",
        {"tau_Z_positive": True, "sigma_increases_with_k": True},
        extra={"d": d, "k": k, "eta": eta, "nu": sorted(nu.items()), "nu0": [U, Ui, L, Li]})


def bflm_torus() -> ScenarioDescriptor:
    T = NilGroupSchema("torus", 2)
    gens = [[[2, 1], [1, 1]], [[1, 1], [1, 2]]]
    mu = FiniteMeasure.uniform([Automorphism.torus(T, A) for A in gens])
    return ScenarioDescriptor(
        "bflm-torus", T, mu, None,
        "toral automorphisms of T^2 generating a strongly irreducible proximal group",
        {"rational_points_obstruct": True})


def free_2step() -> ScenarioDescriptor:
    F = NilGroupSchema("free-2step-3gen", 3)
    gens = [elementary(3, 0, 1), elementary(3, 1, 2), elementary(3, 2, 0)]
    mu = FiniteMeasure.uniform([Automorphism.free2step(F, A) for A in gens])
    return ScenarioDescriptor(
        "free-2step", F, mu, center(F),
        "free 2-step nilpotent group on 3 generators with automorphisms whose central "
        "block is det(A) (A^T)^{-1}", {"arithmetic_only": True}, arithmetic_only=True)


def heisenberg_number_field():
    raise ScenarioError("Heisenberg groups over number fields are out of scope: "
                        "the lattice would need a ring of integers beyond Z")


REGISTRY = {
    "heisenberg-sl2": heisenberg_sl2,
    "block-triangular": block_triangular,
    "bflm-torus": bflm_torus,
    "free-2step": free_2step,
    "heisenberg-number-field": heisenberg_number_field,
}


def scenario(name: str, **params) -> ScenarioDescriptor:
    try:
        build = REGISTRY[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; known: {sorted(REGISTRY)}") from None
    return build(**params)


def list_scenarios() -> list[dict]:
    out = []
    for name in REGISTRY:
        try:
            out.append(scenario(name).summary())
        except ScenarioError as exc:
            out.append({"name": name, "status": "stub", "message": str(exc)})
    return out
