import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SCHEMAS
from nilwalk.affine import Automorphism, FiniteMeasure
from nilwalk.nilgroup import center, point
from nilwalk.observables import FiberMode, TorusCharacter
from nilwalk.reduction import (AnalyticFailure, certify, choose_m_prime, cs_step, detect_low_height_subgroups,
                               find_fiber_character, hnf, in_lattice, invariant_lattices_bruteforce,
                               lattice_index, nearest_rational_point, partition_measure, preimage_subgroup,
                               pullback_step, rationalize_affine_system, reduce_witness)
from nilwalk.scenarios import scenario
from nilwalk.walk import EmpiricalMeasure, convolve_exact, push_measure

DESC = scenario("heisenberg-sl2")
H, Z = DESC.schema, DESC.Z
HALF = point(H, [F(1, 2), F(1, 2), 0])
FLIP = Automorphism.heisenberg(H, [[0, 1], [1, 0]], -1)
MIXED = FiniteMeasure.uniform(list(DESC.measure.support) + [FLIP])
ROT = [[0, -1], [1, 0]]
CAT = [[2, 1], [1, 1]]


# --- fiber characters and partitions ------------------------------------------------

def test_fiber_character_of_a_fiber_mode_is_its_frequency():
    f = FiberMode(H, Z, (2,), (0.5, 0.5), 0.25)
    a0, cert = find_fiber_character(f, EmpiricalMeasure.dirac(HALF), t=1e-3)
    assert a0 == (2,)
    assert cert.deviation > 0


def test_fiber_character_of_a_base_character_is_zero():
    f = TorusCharacter(H, (1, 0), 1.0, Z)
    a0, _ = find_fiber_character(f, EmpiricalMeasure.dirac(HALF), t=1e-3)
    assert a0 == (0,)


def test_fiber_character_scan_fails_on_haar():
    f = FiberMode(H, Z, (1,), (0.5, 0.5), 0.25)
    with pytest.raises(AnalyticFailure) as exc:
        find_fiber_character(f, EmpiricalMeasure.haar_grid(H, 8), t=0.5)
    assert "deviations" in exc.value.details


def test_partition_classes_follow_the_center_sign():
    nu = convolve_exact(MIXED, 2)
    classes = partition_measure(nu, (1,), Z)
    assert [a for a, _, _ in classes] == [(-1,), (1,)]
    assert sum(p for _, p, _ in classes) == 1
    # two flips cancel: mass of the +1 class is P(even number of flips)
    assert dict((a, p) for a, p, _ in classes)[(1,)] == F(5, 9)
    only = partition_measure(convolve_exact(DESC.measure, 3), (1,), Z)
    assert [a for a, _, _ in only] == [(1,)]


# --- the CS and pullback steps ----------------------------------------------------

def test_cs_step_respects_floor():
    f0 = FiberMode(H, Z, (1,), (0.5, 0.5), 0.25)
    eta = push_measure(convolve_exact(MIXED, 2), HALF)
    cert = cs_step(f0, MIXED, 2, eta)
    entry = cert.log[0]
    assert entry["step"] == "cs_step"
    assert cert.deviation >= entry["floor"] - cert.tolerance
    # the output is a modulus square, so it lives in H_0
    assert cert.f.freq == (0,)


def test_cs_step_needs_a_nonzero_frequency():
    f = FiberMode(H, Z, (0,), (0.5, 0.5), 0.25)
    with pytest.raises(ValueError):
        cs_step(f, MIXED, 1, EmpiricalMeasure.dirac(HALF))


def test_pullback_step_with_m_zero_is_certify():
    f0 = TorusCharacter(H, (1, 1), 1.0, Z)
    eta = EmpiricalMeasure.dirac(point(H, [F(1, 3), F(1, 5), 0]))
    a = pullback_step(f0, DESC.measure, 0, eta)
    b = certify(f0, eta)
    assert a.deviation == pytest.approx(b.deviation)


def test_pullback_step_finds_a_half_witness():
    f0 = TorusCharacter(H, (1, 0), 1.0, Z)
    eta = EmpiricalMeasure.dirac(HALF)
    cert = pullback_step(f0, DESC.measure, 2, eta)
    t = cert.log[0]["t"]
    assert cert.log[0]["raw_deviation"] >= t / 2


# --- the full chain ----------------------------------------------------------------

def test_reduce_witness_on_rational_start():
    res = reduce_witness(TorusCharacter(H, (1, 0), 1.0, Z), HALF, DESC.measure, 6)
    assert res.status == "witness-on-Y"
    assert res.certificate.measure.schema.n == 2
    ok, d = res.certificate.verify()
    assert ok and d > 0
    assert [e["step"] for e in res.log][:2] == ["input", "find_fiber_character"]


def test_reduce_witness_reports_equidistribution_below_threshold():
    x = point(H, [F(4142, 10000), F(7321, 10000), F(1, 10)])
    res = reduce_witness(TorusCharacter(H, (1, 0), 1.0, Z), x, DESC.measure, 6, t=0.5)
    assert res.status == "equidistributed at tested scale"
    assert res.certificate is None


def test_choose_m_prime():
    assert choose_m_prime(math.exp(-2), 10) == 3
    assert choose_m_prime(math.exp(-20), 10) == 10
    assert choose_m_prime(0.99, 10) == 0


# --- lattices and subgroups --------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(-5, 5), min_size=3, max_size=3), min_size=1, max_size=4),
       st.lists(st.integers(-3, 3), min_size=4, max_size=4))
def test_hnf_contains_integer_combinations(rows, coeffs):
    basis = hnf(rows)
    combo = [sum(c * r[i] for c, r in zip(coeffs, rows)) for i in range(3)]
    assert in_lattice(combo, basis)
    assert hnf(list(basis)) == basis


@pytest.mark.parametrize("h", [1, 2, 2.5])
def test_rotation_subgroups_match_bruteforce(h):
    descs, over = detect_low_height_subgroups([ROT], h)
    assert not over
    assert {d.dual_generators for d in descs} == invariant_lattices_bruteforce([ROT], h)


def test_rotation_has_an_index_two_subgroup():
    descs, _ = detect_low_height_subgroups([ROT], 2)
    assert sorted(d.index for d in descs) == [1, 2]
    idx2 = next(d for d in descs if d.index == 2)
    assert idx2.height == pytest.approx(math.sqrt(2))
    assert not idx2.is_trivial


def test_hyperbolic_orbits_overflow():
    descs, over = detect_low_height_subgroups([CAT], 1.5, cap=50)
    assert [d.dual_generators for d in descs] == [((1, 0), (0, 1))]
    assert {o.seed for o in over} == {(1, 0), (0, 1), (1, 1), (1, -1)}


def test_preimage_subgroup():
    descs, _ = detect_low_height_subgroups([ROT], 2)
    L = next(d for d in descs if d.index == 2)
    pre, C = preimage_subgroup([[1, 0, 0], [0, 1, 0]], L)
    assert C == pytest.approx(1.0)
    assert all(r[2] == 0 for r in pre.dual_generators)
    assert lattice_index(pre.dual_generators, 3) is None
    with pytest.raises(ValueError):
        preimage_subgroup([[1, 0, 0], [2, 0, 0]], L)


# --- rational points ----------------------------------------------------------------

def test_nearest_rational_point_examples():
    pt, den, dist = nearest_rational_point([0.501, F(1, 3)], 10)
    assert pt == (F(1, 2), F(1, 3)) and den == 6
    assert dist == pytest.approx(1e-3)
    assert nearest_rational_point([F(1, 2), F(1, 4)], 4) == ((F(1, 2), F(1, 4)), 4, 0.0)
    with pytest.raises(ValueError):
        nearest_rational_point([0.1], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(0, 100), min_size=2, max_size=3))
def test_rational_points_are_found_exactly(q, nums):
    x = [F(n % q, q) for n in nums]
    pt, den, dist = nearest_rational_point(x, 12)
    assert dist == 0.0 and q % den == 0
    assert pt == tuple(x)


def test_rationalize_cat_map_orbit():
    rep = rationalize_affine_system([(CAT, [0, 0])], [0.5, 0.5], 10)
    assert rep.q == 2 and rep.perturbation == 0
    # (1/2,1/2) -> (1/2,0) -> (0,1/2) -> (1/2,1/2)
    assert rep.orbit_size == 3 and not rep.overflow


def test_rationalize_reports_perturbation():
    rep = rationalize_affine_system([(CAT, [0.3334, 0])], [0.1, 0.2], 3)
    assert rep.q == 3
    # worst coordinate is 0.2 -> 1/3
    assert rep.perturbation == pytest.approx(1 / 3 - 0.2, abs=1e-12)
    assert rep.translations == [[F(1, 3), 0]]
