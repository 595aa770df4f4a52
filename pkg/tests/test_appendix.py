import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilwalk.appendix import (AlgebraMeasure, Labeling, add_convolve, boxplus_power, decay_scan,
                              exact_labeled_power, first_return_law, fourier_algebra, ld_tail, mult_convolve,
                              nc_check, positivity_check, return_time_sim, sub_convolve)

I2 = ((1, 0), (0, 1))
U = ((1, 1), (0, 1))
L = ((1, 0), (1, 1))
CAT = ((2, 1), (1, 1))

mats2 = st.tuples(*[st.tuples(st.integers(-3, 3), st.integers(-3, 3)) for _ in range(2)])
measures2 = st.lists(mats2, min_size=1, max_size=3).map(AlgebraMeasure.uniform)


@settings(max_examples=30, deadline=None)
@given(measures2)
def test_dirac_zero_is_additive_unit(eta):
    assert add_convolve(AlgebraMeasure.zero(2), eta) == eta
    assert mult_convolve(AlgebraMeasure.identity(2), eta) == eta


def test_difference_of_a_dirac_is_zero():
    eta = AlgebraMeasure.dirac(CAT)
    assert sub_convolve(eta, eta) == AlgebraMeasure.zero(2)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_boxplus_power_is_binomial(k):
    eta = AlgebraMeasure.uniform([((0,),), ((1,),)])
    pk = boxplus_power(eta, k)
    assert dict(pk.atoms) == {((j,),): F(math.comb(k, j), 2 ** k) for j in range(k + 1)}


def test_fourier_of_point_masses():
    assert fourier_algebra(AlgebraMeasure.zero(2), np.ones((2, 2)) * 0.37) == pytest.approx(1)
    xi = np.array([[0.25, 0], [0, 0]])
    assert fourier_algebra(AlgebraMeasure.dirac(I2), xi) == pytest.approx(1j)


def test_subalgebra_membership():
    diag = (((1, 0), (0, 0)), ((0, 0), (0, 1)))
    AlgebraMeasure.dirac(((2, 0), (0, 3)), basis=diag)
    with pytest.raises(ValueError):
        AlgebraMeasure.dirac(U, basis=diag)
    with pytest.raises(ValueError):
        AlgebraMeasure(2, ((I2, F(1, 2)),))


@settings(max_examples=25, deadline=None)
@given(measures2, measures2, measures2, st.integers(1, 2),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_positivity_holds(nu, nu1, nu2, k, xi):
    rep = positivity_check(nu, nu1, nu2, k, [np.reshape(xi, (2, 2))], tol=1e-9)
    assert rep.ok, rep.violations


# --- non-concentration -------------------------------------------------------------

def test_nc_dirac_fails_determinant_condition():
    rep = nc_check(AlgebraMeasure.dirac(I2), eps=0.1, kappa=0.5, tau=0.1, delta=0.01)
    assert rep.cond1_ok
    assert not rep.cond2_ok and rep.cond2_max == pytest.approx(1.0)
    assert not rep.ok


def test_nc_hyperplane_concentration_is_detected():
    # every atom has a zero upper-right entry
    mats = [((a, 0), (b, c)) for a, b, c in [(1, 2, 3), (-2, 1, 5), (4, -3, 1), (3, 3, -2), (0, 5, 2)]]
    rep = nc_check(AlgebraMeasure.uniform(mats), eps=0.05, kappa=0.5, tau=0.1, delta=0.01)
    assert not rep.cond3_ok
    assert rep.cond3_max_ratio > 1
    assert rep.cond3_witness["mass"] == pytest.approx(1.0)


def test_nc_large_atoms_fail_the_norm_condition():
    # mass 1/2 beyond delta^-eps against the budget delta^tau = 0.1
    rep = nc_check(AlgebraMeasure.uniform([((1000, 0), (0, 1)), I2]), eps=0.1, kappa=0.5, tau=0.5, delta=0.01)
    assert rep.cond1_mass == pytest.approx(0.5) and not rep.cond1_ok
    with pytest.raises(ValueError):
        nc_check(AlgebraMeasure.dirac(I2), 0.1, 0.5, 0.1, delta=1.5)


# --- large deviations ---------------------------------------------------------------

def test_ld_tail_huge_omega_is_all_zero():
    mu = [(U, F(1, 2)), (L, F(1, 2))]
    tab = ld_tail(mu, omega=5.0, ms=[4, 8, 16], trials=500, lambda_hat=0.5)
    assert [p for _, p in tab.rows] == [0, 0, 0]
    assert tab.zero_rows == [4, 8, 16] and math.isnan(tab.kappa_hat)


def test_ld_tail_decreases_in_m():
    mu = [(U, F(1, 4)), (L, F(1, 4)), (((1, -1), (0, 1)), F(1, 4)), (((1, 0), (-1, 1)), F(1, 4))]
    tab = ld_tail(mu, omega=0.15, ms=[8, 16, 24, 32], trials=4000, lyap_steps=200, lyap_trials=1000)
    ps = [p for _, p in tab.rows]
    assert ps[0] > ps[-1]
    assert tab.kappa_hat > 0


# --- return times --------------------------------------------------------------------

def test_trivial_labels_return_every_step():
    mu = [(CAT, F(1, 2)), (U, F(1, 2))]
    s = return_time_sim(mu, Labeling([0, 0]), m=8, trials=200)
    assert s.T_hat == 1 and s.T_stderr == 0
    assert np.array_equal(s.taus[0], np.arange(1, 9))


def test_alternating_labels_return_every_other_step():
    mu = [(CAT, F(1))]
    s = return_time_sim(mu, Labeling([1]), m=10, trials=64)
    assert s.T_hat == 2
    # lambda(mu°) = 2 lambda(mu) for the cat map
    lam = math.log((3 + math.sqrt(5)) / 2)
    assert s.lambda_circ[0] == pytest.approx(2 * lam, rel=1e-6)
    assert s.lambda_mu[0] == pytest.approx(lam, rel=1e-6)
    assert s.consistent


def test_first_return_law_is_exact():
    law = first_return_law([(U, F(1, 2)), (L, F(1, 2))], Labeling([1, 0]), max_len=6)
    # return at step 1 via L, otherwise U ... U with an even number of U's
    assert sum(w for _, w, _ in law) <= 1
    assert (L, F(1, 2), 0) in law
    assert all(lab == 0 for _, _, lab in law)


def test_decay_scan_at_step_zero():
    xis = [np.eye(2) * 0.3, np.array([[0.1, 0.7], [0.2, 0.0]])]
    scan = decay_scan([(U, F(1, 2)), (L, F(1, 2))], Labeling([1, 1]), 0, xis)
    assert all(r[2] == pytest.approx(1.0) for r in scan.rows)
    assert scan.coset_mass == {"0": 1.0}


def test_labeled_power_masses():
    law = exact_labeled_power([(U, F(1, 2)), (L, F(1, 2))], Labeling([1, 0]), 3)
    assert sum(law.values()) == 1
    odd = sum(w for (_, lab), w in law.items() if lab == 1)
    assert odd == F(1, 2)
