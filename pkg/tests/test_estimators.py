import json
import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SCHEMAS
from nilwalk.affine import Automorphism, FiniteMeasure
from nilwalk.estimators import (apply_T_sparse, l2, linear_fit, lyapunov_estimate, sigma_estimate,
                                sqrt3_check, tau_Z_estimate, torus_matrix_measure, y0_norm)
from nilwalk.nilgroup import center
from nilwalk.scenarios import scenario

CAT = ((2, 1), (1, 1))
ROT = ((0, -1), (1, 0))
LAMBDA_CAT = math.log((3 + math.sqrt(5)) / 2)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(3, 12))
def test_linear_fit_recovers_lines(a, b, n):
    x = np.arange(n, dtype=float)
    fit = linear_fit(x, a * x + b)
    assert fit["slope"] == pytest.approx(a, abs=1e-8)
    assert fit["intercept"] == pytest.approx(b, abs=1e-8)


def test_lyapunov_dirac_on_cat_map():
    r = lyapunov_estimate([(CAT, F(1))], n=200, trials=8)
    assert r["lambda1"] == pytest.approx(LAMBDA_CAT, rel=1e-2)
    # deterministic products: every trial agrees
    assert r.stderr("lambda1") < 1e-12


def test_lyapunov_rotation_is_zero():
    r = lyapunov_estimate([(ROT, F(1, 2)), (((1, 0), (0, 1)), F(1, 2))], n=64, trials=50)
    assert abs(r["lambda1"]) < 1e-12


def test_lyapunov_stderr_scales_like_inverse_sqrt():
    mu = scenario("heisenberg-sl2").measure
    Z = center(mu.schema)
    small = lyapunov_estimate(mu, n=32, trials=500, seed=1)
    big = lyapunov_estimate(mu, n=32, trials=8000, seed=1)
    ratio = small.stderr("lambda1") / big.stderr("lambda1")
    assert ratio == pytest.approx(4.0, rel=0.2)
    # the scalar theta_Z block is trivial
    assert lyapunov_estimate(mu, n=16, trials=10, Z=Z)["lambda1"] == pytest.approx(0.0, abs=1e-12)


def test_lyapunov_rejects_bad_arguments():
    with pytest.raises(ValueError):
        lyapunov_estimate([(CAT, F(1))], n=0)
    with pytest.raises(ValueError):
        lyapunov_estimate([(CAT, F(1))], n=5, burn_in=5)


def test_tau_zero_on_heisenberg_center():
    d = scenario("heisenberg-sl2")
    r = tau_Z_estimate(d.measure, d.Z, ms=range(1, 11))
    assert r["tau_hat"] == 0.0
    assert all(c == 1 for _, c in r.curves["counts_kappa0.1"])


def test_tau_dirac_counts_one():
    r = tau_Z_estimate([(CAT, F(1))], None, ms=range(1, 8))
    assert [c for _, c in r.curves["counts_kappa0.1"]] == [1] * 7
    assert r["tau_hat"] == 0.0


def test_tau_positive_on_block_triangular():
    d = scenario("block-triangular", k=1)
    r = tau_Z_estimate(d.measure, d.Z, kappas=(0.1, 0.3), ms=range(1, 11))
    counts = [c for _, c in r.curves["counts_kappa0.1"]]
    assert counts == sorted(counts) and counts[-1] > counts[0]
    assert r["tau_hat"] > 0
    # a larger kappa asks for more mass, hence at least as many matrices
    assert all(a <= b for (_, a), (_, b) in zip(r.curves["counts_kappa0.1"], r.curves["counts_kappa0.3"]))


def test_sigma_of_identity_is_zero():
    T2 = SCHEMAS["torus2"]
    mu = FiniteMeasure.uniform([Automorphism.identity(T2)])
    assert sigma_estimate(mu, R=3)["sigma_hat"] == pytest.approx(0.0, abs=1e-9)


def test_sigma_increases_with_k():
    vals = []
    for k in (1, 2, 3):
        d = scenario("block-triangular", k=k)
        r = sigma_estimate(d.measure, d.Z, R=3, ms=range(1, 5))
        assert not r.flags
        vals.append(r["sigma_hat"])
    assert vals[0] > 0 and vals[0] < vals[1] < vals[2]


def test_sigma_rejects_nilmanifold_total_space():
    mu = scenario("heisenberg-sl2").measure
    with pytest.raises(ValueError):
        sigma_estimate(mu)


def test_sparse_transfer_is_unitary_for_a_dirac():
    T2 = SCHEMAS["torus2"]
    atoms = torus_matrix_measure(FiniteMeasure.uniform([Automorphism.torus(T2, CAT)]))
    phi = {(1, 0): 1.0, (0, 1): 0.5j, (2, -3): -1.0}
    out = apply_T_sparse(atoms, phi)
    assert l2(out) == pytest.approx(l2(phi))
    assert len(out) == len(phi)


def test_y0_norm_of_dirac_is_one():
    nrm, info = y0_norm([(CAT, 1.0)], R=6)
    assert info["converged"]
    # a permutation of frequencies restricted to a box is a partial isometry
    assert nrm == pytest.approx(1.0, abs=1e-8)


def test_sqrt3_check_small_dictionary():
    d = scenario("block-triangular", k=1)
    nu = [(np.array(M), float(w)) for M, w in d.extra["nu"]]
    dic = [{(1, 0, 0, 0): 1.0}, {(0, 1, 1, 0): 1.0, (1, 1, 0, 1): -1.0}]
    res = sqrt3_check(d.measure, nu, dic, slack=0.05, R=8)
    assert len(res.ratios) == 2 and res.y0_norm > 0
    assert res.ok, res.violations


def test_report_write(tmp_path):
    r = tau_Z_estimate([(CAT, F(1))], None, ms=range(1, 4))
    paths = r.write(tmp_path, "tau")
    blob = json.loads(paths[0].read_text())
    assert blob["provenance"]["config_hash"] == r.provenance["config_hash"]
    assert any(p.name == "tau_support.csv" for p in paths)
