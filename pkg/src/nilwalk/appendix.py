"""Finite measures on matrix algebras, non-concentration checks, large
deviations and return times for linear random walks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from sympy import Matrix

from .estimators import linear_fit, log_norm_products, lyapunov_estimate
from .walk import CHUNK, DEFAULT_CAP, WalkCapExceeded, step_uniforms

Mat = tuple  # tuple of tuples of Fraction


def as_mat(M) -> Mat:
    return tuple(tuple(Fraction(v) for v in r) for r in M)


def _add(a: Mat, b: Mat, sign=1) -> Mat:
    return tuple(tuple(x + sign * y for x, y in zip(r, s)) for r, s in zip(a, b))


def _mul(a: Mat, b: Mat) -> Mat:
    n = len(b)
    return tuple(tuple(sum(a[i][t] * b[t][j] for t in range(n)) for j in range(len(b[0])))
                 for i in range(len(a)))


def _det(a: Mat) -> Fraction:
    """Laplace expansion; exact on Fractions and fine for k <= 4."""
    if len(a) == 1:
        return a[0][0]
    if len(a) == 2:
        return a[0][0] * a[1][1] - a[0][1] * a[1][0]
    return sum((-1) ** j * a[0][j] * _det(tuple(r[:j] + r[j + 1:] for r in a[1:]))
               for j in range(len(a)))


@dataclass(frozen=True)
class AlgebraMeasure:
    """Finitely supported probability measure on E (default: all k x k matrices)."""

    k: int
    atoms: tuple  # ((Mat, Fraction), ...) sorted, merged
    basis: tuple | None = None  # spanning matrices of a subalgebra E

    def __post_init__(self):
        tot = sum(w for _, w in self.atoms)
        if tot != 1:
            raise ValueError(f"weights sum to {tot}, not 1")
        if self.basis is not None:
            B = Matrix([[v for r in b for v in r] for b in self.basis]).T
            for M, _ in self.atoms:
                v = Matrix([x for r in M for x in r])
                try:
                    sol, params = B.gauss_jordan_solve(v)
                except ValueError:
                    raise ValueError("atom does not lie in E") from None

    @classmethod
    def from_pairs(cls, pairs, k: int | None = None, basis=None, cap: int = DEFAULT_CAP) -> "AlgebraMeasure":
        acc: dict = {}
        for M, w in pairs:
            M = as_mat(M)
            acc[M] = acc.get(M, Fraction(0)) + Fraction(w)
            if len(acc) > cap:
                raise WalkCapExceeded(f"more than {cap} atoms")
        k = k if k is not None else len(next(iter(acc)))
        return cls(k, tuple(sorted((M, w) for M, w in acc.items() if w)), basis)

    @classmethod
    def uniform(cls, mats, basis=None) -> "AlgebraMeasure":
        mats = list(mats)
        return cls.from_pairs([(M, Fraction(1, len(mats))) for M in mats], basis=basis)

    @classmethod
    def dirac(cls, M, basis=None) -> "AlgebraMeasure":
        return cls.from_pairs([(M, 1)], basis=basis)

    @classmethod
    def zero(cls, k: int) -> "AlgebraMeasure":
        return cls.dirac([[0] * k for _ in range(k)])

    @classmethod
    def identity(cls, k: int) -> "AlgebraMeasure":
        return cls.dirac([[int(i == j) for j in range(k)] for i in range(k)])

    def __len__(self):
        return len(self.atoms)


def _combine(eta, eta2, op, cap):
    if eta.k != eta2.k:
        raise ValueError("measures live on different algebras")
    pairs = ((op(a, b), w * v) for a, w in eta.atoms for b, v in eta2.atoms)
    return AlgebraMeasure.from_pairs(pairs, eta.k, eta.basis, cap)


def add_convolve(eta, eta2, cap: int = DEFAULT_CAP) -> AlgebraMeasure:
    return _combine(eta, eta2, _add, cap)


def sub_convolve(eta, eta2, cap: int = DEFAULT_CAP) -> AlgebraMeasure:
    return _combine(eta, eta2, lambda a, b: _add(a, b, -1), cap)


def mult_convolve(eta, eta2, cap: int = DEFAULT_CAP) -> AlgebraMeasure:
    return _combine(eta, eta2, _mul, cap)


def boxplus_power(eta, k: int, cap: int = DEFAULT_CAP) -> AlgebraMeasure:
    if k < 1:
        raise ValueError("k must be >= 1")
    out = eta
    for _ in range(k - 1):
        out = add_convolve(out, eta, cap)
    return out


def fourier_algebra(eta: AlgebraMeasure, xi) -> complex:
    """sum_w w e(xi(x)) with xi(x) = sum_ij xi_ij x_ij."""
    xi = np.asarray(xi, dtype=float)
    X = np.array([[[float(v) for v in r] for r in M] for M, _ in eta.atoms])
    w = np.array([float(p) for _, p in eta.atoms])
    return complex(np.sum(w * np.exp(2j * np.pi * np.einsum("ij,nij->n", xi, X))))


# --- positivity -----------------------------------------------------------------

@dataclass
class PositivityReport:
    values: list  # (xi, value, lhs)
    violations: list

    @property
    def ok(self):
        return not self.violations


def positivity_check(nu, nu1, nu2, k: int, xis, tol: float = 1e-12) -> PositivityReport:
    """Check that (nu * (nu1^{+k} - nu1^{+k}) * nu2)^ is real, >= 0 and dominates |(nu*nu1*nu2)^|^{2k}."""
    pk = boxplus_power(nu1, k)
    mid = sub_convolve(pk, pk)
    big = mult_convolve(mult_convolve(nu, mid), nu2)
    small = mult_convolve(mult_convolve(nu, nu1), nu2)
    vals, bad = [], []
    for xi in xis:
        v = fourier_algebra(big, xi)
        lhs = abs(fourier_algebra(small, xi)) ** (2 * k)
        vals.append((np.asarray(xi).tolist(), v, lhs))
        if v.real < -tol or abs(v.imag) > tol or lhs > v.real + tol:
            bad.append((np.asarray(xi).tolist(), v, lhs))
    return PositivityReport(vals, bad)


# --- non-concentration ----------------------------------------------------------

@dataclass
class NCReport:
    delta: float
    params: dict
    cond1_mass: float
    cond1_ok: bool
    cond2_max: float
    cond2_witness: object
    cond2_ok: bool
    cond3_max_ratio: float
    cond3_witness: dict
    cond3_ok: bool
    family: dict = field(default_factory=dict)
    semantics: str = "the determinant and hyperplane conditions are lower bounds over the documented family"

    @property
    def ok(self):
        return self.cond1_ok and self.cond2_ok and self.cond3_ok

    def to_json(self):
        return {k: (str(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _flat(M) -> np.ndarray:
    return np.array([float(v) for r in M for v in r])


def _hyperplane_through(points: np.ndarray):
    """Unit normal n and offset c with n.x = c for all rows (some hyperplane if degenerate)."""
    p0 = points[0]
    D = points.shape[1]
    diffs = points[1:] - p0 if len(points) > 1 else np.zeros((0, D))
    if len(diffs):
        _, s, vt = np.linalg.svd(diffs, full_matrices=True)
        rank = int(np.sum(s > 1e-9 * max(1.0, s.max(initial=0))))
        if rank >= D:
            return None
        n = vt[rank]
    else:
        n = np.eye(D)[0]
    n = n / np.linalg.norm(n)
    return n, float(n @ p0)


def nc_check(eta: AlgebraMeasure, eps: float, kappa: float, tau: float, delta: float,
             n_random: int = 16, refine: int = 32, seed: int = 0, max_subsets: int = 20000) -> NCReport:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    mats = [M for M, _ in eta.atoms]
    w = np.array([float(p) for _, p in eta.atoms])
    P = np.array([_flat(M) for M in mats])
    bound = delta ** tau
    # mass outside the ball of radius delta^-eps (operator 2-norm)
    norms = np.array([np.linalg.norm(np.array([[float(v) for v in r] for r in M]), 2) for M in mats])
    c1 = float(w[norms > delta ** (-eps)].sum())
    # small determinant neighbourhoods of candidate centres
    thr = delta ** eps
    cands = list(mats) + [_add(a, b, -1) for a, b in itertools.permutations(mats, 2)]
    best2, wit2 = -1.0, None
    seen = set()
    for x in cands:
        if x in seen:
            continue
        seen.add(x)
        mass = sum(float(p) for M, p in eta.atoms if abs(_det(_add(M, x, -1))) <= thr)
        if mass > best2:
            best2, wit2 = mass, x
    # neighbourhoods of affine hyperplanes
    D = P.shape[1]
    rhos = [delta * 2 ** j for j in range(int(math.floor(math.log2(1 / delta))) + 1)] + [1.0]
    planes = []
    size = min(D, len(P))
    for i, sub in enumerate(itertools.combinations(range(len(P)), size)):
        if i >= max_subsets:
            break
        hp = _hyperplane_through(P[list(sub)])
        if hp is not None:
            planes.append(("atoms", sub, hp))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        n = rng.standard_normal(D)
        n /= np.linalg.norm(n)
        planes.append(("random", None, (n, float(n @ P[rng.integers(len(P))]))))

    def score(hp):
        n, c = hp
        dist = np.abs(P @ n - c)
        best = (-1.0, None, None)
        for rho in rhos:
            mass = float(w[dist <= rho].sum())
            r = mass / (delta ** (-eps) * rho ** kappa)
            if r > best[0]:
                best = (r, rho, mass)
        return best

    best3 = (-1.0, None)
    for kind, sub, hp in planes:
        sc = score(hp)
        if sc[0] > best3[0]:
            best3 = (sc[0], {"kind": kind, "atoms": sub, "normal": hp[0].tolist(), "offset": hp[1],
                             "rho": sc[1], "mass": sc[2]})
    # local refinement of the best plane
    if best3[1] is not None:
        n0, c0 = np.array(best3[1]["normal"]), best3[1]["offset"]
        for _ in range(refine):
            n = n0 + 0.05 * rng.standard_normal(D)
            n /= np.linalg.norm(n)
            anchor = P[rng.integers(len(P))]
            sc = score((n, float(n @ anchor)))
            if sc[0] > best3[0]:
                n0, c0 = n, float(n @ anchor)
                best3 = (sc[0], {"kind": "refined", "atoms": None, "normal": n.tolist(), "offset": c0,
                                 "rho": sc[1], "mass": sc[2]})
    fam = {"centres": len(seen), "hyperplanes": len(planes), "random": n_random, "refine": refine,
           "rhos": rhos}
    return NCReport(delta, {"eps": eps, "kappa": kappa, "tau": tau}, c1, c1 <= bound, best2, wit2,
                    best2 <= bound, best3[0], best3[1], best3[0] <= 1.0, fam)


# --- large deviations --------------------------------------------------------------

@dataclass
class TailTable:
    rows: list  # (m, probability)
    kappa_hat: float
    r2: float
    lambda_hat: float
    omega: float
    fit_prefix: int
    zero_rows: list

    def to_json(self):
        return self.__dict__


def ld_tail(theta_mu, omega: float, ms: Sequence[int], trials: int, seed: int = 0,
            lambda_hat: float | None = None, lyap_steps: int = 400, lyap_trials: int = 2000) -> TailTable:
    """P[log||g_m...g_1|| > m(lambda_hat + omega)] per m and an exponential fit."""
    ms = sorted(set(int(m) for m in ms))
    if lambda_hat is None:
        lambda_hat = lyapunov_estimate(theta_mu, lyap_steps, lyap_trials, seed=seed + 1,
                                       burn_in=lyap_steps // 4)["lambda1"]
    ln = log_norm_products(theta_mu, max(ms), trials, seed, checkpoints=ms[:-1])
    rows = []
    for j, m in enumerate(ms):
        col = ln[:, j] if j < len(ms) - 1 else ln[:, -1]
        rows.append((m, float(np.mean(col > m * (lambda_hat + omega)))))
    zero = [m for m, p in rows if p == 0]
    prefix = []
    for m, p in rows:
        if p == 0:
            break
        prefix.append((m, p))
    if len(prefix) >= 2:
        fit = linear_fit([m for m, _ in prefix], [math.log(p) for _, p in prefix])
        kappa, r2 = -fit["slope"], fit["r2"]
    else:
        kappa, r2 = float("nan"), float("nan")
    return TailTable(rows, kappa, r2, lambda_hat, omega, len(prefix), zero)


# --- return times --------------------------------------------------------------------

@dataclass
class Labeling:
    """Generator -> element of a finite group; elements are hashable, group law given."""

    labels: list
    op: object = None  # (a, b) -> a b ; default: addition mod ``order``
    identity: object = 0
    order: int = 2

    def mul(self, a, b):
        return self.op(a, b) if self.op is not None else (a + b) % self.order


@dataclass
class ReturnTimeSample:
    T_hat: float
    T_stderr: float
    lambda_mu: tuple
    lambda_circ: tuple
    consistent: bool
    mu_circ: list  # exact atoms of mu° up to the first return within the step cap (prob, label check)
    tail: list
    tail_fit: dict
    taus: np.ndarray = field(repr=False, default=None)

    def to_json(self):
        d = dict(self.__dict__)
        d.pop("taus")
        return d


def _mat_pairs(theta_mu):
    return [(np.asarray(M, dtype=float), float(w)) for M, w in theta_mu]


def first_return_law(theta_mu, labeling: Labeling, max_len: int = 12) -> list:
    """Exact atoms (word product, weight, label) of mu° truncated at word length max_len."""
    out = []
    k = len(theta_mu[0][0])
    I = tuple(tuple(int(i == j) for j in range(k)) for i in range(k))
    frontier = [(I, Fraction(1), labeling.identity)]
    for _ in range(max_len):
        nxt = []
        for P, w, lab in frontier:
            for (M, p), l in zip(theta_mu, labeling.labels):
                Q = tuple(tuple(sum(int(M[i][t]) * P[t][j] for t in range(k)) for j in range(k))
                          for i in range(k))
                nl = labeling.mul(l, lab)
                if nl == labeling.identity:
                    out.append((Q, w * Fraction(p), nl))
                else:
                    nxt.append((Q, w * Fraction(p), nl))
        frontier = nxt
    return out


def return_time_sim(theta_mu, labeling: Labeling, m: int, trials: int, seed: int = 0,
                    omega: float = 0.25, step_cap: int | None = None) -> ReturnTimeSample:
    """Simulate the walk, record the first m returns to the identity coset.

    lambda(mu) uses the plain walk; lambda(mu°) uses the walk observed at
    return times, both with a burn-in over the first quarter to cancel the
    start-direction bias.
    """
    pairs = _mat_pairs(theta_mu)
    mats = np.array([M for M, _ in pairs])
    w = np.array([p for _, p in pairs])
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    labels = list(labeling.labels)
    steps = step_cap or 8 * m + 64
    d = mats.shape[1]
    taus = np.full((trials, m), -1, dtype=np.int64)
    logs_ret = np.zeros((trials, m))
    logs_walk = np.zeros((trials, steps))
    for ch in range((trials + CHUNK - 1) // CHUNK):
        lo = ch * CHUNK
        cnt = min(CHUNK, trials - lo)
        idx = np.searchsorted(cdf, step_uniforms(seed, ch, steps)[:cnt], side="right")
        S = np.repeat(np.eye(d)[None], cnt, axis=0)
        acc = np.zeros(cnt)
        lab = [labeling.identity] * cnt
        nret = np.zeros(cnt, dtype=np.int64)
        for j in range(steps):
            S = mats[idx[:, j]] @ S
            nr = np.linalg.norm(S, axis=(1, 2))
            acc += np.log(nr)
            S /= nr[:, None, None]
            cur = acc + np.log(np.linalg.norm(S, 2, axis=(1, 2)))
            logs_walk[lo:lo + cnt, j] = cur
            for t in range(cnt):
                lab[t] = labeling.mul(labels[idx[t, j]], lab[t])
                if lab[t] == labeling.identity and nret[t] < m:
                    taus[lo + t, nret[t]] = j + 1
                    logs_ret[lo + t, nret[t]] = cur[t]
                    nret[t] += 1
    if np.any(taus[:, 0] < 0):
        raise RuntimeError("no return to the identity coset within the step cap")
    complete = np.all(taus >= 0, axis=1)
    tau1 = taus[:, 0].astype(float)
    T_hat, T_se = float(tau1.mean()), float(tau1.std(ddof=1) / math.sqrt(trials))
    b = max(1, m // 4)
    lc = (logs_ret[complete, m - 1] - logs_ret[complete, b - 1]) / (m - b)
    lam_c = (float(lc.mean()), float(lc.std(ddof=1) / math.sqrt(len(lc))))
    n, nb = steps, steps // 4
    lw = (logs_walk[:, n - 1] - logs_walk[:, nb - 1]) / (n - nb)
    lam = (float(lw.mean()), float(lw.std(ddof=1) / math.sqrt(trials)))
    comb = math.sqrt(lam_c[1] ** 2 + (T_hat * lam[1]) ** 2 + (lam[0] * T_se) ** 2)
    ok = abs(lam_c[0] - T_hat * lam[0]) <= 3 * comb + 1e-9 * (1 + abs(lam_c[0]))
    tail = []
    for j in range(1, m + 1):
        col = taus[complete, j - 1]
        tail.append((j, float(np.mean(np.abs(col - T_hat * j) >= omega * j))))
    pref = [(j, p) for j, p in tail if p > 0]
    fit = linear_fit([j for j, _ in pref], [math.log(p) for _, p in pref]) if len(pref) >= 2 else {}
    mu_c = first_return_law(theta_mu, labeling, max_len=min(12, steps))
    return ReturnTimeSample(T_hat, T_se, lam, lam_c, ok, mu_c, tail, fit, taus)


# --- Fourier decay scan ------------------------------------------------------------------

@dataclass
class DecayScan:
    rows: list  # (xi_norm, coset, modulus)
    coset_mass: dict
    n: int


def exact_labeled_power(theta_mu, labeling: Labeling, n: int, cap: int = DEFAULT_CAP) -> dict:
    """(product matrix, label) -> weight for mu^{*n}."""
    k = len(theta_mu[0][0])
    I = tuple(tuple(Fraction(int(i == j)) for j in range(k)) for i in range(k))
    cur = {(I, labeling.identity): Fraction(1)}
    for _ in range(n):
        nxt: dict = {}
        for (M, p), l in zip(theta_mu, labeling.labels):
            Mq = as_mat(M)
            for (P, lab), v in cur.items():
                key = (_mul(Mq, P), labeling.mul(l, lab))
                nxt[key] = nxt.get(key, Fraction(0)) + Fraction(p) * v
        if len(nxt) > cap:
            raise WalkCapExceeded(f"more than {cap} atoms")
        cur = nxt
    return cur


def decay_scan(theta_mu, labeling: Labeling, n: int, xis, coset_reps: dict | None = None,
               cap: int = 200_000) -> DecayScan:
    """|∫_{gamma_j E} e(xi(gamma_j^{-1} g)) d mu^{*n}(g)| per coset and frequency (exact)."""
    if len(xis) > cap:
        raise ValueError("frequency grid too large")
    law = exact_labeled_power(theta_mu, labeling, n)
    k = len(theta_mu[0][0])
    cosets = sorted({lab for _, lab in law}, key=repr)
    reps = coset_reps or {}
    rows, mass = [], {}
    for c in cosets:
        atoms = [(M, w) for (M, lab), w in law.items() if lab == c]
        mass[c] = float(sum(w for _, w in atoms))
        g = reps.get(c)
        ginv = np.linalg.inv(np.asarray(g, dtype=float)) if g is not None else np.eye(k)
        X = np.array([ginv @ np.array([[float(v) for v in r] for r in M]) for M, _ in atoms])
        ws = np.array([float(w) for _, w in atoms])
        for xi in xis:
            xi = np.asarray(xi, dtype=float)
            val = np.sum(ws * np.exp(2j * np.pi * np.einsum("ij,nij->n", xi, X)))
            rows.append((float(np.linalg.norm(xi)), repr(c), float(abs(val))))
    return DecayScan(rows, {repr(c): v for c, v in mass.items()}, n)
