"""Estimators for lambda_1, tau_Z and sigma_{X,Y}, with fit diagnostics."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .affine import FiniteMeasure, theta_Z
from .nilgroup import CentralSubgroupSpec
from .walk import DEFAULT_CAP, WalkCapExceeded, convolve_exact, step_uniforms, CHUNK


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class DiagnosticsReport:
    estimates: dict  # name -> (value, stderr or None)
    fit: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # name -> list of (x, y)
    provenance: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.estimates[name][0]

    def stderr(self, name):
        return self.estimates[name][1]

    def to_json(self) -> dict:
        return {"estimates": {k: list(v) for k, v in self.estimates.items()},
                "fit": self.fit, "flags": self.flags, "provenance": self.provenance}

    def write(self, outdir, stem: str) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [outdir / f"{stem}.json"]
        paths[0].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True, default=str))
        for name, pts in self.curves.items():
            p = outdir / f"{stem}_{name}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "y"])
                w.writerows(pts)
            paths.append(p)
        return paths


def linear_fit(x, y) -> dict:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return {"slope": 0.0, "intercept": float(y[0]) if len(y) else 0.0, "r2": 1.0}
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return {"slope": float(slope), "intercept": float(icpt), "r2": r2}


# --- matrix measures -------------------------------------------------------

def matrix_measure(mu, Z: CentralSubgroupSpec | None = None) -> list:
    """(theta or theta_Z)-pushforward as a merged list of (int matrix, Fraction)."""
    if isinstance(mu, FiniteMeasure):
        acc: dict = {}
        for g, w in mu.atoms:
            if Z is None:
                M = tuple(tuple(int(v) for v in r) for r in g.aut.A)
            else:
                M = theta_Z(g.aut, Z)
            acc[M] = acc.get(M, Fraction(0)) + w
        return sorted(acc.items())
    return [(tuple(tuple(r) for r in np.asarray(M).tolist()), w) for M, w in mu]


def _stack(pairs):
    mats = np.array([np.asarray(M, dtype=float) for M, _ in pairs])
    w = np.array([float(p) for _, p in pairs])
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    return mats, cdf


def log_norm_products(pairs, n: int, trials: int, seed: int = 0, checkpoints=()) -> np.ndarray:
    """log ||g_n ... g_1|| per trial (and at each checkpoint), renormalizing every 16 steps.

    Returns an array of shape (trials, len(checkpoints) + 1).
    """
    mats, cdf = _stack(pairs)
    d = mats.shape[1]
    cps = sorted(set(int(c) for c in checkpoints if 0 < c < n))
    out = np.zeros((trials, len(cps) + 1))
    nchunks = (trials + CHUNK - 1) // CHUNK
    for ch in range(nchunks):
        lo = ch * CHUNK
        cnt = min(CHUNK, trials - lo)
        idx = np.searchsorted(cdf, step_uniforms(seed, ch, n)[:cnt], side="right")
        S = np.repeat(np.eye(d)[None], cnt, axis=0)
        acc = np.zeros(cnt)
        ci = 0
        for j in range(n):
            S = mats[idx[:, j]] @ S
            if (j + 1) % 16 == 0:
                nr = np.linalg.norm(S, axis=(1, 2))
                acc += np.log(nr)
                S /= nr[:, None, None]
            if ci < len(cps) and j + 1 == cps[ci]:
                out[lo:lo + cnt, ci] = acc + np.log(np.linalg.norm(S, 2, axis=(1, 2)))
                ci += 1
        out[lo:lo + cnt, -1] = acc + np.log(np.linalg.norm(S, 2, axis=(1, 2)))
    return out


def lyapunov_estimate(theta_mu, n: int, trials: int = 1000, seed: int = 0, burn_in: int = 0,
                      Z: CentralSubgroupSpec | None = None) -> DiagnosticsReport:
    """Mean of (1/n) log ||g_n ... g_1||.

    With ``burn_in = b > 0`` the per-trial value is
    (log||S_n|| - log||S_b||) / (n - b), which removes the O(1/n) bias of the
    starting direction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= burn_in < n:
        raise ValueError("burn_in must lie in [0, n)")
    pairs = matrix_measure(theta_mu, Z)
    ln = log_norm_products(pairs, n, trials, seed, checkpoints=(burn_in,) if burn_in else ())
    if burn_in:
        vals = (ln[:, -1] - ln[:, 0]) / (n - burn_in)
    else:
        vals = ln[:, -1] / n
    se = float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("nan")
    params = {"op": "lyapunov", "n": n, "trials": trials, "seed": seed, "burn_in": burn_in,
              "measure": [(M, str(w)) for M, w in pairs]}
    return DiagnosticsReport({"lambda1": (float(vals.mean()), se)},
                             provenance={"config_hash": config_hash(params), "params": params})


# --- essential growth on Z -------------------------------------------------

def _mat_mul(a, b):
    return tuple(tuple(sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0])))
                 for i in range(len(a)))


def _greedy_count(weights, mass: float) -> int:
    tot = 0.0
    for i, w in enumerate(sorted(weights, reverse=True)):
        tot += w
        if tot >= mass - 1e-15:
            return i + 1
    return len(weights)


def tau_Z_estimate(mu, Z: CentralSubgroupSpec | None, kappas=(0.1,), ms=range(1, 13),
                   cap: int = DEFAULT_CAP) -> DiagnosticsReport:
    """Greedy essential support counts of (theta_Z)_* mu^{*m} and their log-slope.

    ``mu`` may be a FiniteMeasure (pushed by theta_Z) or a list of
    (integer matrix, weight).  tau_hat is exactly 0 when every count is equal.
    """
    pairs = matrix_measure(mu, Z)
    ms = sorted(set(int(m) for m in ms))
    kappas = sorted(float(k) for k in kappas)
    d = len(pairs[0][0])
    cur = {tuple(tuple(int(i == j) for j in range(d)) for i in range(d)): Fraction(1)}
    counts = {k: [] for k in kappas}
    support = []
    for m in range(1, max(ms) + 1):
        nxt: dict = {}
        for M, w in pairs:
            for P, v in cur.items():
                key = _mat_mul(M, P)
                nxt[key] = nxt.get(key, Fraction(0)) + w * v
            if len(nxt) > cap:
                raise WalkCapExceeded(f"more than {cap} matrices at m={m}")
        cur = nxt
        if m in ms:
            ws = [float(v) for v in cur.values()]
            support.append((m, len(ws)))
            for k in kappas:
                counts[k].append((m, _greedy_count(ws, 1.0 - math.exp(-k * m))))
    est, fits, curves = {}, {}, {}
    for k in kappas:
        xs = [m for m, _ in counts[k]]
        ys = [math.log(c) for _, c in counts[k]]
        if len(set(ys)) == 1:
            fit = {"slope": 0.0, "intercept": ys[0], "r2": 1.0}
        else:
            fit = linear_fit(xs, ys)
        est[f"tau_hat[kappa={k}]"] = (max(fit["slope"], 0.0), None)
        fits[f"kappa={k}"] = fit
        curves[f"counts_kappa{k}"] = counts[k]
    curves["support"] = support
    # the reported value uses the smallest kappa, the infimum over the grid
    est["tau_hat"] = est[f"tau_hat[kappa={kappas[0]}]"]
    params = {"op": "tau", "kappas": kappas, "ms": ms, "measure": [(M, str(w)) for M, w in pairs]}
    return DiagnosticsReport(est, fit=fits, curves=curves,
                             provenance={"config_hash": config_hash(params), "params": params})


# --- spectral decay on the fibers ------------------------------------------

def torus_matrix_measure(mu: FiniteMeasure) -> list:
    """(matrix, translation, weight) for a measure on torus affine maps."""
    out = []
    for g, w in mu.atoms:
        A = np.array([[int(v) for v in r] for r in g.aut.A], dtype=np.int64)
        t = np.array([float(v) for v in g.translation.coords])
        out.append((A, t, float(w)))
    return out


def frequency_box(n: int, R: int, zdim: int):
    """Frequencies with |.|_inf <= R whose first zdim entries are not all zero."""
    states = [s for s in itertools.product(range(-R, R + 1), repeat=n) if any(s[:zdim])]
    return states, {s: i for i, s in enumerate(states)}


def transfer_matrix(atoms, states, index) -> sparse.csr_matrix:
    """(T phi)(xi) = sum_g w e(-<xi, t_g>) phi(g^T xi), truncated to the box."""
    rows, cols, vals = [], [], []
    S = np.array(states, dtype=np.int64)
    for A, t, w in atoms:
        img = S @ A  # row xi -> A^T xi
        ph = w * np.exp(-2j * np.pi * (S @ t))
        for i, row in enumerate(map(tuple, img)):
            j = index.get(row)
            if j is not None:
                rows.append(i)
                cols.append(j)
                vals.append(ph[i])
    n = len(states)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


def operator_norm(apply, apply_adj, dim: int, tol: float = 1e-10, maxiter: int = 2000, seed: int = 0):
    """Largest singular value by power iteration on apply_adj . apply."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = 0.0
    for it in range(maxiter):
        w = apply_adj(apply(v))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0, True, it
        v = w / nrm
        s = math.sqrt(nrm)
        if abs(s - prev) <= tol * max(s, 1e-300):
            return s, True, it
        prev = s
    return prev, False, maxiter


class PowerIterationError(RuntimeError):
    pass


def sigma_estimate(mu: FiniteMeasure, Z: CentralSubgroupSpec | None = None,
                   method: str = "frequency-truncation", R: int = 3, ms=range(1, 7),
                   dictionary=None, resolution: int = 12, r2_min: float = 0.9,
                   strict: bool = False) -> DiagnosticsReport:
    """Estimate of sigma_{X,Y}(mu); an estimate, never a certified bound."""
    ms = sorted(set(int(m) for m in ms))
    if method == "frequency-truncation":
        s = mu.schema
        if s.c:
            raise ValueError("frequency truncation needs a torus total space")
        zdim = Z.dim if Z is not None else s.n
        if Z is not None and tuple(Z.indices) != tuple(range(zdim)):
            raise ValueError("Z must be the leading coordinates")
        states, index = frequency_box(s.n, R, zdim)
        T = transfer_matrix(torus_matrix_measure(mu), states, index)
        TH = T.conj().T.tocsr()
        pts, flags = [], []
        for m in ms:
            def fwd(v, m=m):
                for _ in range(m):
                    v = T @ v
                return v

            def adj(v, m=m):
                for _ in range(m):
                    v = TH @ v
                return v
            nrm, ok, _ = operator_norm(fwd, adj, len(states))
            if not ok:
                if strict:
                    raise PowerIterationError(f"no convergence at m={m}")
                flags.append(f"power iteration not converged at m={m}")
            pts.append((m, math.log(max(nrm, 1e-300))))
        diag = {"box_radius": R, "states": len(states)}
    elif method == "l2-decay":
        from .observables import _midpoint  # quadrature of |.|^2 on the box
        if not dictionary:
            raise ValueError("l2-decay needs a dictionary of functions in H_a, a != 0")
        flags = []
        per_f = []
        for f in dictionary:
            if f.freq is None or not any(f.freq):
                raise ValueError("dictionary entries must have a known nonzero fiber frequency")
            curve = []
            for m in ms:
                nu = convolve_exact(mu, m)
                g = _PushSum(f, nu)
                n2 = _midpoint(_Abs2(g), f.schema, resolution, list(range(f.schema.n))).real
                curve.append((m, 0.5 * math.log(max(n2, 1e-300))))
            per_f.append(curve)
        # worst (slowest) decay over the dictionary
        fits_f = [linear_fit(*zip(*c)) for c in per_f]
        i = int(np.argmax([ft["slope"] for ft in fits_f]))
        pts = per_f[i]
        diag = {"dictionary_size": len(dictionary), "resolution": resolution,
                "per_function_slopes": [ft["slope"] for ft in fits_f]}
    else:
        raise ValueError(f"unknown method {method!r}")
    ys = [y for _, y in pts]
    if max(ys) - min(ys) < 1e-12:
        fit = {"slope": 0.0, "intercept": ys[0], "r2": 1.0}
    else:
        fit = linear_fit(*zip(*pts))
    if fit["r2"] < r2_min:
        flags.append(f"fit R^2 {fit['r2']:.3f} below {r2_min}")
    fit.update(diag)
    params = {"op": "sigma", "method": method, "R": R, "ms": ms, "measure": mu.to_json()}
    return DiagnosticsReport({"sigma_hat": (-fit["slope"], None)}, fit={"log_norm": fit},
                             curves={"log_norm": pts}, flags=flags,
                             provenance={"config_hash": config_hash(params), "params": params,
                                         "label": "estimate"})


class _PushSum:
    """x -> sum_g w_g f(g x) for an exact measure, i.e. U*(nu) f."""

    def __init__(self, f, nu):
        self.f, self.nu = f, nu

    def eval_np(self, pts):
        from .affine import apply_np
        out = np.zeros(len(pts), dtype=complex)
        for g, w in self.nu.atoms:
            out += float(w) * self.f.eval_np(apply_np(g, pts))
        return out


class _Abs2:
    def __init__(self, g):
        self.g = g

    def eval_np(self, pts):
        return np.abs(self.g.eval_np(pts)) ** 2


# --- the sqrt(3) comparison for block-triangular measures --------------------

def apply_T_sparse(atoms, phi: dict) -> dict:
    """Exact (T phi) for finitely supported phi on frequencies (dict form).

    (T phi)(xi) = sum_g w e(-<xi,t>) phi(g^T xi); the preimage of a frequency
    eta is xi = g^{-T} eta.
    """
    out: dict = {}
    for A, t, w in atoms:
        Ainv_T = np.rint(np.linalg.inv(A.T.astype(float))).astype(np.int64)
        for eta, val in phi.items():
            xi = tuple(int(v) for v in Ainv_T @ np.asarray(eta, dtype=np.int64))
            ph = np.exp(-2j * np.pi * float(np.dot(xi, t)))
            out[xi] = out.get(xi, 0) + w * ph * val
    return {k: v for k, v in out.items() if v != 0}


def l2(phi: dict) -> float:
    return math.sqrt(sum(abs(v) ** 2 for v in phi.values()))


def y0_norm(nu_mats, R: int = 20, seed: int = 0) -> tuple[float, dict]:
    """||U_{Y,0}(nu)|| via (V_0 psi)(b) = E psi(D^T b) on Z^d minus 0, box |b| <= R.

    The truncation is a compression, so the value is a lower estimate.
    """
    d = len(nu_mats[0][0])
    states, index = frequency_box(d, R, d)
    atoms = [(np.asarray(M, dtype=np.int64), np.zeros(d), float(w)) for M, w in nu_mats]
    V = transfer_matrix(atoms, states, index)
    VH = V.conj().T.tocsr()
    nrm, ok, it = operator_norm(lambda v: V @ v, lambda v: VH @ v, len(states), seed=seed)
    return nrm, {"box_radius": R, "states": len(states), "converged": ok, "iterations": it}


@dataclass
class Sqrt3Check:
    ratios: list  # ||T^2 phi|| / (sqrt3 ||U_{Y,0}(nu)|| ||phi||)
    y0_norm: float
    slack: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def sqrt3_check(mu: FiniteMeasure, nu_mats, dictionary, slack: float = 0.05, R: int = 20) -> Sqrt3Check:
    """Compare ||T(mu)^2 phi|| with sqrt(3) ||U_{Y,0}(nu)|| ||phi|| over Fourier-sparse phi."""
    atoms = torus_matrix_measure(mu)
    nY, _ = y0_norm(nu_mats, R)
    ratios, bad = [], []
    for i, phi in enumerate(dictionary):
        lhs = l2(apply_T_sparse(atoms, apply_T_sparse(atoms, phi)))
        rhs = math.sqrt(3) * nY * l2(phi)
        r = lhs / rhs if rhs > 0 else math.inf
        ratios.append(r)
        if r > 1 + slack:
            bad.append((i, lhs, rhs))
    return Sqrt3Check(ratios, nY, slack, bad)
