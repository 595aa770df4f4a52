"""From a non-equidistribution witness on X to one on Y, plus the detectors
for low-height invariant subgroups, rational points and finite orbits."""

from __future__ import annotations

import functools
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from sympy import Matrix
from sympy.matrices.normalforms import hermite_normal_form

from .affine import AffineMap, FiniteMeasure, apply_np, lipschitz_upper, theta_Z
from .nilgroup import CentralSubgroupSpec, NilGroupSchema, center
from .observables import (
    Bump,
    Combination,
    Conjugate,
    Fejer,
    Product,
    Pullback,
    TestFunction,
    fiber_project,
    integrate_empirical,
    integrate_haar,
)
from .walk import EmpiricalMeasure, convolve_exact, push_measure


class AnalyticFailure(RuntimeError):
    """Structured failure of a pipeline step; ``details`` is JSON-able."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


# --- certificates ------------------------------------------------------------

@dataclass
class WitnessCertificate:
    f: TestFunction
    measure: EmpiricalMeasure
    deviation: float
    tolerance: float
    haar: complex
    resolution: int
    log: list = field(default_factory=list)

    def verify(self, resolution: int | None = None) -> tuple[bool, float]:
        """Recompute the deviation with an independent quadrature resolution."""
        res = resolution or (self.resolution + 5)
        h = integrate_haar(self.f, res)
        d = abs(integrate_empirical(self.f, self.measure) - h.value) / self.f.norm_bound
        return d >= self.deviation - self.tolerance - h.error / self.f.norm_bound, d

    def to_json(self) -> dict:
        return {"deviation": self.deviation, "tolerance": self.tolerance,
                "norm_bound": self.f.norm_bound, "fiber_frequency": self.f.freq,
                "haar": [self.haar.real, self.haar.imag], "resolution": self.resolution,
                "log": self.log}


def certify(f: TestFunction, nu: EmpiricalMeasure, resolution: int = 16, log=None) -> WitnessCertificate:
    q = integrate_haar(f, resolution)
    emp = integrate_empirical(f, nu)
    dev = abs(emp - q.value) / f.norm_bound if f.norm_bound else 0.0
    tol = q.error / f.norm_bound + 1e-9 if f.norm_bound else 1e-9
    return WitnessCertificate(f, nu, dev, tol, q.value, q.resolution, list(log or []))


# --- Fejer calibration --------------------------------------------------------

@functools.lru_cache(maxsize=32)
def fejer_constant(schema: NilGroupSchema, alpha: float, Ns=(2, 4, 8, 16)) -> float:
    """Measured C with ||F_N f - f||_inf <= C N^-alpha ||f|| on calibration bumps."""
    Z = center(schema) if schema.c else CentralSubgroupSpec(schema, (0,))
    zc = [i for i in Z.indices]
    best = 0.0
    for zw in (0.2, 0.3, 0.4):
        ctr = tuple(0.5 for _ in range(schema.n))
        kw = dict(width=0.2, p=alpha, alpha=alpha, Z=Z)
        if schema.c:
            kw["zwidth"] = zw / schema.q
        b = Bump(schema, ctr, **kw)
        # the error peaks on the fiber through the centre
        t = np.linspace(0, 1, 401)
        pts = np.tile(np.asarray(ctr, float), (len(t), 1))
        for i in zc:
            pts[:, i] = t * (1.0 / Z.scale[zc.index(i)])
        base = b.eval_np(pts)
        for N in Ns:
            err = float(np.max(np.abs(Fejer(b, N).eval_np(pts) - base)))
            best = max(best, err * N ** alpha / b.norm_bound)
    return best


# --- fiber character ------------------------------------------------------------

def _deviation(f: TestFunction, nu: EmpiricalMeasure, resolution: int):
    if f.norm_bound == 0:
        return 0.0, 0j
    h = integrate_haar(f, resolution).value
    return abs(integrate_empirical(f, nu) - h) / f.norm_bound, h


def find_fiber_character(f: TestFunction, nu: EmpiricalMeasure, t: float, alpha: float | None = None,
                         N_max: int = 8, resolution: int = 16):
    """Scan F_a f over the Fejer box; returns (a0, certificate for F_{a0} f)."""
    alpha = alpha or f.alpha
    Z = f.Z
    if Z is None or Z.dim == 0:
        cert = certify(f, nu, resolution, [{"step": "find_fiber_character", "trivial_fiber": True}])
        return (), cert
    d = Z.dim
    C = max(fejer_constant(f.schema, alpha), 1e-12)
    N = max(1, math.ceil((4 * C / t) ** (1 / alpha)))
    capped = N > N_max
    N = min(N, N_max)
    exponent = 1 + d / alpha
    threshold = t ** exponent
    box = sorted(itertools.product(range(-N + 1, N), repeat=d),
                 key=lambda a: (sum(v * v for v in a), a))
    if f.freq is not None:
        box = [f.freq]  # every other projection vanishes
    devs = []
    for a in box:
        fa = fiber_project(f, a)
        dev, h = _deviation(fa, nu, resolution)
        devs.append((a, dev))
        if dev >= threshold and dev > 0:
            log = [{"step": "find_fiber_character", "a0": list(a), "N": N, "N_capped": capped,
                    "C_fejer": C, "exponent": exponent, "threshold": threshold, "t": t,
                    "deviation": dev}]
            return tuple(a), certify(fa, nu, resolution, log)
    raise AnalyticFailure("no fiber frequency found in the Fejer box",
                          {"N": N, "threshold": threshold, "deviations": [(list(a), v) for a, v in devs]})


# --- partition by the action on fiber characters ------------------------------

def partition_measure(nu_exact: FiniteMeasure, a0: Sequence[int], Z: CentralSubgroupSpec):
    """Classes P_a = {g : theta(g)^{-1} . a0 = a}, i.e. a = E^T a0."""
    a0 = np.asarray(a0, dtype=np.int64)
    acc: dict = {}
    for g, w in nu_exact.atoms:
        E = np.array(theta_Z(g.aut, Z), dtype=np.int64)
        a = tuple(int(v) for v in E.T @ a0)
        acc.setdefault(a, []).append((g, w))
    out = []
    for a in sorted(acc):
        atoms = acc[a]
        p = sum(w for _, w in atoms)
        out.append((a, p, FiniteMeasure(tuple((g, w / p) for g, w in atoms))))
    return out


def push_sum(f: TestFunction, nu: FiniteMeasure) -> TestFunction:
    """U*(nu) f as a convex combination of pullbacks."""
    return Combination([(float(w), Pullback(f, g)) for g, w in nu.atoms])


def c_beta(mu: FiniteMeasure, beta: float = 1.0) -> float:
    return math.fsum(float(w) * lipschitz_upper(g) ** beta for g, w in mu.atoms)


def cs_step(f0: TestFunction, mu: FiniteMeasure, m: int, eta: EmpiricalMeasure, t: float | None = None,
            beta: float | None = None, resolution: int = 16) -> WitnessCertificate:
    """Cauchy-Schwarz step: from f0 in H_{a0}, a0 != 0, to |f_a^{(m)}|^2 in H_0."""
    Z = f0.Z
    if f0.freq is None or not any(f0.freq):
        raise ValueError("cs_step needs f0 with a known nonzero fiber frequency")
    beta = beta or f0.alpha
    nu = convolve_exact(mu, m)
    if t is None:
        # f0 has mean zero, so the deviation is |∫ U*(mu)^m f0 d eta|
        t = abs(integrate_empirical(push_sum(f0, nu), eta)) / f0.norm_bound
    classes = partition_measure(nu, f0.freq, Z)
    best = None
    scores = []
    for a, p, mua in classes:
        fa = push_sum(f0, mua)
        f1 = Product(fa, Conjugate(fa))
        q = integrate_haar(f1, resolution)
        score = (integrate_empirical(f1, eta) - q.value).real
        scores.append((list(a), float(p), score))
        if best is None or score > best[0]:
            best = (score, a, p, f1)
    _, a, p, f1 = best
    Cb = c_beta(mu, beta)
    floor = (2 * Cb) ** (-2 * m) * t * t
    log = [{"step": "cs_step", "m": m, "t": t, "class": list(a), "class_mass": float(p),
            "C_beta": Cb, "floor": floor, "classes": scores}]
    cert = certify(f1, eta, resolution, log)
    cert.log[-1]["deviation"] = cert.deviation
    if cert.deviation < floor - cert.tolerance:
        raise AnalyticFailure("Cauchy-Schwarz floor violated",
                              {"deviation": cert.deviation, "floor": floor, "tolerance": cert.tolerance,
                               "log": cert.log})
    return cert


def pullback_step(f0: TestFunction, mu: FiniteMeasure, m: int, eta: EmpiricalMeasure, t: float | None = None,
                  beta: float | None = None, resolution: int = 16) -> WitnessCertificate:
    """Best U*(g) f0 over g in Supp(mu^{*m}) outside the Lipschitz-excess set."""
    beta = beta or f0.alpha
    if m == 0:
        return certify(f0, eta, resolution, [{"step": "pullback_step", "m": 0}])
    nu = convolve_exact(mu, m)
    h0 = integrate_haar(f0, resolution).value  # Haar is invariant under affine maps
    if t is None:
        t = abs(integrate_empirical(push_sum(f0, nu), eta) - h0) / f0.norm_bound
    Cb = c_beta(mu, beta)
    bound = 4 * Cb ** m / max(t, 1e-300)
    best, excluded = None, 0
    for g, w in nu.atoms:
        if lipschitz_upper(g) ** beta > bound:
            excluded += 1
            continue
        raw = abs(integrate_empirical(Pullback(f0, g), eta) - h0) / f0.norm_bound
        if best is None or raw > best[0]:
            best = (raw, g)
    if best is None or best[0] < t / 2 - 1e-9:
        raise AnalyticFailure("no pullback reaches t/2",
                              {"t": t, "best": None if best is None else best[0], "excluded": excluded})
    f1 = Pullback(f0, best[1])
    log = [{"step": "pullback_step", "m": m, "t": t, "C_beta": Cb, "excluded": excluded,
            "raw_deviation": best[0]}]
    return certify(f1, eta, resolution, log)


# --- functions on Y -------------------------------------------------------------

class SectionFunction(TestFunction):
    """A fiber-constant function on X read as a function on Y through the zero section.

    The Y metric is the quotient of the X metric, so the norm bound carries over.
    """

    def __init__(self, f: TestFunction, Y: NilGroupSchema, rest: Sequence[int]):
        self.f, self.schema, self.rest = f, Y, list(rest)
        self.alpha, self.norm_bound = f.alpha, f.norm_bound
        self.Z, self.freq = None, None

    def eval_np(self, pts):
        full = np.zeros((len(pts), self.f.schema.n))
        full[:, self.rest] = pts
        return self.f.eval_np(full)


def project_measure(nu: EmpiricalMeasure, Z: CentralSubgroupSpec) -> EmpiricalMeasure:
    Y = Z.quotient_schema()
    rest = list(Z.rest)
    if nu.is_exact:
        from .nilgroup import project_to_factor
        acc: dict = {}
        for p, w in zip(nu.exact_points, nu.exact_weights):
            y = project_to_factor(p, Z)
            acc[y] = acc.get(y, Fraction(0)) + w
        return EmpiricalMeasure.from_exact(Y, sorted(acc.items(), key=lambda kv: kv[0].coords))
    return EmpiricalMeasure(Y, np.mod(nu.points[:, rest], 1.0), nu.weights.copy())


@dataclass
class ReductionResult:
    status: str  # "witness-on-Y" or "equidistributed at tested scale"
    certificate: WitnessCertificate | None
    m_prime: int
    log: list

    def to_json(self):
        return {"status": self.status, "m_prime": self.m_prime, "log": self.log,
                "certificate": None if self.certificate is None else self.certificate.to_json()}


def choose_m_prime(t: float, m: int, C_pi: float = 1.0) -> int:
    """Midpoint of the window (C log 1/t, 2C log 1/t), rounded and clipped to [0, m]."""
    return int(min(max(round(1.5 * C_pi * math.log(1 / t)), 0), m))


def reduce_witness(f: TestFunction, x, mu: FiniteMeasure, m: int, t: float | None = None,
                   C_pi: float = 1.0, resolution: int = 16, N_max: int = 8) -> ReductionResult:
    """Chain the fiber-character scan, the CS or pullback step, and the projection to Y."""
    s = mu.schema
    Z = f.Z if f.Z is not None else CentralSubgroupSpec(s, ())
    nu_full = push_measure(convolve_exact(mu, m), x)
    dev, _ = _deviation(f, nu_full, resolution)
    t = dev if t is None else t
    log = [{"step": "input", "m": m, "t": t, "deviation": dev}]
    if dev < t or dev <= 1e-12:
        return ReductionResult("equidistributed at tested scale", None, 0, log)
    mp = choose_m_prime(t, m, C_pi)
    eta = push_measure(convolve_exact(mu, m - mp), x)
    try:
        if Z.dim:
            a0, c0 = find_fiber_character(f, nu_full, t, resolution=resolution, N_max=N_max)
        else:
            a0, c0 = (), certify(f, nu_full, resolution)
    except AnalyticFailure as exc:
        log.append({"step": "find_fiber_character", "failure": str(exc)})
        return ReductionResult("equidistributed at tested scale", None, mp, log)
    log += c0.log
    if a0 and any(a0):
        c1 = cs_step(c0.f, mu, mp, eta, resolution=resolution)
    else:
        c1 = pullback_step(c0.f, mu, mp, eta, resolution=resolution)
    log += c1.log
    if Z.dim:
        Y = Z.quotient_schema()
        phi = SectionFunction(c1.f, Y, Z.rest)
        etaY = project_measure(eta, Z)
    else:
        phi, etaY = c1.f, eta
    cert = certify(phi, etaY, resolution, log + [{"step": "project", "m_prime": mp}])
    return ReductionResult("witness-on-Y", cert, mp, cert.log)


# --- subgroups of the maximal torus factor ------------------------------------

def hnf(rows) -> tuple:
    """Canonical row basis of the lattice spanned by ``rows``."""
    rows = [list(map(int, r)) for r in rows if any(r)]
    if not rows:
        return ()
    H = hermite_normal_form(Matrix(rows).T).T
    return tuple(tuple(int(v) for v in H.row(i)) for i in range(H.rows))


def in_lattice(v, basis) -> bool:
    if not basis:
        return not any(v)
    return hnf(list(basis) + [list(v)]) == tuple(basis)


def lattice_index(basis, n: int) -> int | None:
    if len(basis) < n:
        return None
    return abs(int(Matrix(basis).det()))


@dataclass
class SubgroupDescriptor:
    dual_generators: tuple  # HNF rows of L*
    height: float
    height_witnesses: list
    invariance: list  # (generator index, image, True)
    dim: int

    @property
    def is_trivial(self) -> bool:
        """L = {0}, i.e. L* is the full lattice."""
        return lattice_index(self.dual_generators, self.dim) == 1

    @property
    def index(self):
        return lattice_index(self.dual_generators, self.dim)

    def to_json(self):
        return {"dual_generators": [list(r) for r in self.dual_generators], "height": self.height,
                "height_witnesses": [list(v) for v in self.height_witnesses],
                "index": self.index}


def _dual_maps(gens):
    out = []
    for A in gens:
        A = Matrix([[int(v) for v in r] for r in A])
        if abs(A.det()) != 1:
            raise ValueError("generators must be unimodular")
        out.append(np.array(A.T.inv().tolist(), dtype=object))
    return out


def _short_vectors(n: int, h: float):
    r = int(math.floor(h))
    for v in itertools.product(range(-r, r + 1), repeat=n):
        if any(v) and sum(x * x for x in v) <= h * h + 1e-12:
            yield v


def primitive_vectors(n: int, h: float) -> list:
    """Primitive integer vectors of norm <= h, one per sign pair."""
    out = []
    for v in _short_vectors(n, h):
        if math.gcd(*v) != 1:
            continue
        first = next(x for x in v if x)
        if first > 0:
            out.append(v)
    return sorted(out, key=lambda v: (sum(x * x for x in v), v))


def lattice_height(basis, n: int, h: float):
    """Smallest r <= h with L* generated by its vectors of norm <= r, else None."""
    cands = sorted((v for v in _short_vectors(n, h) if in_lattice(v, basis)),
                   key=lambda v: (sum(x * x for x in v), v))
    used = []
    for v in cands:
        used.append(v)
        if hnf(used) == tuple(basis):
            return math.sqrt(sum(x * x for x in v)), used
    return None


def is_invariant(basis, dual_maps) -> list | None:
    cert = []
    for gi, M in enumerate(dual_maps):
        for b in basis:
            img = tuple(int(v) for v in M.dot(np.array(b, dtype=object)))
            if not in_lattice(img, basis):
                return None
            cert.append((gi, img, True))
    return cert


@dataclass
class OrbitOverflow:
    seed: tuple
    message: str = "no invariant subgroup generated at this height from this seed"


def _orbit(seed, dual_maps, cap: int, norm_cap: int):
    seen = {tuple(seed)}
    q = deque([tuple(seed)])
    while q:
        v = q.popleft()
        for M in dual_maps:
            w = tuple(int(x) for x in M.dot(np.array(v, dtype=object)))
            if w not in seen:
                if len(seen) >= cap or max(abs(x) for x in w) > norm_cap:
                    return None
                seen.add(w)
                q.append(w)
    return sorted(seen)


def detect_low_height_subgroups(gens, h: float, cap: int = 10_000, norm_cap: int = 10 ** 6):
    """Gamma-invariant dual lattices of height <= h, from primitive seeds.

    Returns (descriptors sorted by index then HNF, overflow reports).
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    gens = [tuple(tuple(int(v) for v in r) for r in A) for A in gens]
    n = len(gens[0]) if gens else None
    if n is None:
        raise ValueError("need at least one generator")
    maps = _dual_maps(gens)
    seeds = primitive_vectors(n, h)
    found: dict = {}
    overflow = []
    candidates = []
    for sd in seeds:
        orb = _orbit(sd, maps, cap, norm_cap)
        if orb is None:
            overflow.append(OrbitOverflow(sd))
            continue
        candidates.append(hnf(orb))
    # all seeds at once
    candidates.append(hnf(seeds))
    for basis in candidates:
        if not basis or basis in found:
            continue
        inv = is_invariant(basis, maps)
        if inv is None:
            continue
        ht = lattice_height(basis, n, h)
        if ht is None:
            continue
        found[basis] = SubgroupDescriptor(basis, ht[0], ht[1], inv, n)
    descs = sorted(found.values(), key=lambda d: (d.index or 0, d.dual_generators))
    return descs, overflow


def invariant_lattices_bruteforce(gens, h: float) -> set:
    """Every Gamma-invariant lattice spanned by a set of primitive vectors of norm <= h."""
    n = len(gens[0])
    maps = _dual_maps(gens)
    seeds = primitive_vectors(n, h)
    out = set()
    for r in range(1, len(seeds) + 1):
        for sub in itertools.combinations(seeds, r):
            basis = hnf(sub)
            if basis in out:
                continue
            if is_invariant(basis, maps) is not None and lattice_height(basis, n, h) is not None:
                out.add(basis)
    return out


def preimage_subgroup(P, L: SubgroupDescriptor) -> tuple[SubgroupDescriptor, float]:
    """Pull L in T' back along x -> P x; dual generators map by P^T."""
    Pm = Matrix([[int(v) for v in r] for r in P])
    if Pm.rank() != Pm.rows:
        raise ValueError("projection matrix must have full row rank")
    if Pm.rows != L.dim:
        raise ValueError("dimension mismatch")
    PT = Pm.T
    gens = [tuple(int(v) for v in PT * Matrix(list(b))) for b in L.dual_generators]
    basis = hnf(gens)
    C = float(np.linalg.norm(np.array(PT.tolist(), dtype=float), 2))
    wit = [tuple(int(v) for v in PT * Matrix(list(w))) for w in L.height_witnesses]
    height = max((math.sqrt(sum(x * x for x in w)) for w in wit), default=0.0)
    return SubgroupDescriptor(basis, height, wit, [], Pm.cols), C


# --- rational points and finite orbits --------------------------------------

def _torus_dist(a, b):
    return math.sqrt(sum(float(min((x - y) % 1, (y - x) % 1)) ** 2 for x, y in zip(a, b)))


def nearest_rational_point(x: Sequence, Q: int):
    """Per-denominator coordinatewise rounding; ties go to smaller q then numerators."""
    if Q < 1:
        raise ValueError("Q must be >= 1")
    x = [v if isinstance(v, Fraction) else (Fraction(v) if isinstance(v, int) else v) for v in x]
    best = None
    for q in range(1, Q + 1):
        nums = []
        for v in x:
            p = math.floor(v * q + Fraction(1, 2)) if isinstance(v, Fraction) else math.floor(v * q + 0.5)
            nums.append(p % q if q > 1 else 0)
        cand = [Fraction(p, q) for p in nums]
        dist = _torus_dist(x, cand)
        exact0 = all(isinstance(v, Fraction) for v in x) and all((v - c).denominator == 1 for v, c in zip(x, cand))
        if exact0:
            dist = 0.0
        key = (dist, q, nums)
        if best is None or key < best[0]:
            best = (key, cand, q)
    (dist, _, _), cand, q = best
    den = math.lcm(*[c.denominator for c in cand]) if cand else 1
    return tuple(cand), den, dist


@dataclass
class RationalizationReport:
    q: int
    perturbation: float
    point: tuple
    translations: list
    orbit_size: int | None
    overflow: bool
    restriction: str = "common-denominator rationalization of translations and start point only"

    def to_json(self):
        return {"q": self.q, "perturbation": self.perturbation, "point": [str(v) for v in self.point],
                "translations": [[str(v) for v in t] for t in self.translations],
                "orbit_size": self.orbit_size, "overflow": self.overflow, "restriction": self.restriction}


def _round_to(v, q):
    return Fraction(math.floor(v * q + 0.5), q)


def rationalize_affine_system(gens, x: Sequence, Q: int, index_bound: int = 1) -> RationalizationReport:
    """Round translations and x to a common denominator q <= Q and close the orbit.

    ``gens`` is a list of (integer matrix A, translation t) on the torus factor.
    """
    n = len(x)
    gens = [(tuple(tuple(int(v) for v in r) for r in A), list(t)) for A, t in gens]
    values = [v for _, t in gens for v in t] + list(x)
    best = None
    for q in range(1, Q + 1):
        pert = max((abs(float(v) - float(_round_to(v, q))) for v in values), default=0.0)
        if best is None or pert < best[0] - 1e-15:
            best = (pert, q)
    pert, q = best
    xr = tuple(_round_to(v, q) % 1 for v in x)
    ts = [[_round_to(v, q) % 1 for v in t] for _, t in gens]
    cap = Q ** n * index_bound
    seen = {xr}
    dq = deque([xr])
    overflow = False
    while dq and not overflow:
        y = dq.popleft()
        for (A, _), t in zip(gens, ts):
            z = tuple((sum(A[i][j] * y[j] for j in range(n)) + t[i]) % 1 for i in range(n))
            if z not in seen:
                seen.add(z)
                dq.append(z)
                if len(seen) > cap:
                    overflow = True
                    break
    return RationalizationReport(q, pert, xr, ts, None if overflow else len(seen), overflow)
