"""Monte Carlo and exact generation of mu^{*m} * delta_x."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .affine import AffineMap, FiniteMeasure, affine_inverse, apply, apply_np, compose
from .nilgroup import GroupElement, NilGroupSchema, NilmanifoldPoint, identity

DEFAULT_CAP = 2_000_000
CHUNK = 1024  # trials per PRNG block; part of the reproducibility contract


class WalkCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    steps: int
    trials: int = 1
    seed: int = 0
    mode: str = "monte-carlo"
    cap: int = DEFAULT_CAP
    threads: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("monte-carlo", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def hash(self) -> str:
        d = asdict(self)
        d.pop("threads")  # scheduling does not change results
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EmpiricalMeasure:
    schema: NilGroupSchema
    points: np.ndarray  # (P, n) float coordinates in the fundamental box
    weights: np.ndarray
    exact_points: list | None = None
    exact_weights: list | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.weights)

    @property
    def is_exact(self) -> bool:
        return self.exact_points is not None

    @classmethod
    def from_exact(cls, schema, atoms, provenance=None) -> "EmpiricalMeasure":
        pts = [p for p, _ in atoms]
        ws = [Fraction(w) for _, w in atoms]
        arr = np.array([p.as_array() for p in pts]).reshape(len(pts), schema.n)
        return cls(schema, arr, np.array([float(w) for w in ws]), pts, ws, provenance or {})

    @classmethod
    def dirac(cls, x: NilmanifoldPoint) -> "EmpiricalMeasure":
        if x.exact:
            return cls.from_exact(x.schema, [(x, Fraction(1))])
        return cls(x.schema, x.as_array()[None], np.ones(1))

    @classmethod
    def haar_grid(cls, schema: NilGroupSchema, res: int) -> "EmpiricalMeasure":
        """Midpoint grid on the fundamental box (a discrete stand-in for Haar)."""
        axes = [(np.arange(res) + 0.5) / res * float(p) for p in schema.periods]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, schema.n)
        return cls(schema, mesh, np.full(len(mesh), 1.0 / len(mesh)))

    def pushforward(self, g: AffineMap) -> "EmpiricalMeasure":
        if self.is_exact:
            return EmpiricalMeasure.from_exact(
                self.schema, [(apply(g, p), w) for p, w in zip(self.exact_points, self.exact_weights)])
        return EmpiricalMeasure(self.schema, apply_np(g, self.points), self.weights.copy())

    def fourier_torus(self, a) -> complex:
        """Fourier coefficient of the torus-factor projection at frequency a."""
        k = self.schema.k
        a = np.asarray(a, dtype=float)
        ph = np.exp(2j * np.pi * (self.points[:, :k] @ a))
        return complex(np.sum(self.weights * ph))

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"x{i}" for i in range(self.schema.n)] + ["weight"])
            if self.is_exact:
                for i, (p, wt) in enumerate(zip(self.exact_points, self.exact_weights)):
                    w.writerow([i] + [str(v) for v in p.coords] + [str(wt)])
            else:
                for i, (p, wt) in enumerate(zip(self.points, self.weights)):
                    w.writerow([i] + [repr(float(v)) for v in p] + [repr(float(wt))])
        meta = dict(self.provenance)
        meta["schema"] = self.schema.to_json()
        meta["build"] = _git_describe()
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=os.path.dirname(__file__), timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def step_uniforms(seed: int, chunk: int, steps: int) -> np.ndarray:
    """Uniforms for one block of CHUNK trials, keyed by (seed, chunk index).

    Philox is counter-based, so the value used by (trial, step) depends only
    on the master seed and the trial's block, never on execution order.
    """
    bitgen = np.random.Philox(key=seed & (2**64 - 1), counter=[0, 0, chunk, 0])
    return np.random.Generator(bitgen).random((CHUNK, max(steps, 1)))


def _choices(mu: FiniteMeasure, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum([float(w) for w in mu.weights])
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right")


def _run_chunk(mu, x0, cfg, chunk):
    lo = chunk * CHUNK
    n = min(CHUNK, cfg.trials - lo)
    pts = np.repeat(x0[None], n, axis=0)
    if cfg.steps == 0:
        return pts
    idx = _choices(mu, step_uniforms(cfg.seed, chunk, cfg.steps)[:n])
    support = mu.support
    for j in range(cfg.steps):
        col = idx[:, j]
        for gi in np.unique(col):
            sel = col == gi
            pts[sel] = apply_np(support[gi], pts[sel])
    return pts


def run_walk(mu: FiniteMeasure, x: NilmanifoldPoint, config: WalkConfig) -> EmpiricalMeasure:
    prov = {"config": asdict(config), "config_hash": config.hash()}
    if config.mode == "exact":
        nu = convolve_exact(mu, config.steps, config.cap)
        out = push_measure(nu, x)
        out.provenance = prov
        return out
    x0 = x.as_array()
    nchunks = (config.trials + CHUNK - 1) // CHUNK
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            parts = list(ex.map(lambda c: _run_chunk(mu, x0, config, c), range(nchunks)))
    else:
        parts = [_run_chunk(mu, x0, config, c) for c in range(nchunks)]
    pts = np.concatenate(parts, axis=0)
    return EmpiricalMeasure(mu.schema, pts, np.full(len(pts), 1.0 / len(pts)), provenance=prov)


def delta_identity(schema: NilGroupSchema) -> FiniteMeasure:
    return FiniteMeasure(((AffineMap.translation_by(identity(schema)), Fraction(1)),))


def convolve(nu: FiniteMeasure, eta: FiniteMeasure, cap: int = DEFAULT_CAP) -> FiniteMeasure:
    """Law of g h with g ~ nu, h ~ eta independent (nu acts last)."""
    acc: dict = {}
    rep: dict = {}
    for g, wg in nu.atoms:
        for h, wh in eta.atoms:
            gh = compose(g, h)
            k = gh.key
            if k in acc:
                acc[k] += wg * wh
            else:
                acc[k] = wg * wh
                rep[k] = gh
                if len(acc) > cap:
                    raise WalkCapExceeded(f"more than {cap} atoms")
    return FiniteMeasure(tuple((rep[k], acc[k]) for k in sorted(acc, key=repr)))


def convolve_exact(mu: FiniteMeasure, m: int, cap: int = DEFAULT_CAP) -> FiniteMeasure:
    out = delta_identity(mu.schema)
    for _ in range(m):
        out = convolve(mu, out, cap)
    return out


def push_measure(nu: FiniteMeasure, x: NilmanifoldPoint) -> EmpiricalMeasure:
    acc: dict = {}
    for g, w in nu.atoms:
        y = apply(g, x)
        acc[y] = acc.get(y, Fraction(0)) + w
    atoms = sorted(acc.items(), key=lambda kv: tuple(float(v) for v in kv[0].coords))
    return EmpiricalMeasure.from_exact(x.schema, atoms)


def inverse_measure(mu: FiniteMeasure) -> FiniteMeasure:
    return FiniteMeasure(tuple((affine_inverse(g), w) for g, w in mu.atoms))
