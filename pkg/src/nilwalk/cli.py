"""Command-line front end: ``nilwalk <command> --config file.json``.

Every artifact carries the config hash: JSON files in a ``config_hash``
field, CSV files in a leading ``# nilwalk-csv v1`` comment line.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .affine import FiniteMeasure
from .appendix import AlgebraMeasure, Labeling, decay_scan, ld_tail, nc_check, return_time_sim
from .estimators import (PowerIterationError, config_hash, lyapunov_estimate, matrix_measure,
                         sigma_estimate, tau_Z_estimate)
from .nilgroup import CentralSubgroupSpec, NilGroupSchema, center, point
from .observables import QuadratureError, TorusCharacter, wasserstein_lower
from .plot import line_chart
from .reduction import (AnalyticFailure, detect_low_height_subgroups, nearest_rational_point,
                        rationalize_affine_system, reduce_witness)
from .scenarios import ScenarioDescriptor, ScenarioError, list_scenarios, scenario
from .walk import DEFAULT_CAP, WalkCapExceeded, WalkConfig, convolve_exact, push_measure, run_walk

CSV_VERSION = 1

# command -> parameter defaults; keys outside these sets are rejected
COMMANDS: dict[str, dict] = {
    "walk": {"x": None, "m": 10, "trials": 1000, "mode": "monte-carlo", "cap": DEFAULT_CAP},
    "lyapunov": {"n": 200, "trials": 1000, "burn_in": 0, "on": "base"},
    "tau": {"kappas": [0.1], "m_max": 12, "cap": DEFAULT_CAP},
    "sigma": {"R": 3, "m_max": 6},
    "wasserstein": {"x": None, "m": 10, "trials": 10000, "K": 2, "alpha": 1.0},
    "reduce-witness": {"x": None, "m": 6, "a": None, "K": 2, "t": None, "C_pi": 1.0,
                       "resolution": 16, "N_max": 8},
    "detect-subgroups": {"h": 2, "cap": 10000, "gens": None},
    "rationalize": {"x": None, "Q": 10, "index_bound": 1, "gens": None},
    "ld-tail": {"omega": 0.2, "m_max": 60, "m_step": 5, "trials": 100000},
    "return-times": {"labels": None, "m": 100, "trials": 2000, "omega": 0.25},
    "decay-scan": {"labels": None, "n": 6, "xi_max": 4.0, "points": 16, "direction": [[1, 0], [0, 0]]},
    "nc-check": {"eps": 0.1, "kappa": 0.5, "tau": 0.5, "delta": 0.5, "n_random": 16},
    "dichotomy": {"xs": None, "schedule": [2, 4, 8, 12, 16], "trials": 100000, "K": 3,
                  "threshold": 0.05, "Q": 10, "h": 2},
    "scenario": {},
}

# commands that presuppose equidistribution questions make sense
EQUIDISTRIBUTION = {"wasserstein", "reduce-witness", "dichotomy", "sigma"}

# commands that can run on bare torus matrices given as params["gens"]
GENS_ONLY = {"detect-subgroups", "rationalize"}

TOP_KEYS = {"command", "scenario", "scenario_params", "inline", "params", "out", "seed", "threads"}


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str | None = None
    scenario: str | None = None
    scenario_params: dict = field(default_factory=dict)
    inline: dict | None = None  # {"schema": ..., "measure": ..., "Z": [indices]}
    params: dict = field(default_factory=dict)
    out: str = "nilwalk-out"
    seed: int = 0
    threads: int | None = None

    @classmethod
    def from_json(cls, obj) -> "ExperimentConfig":
        if isinstance(obj, str):
            obj = json.loads(obj)
        if not isinstance(obj, dict):
            raise UsageError("config must be a JSON object")
        bad = set(obj) - TOP_KEYS
        if bad:
            raise UsageError(f"unknown config keys: {sorted(bad)}")
        cfg = cls(**obj)
        cfg.check()
        return cfg

    def to_json(self) -> dict:
        return asdict(self)

    def check(self):
        if self.scenario is not None and self.inline is not None:
            raise UsageError("give either 'scenario' or 'inline', not both")
        if self.command is not None:
            if self.command not in COMMANDS:
                raise UsageError(f"unknown command {self.command!r}")
            bad = set(self.params) - set(COMMANDS[self.command])
            if bad:
                raise UsageError(f"unknown parameters for {self.command}: {sorted(bad)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise UsageError("seed must be a non-negative integer")

    def param(self, name):
        return self.params.get(name, COMMANDS[self.command][name])

    def hash(self) -> str:
        d = self.to_json()
        d.pop("threads")
        d.pop("out")
        return config_hash(d)


def resolve_threads(cli_value, cfg: ExperimentConfig) -> int:
    if cli_value is not None:
        return max(1, int(cli_value))
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    env = os.environ.get("NILWALK_THREADS")
    return max(1, int(env)) if env else 1


def parse_scalar(v):
    """JSON number or string such as "1/2" or "sqrt(2)-1"; exact where possible."""
    if isinstance(v, bool):
        raise UsageError("booleans are not coordinates")
    if isinstance(v, int):
        return Fraction(v)
    if isinstance(v, float):
        return v
    if isinstance(v, str):
        try:
            return Fraction(v)
        except ValueError:
            pass
        import sympy
        try:
            expr = sympy.sympify(v, rational=True)
        except (sympy.SympifyError, TypeError, SyntaxError) as exc:
            raise UsageError(f"cannot parse coordinate {v!r}") from exc
        if not expr.is_number:
            raise UsageError(f"coordinate {v!r} is not a number")
        return Fraction(str(expr)) if expr.is_Rational else float(expr)
    raise UsageError(f"cannot parse coordinate {v!r}")


def load_descriptor(cfg: ExperimentConfig) -> ScenarioDescriptor:
    if cfg.inline is not None:
        try:
            schema = NilGroupSchema.from_json(cfg.inline["schema"])
            mu = FiniteMeasure.from_json(schema, cfg.inline["measure"])
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad inline scenario: {exc}") from exc
        zi = cfg.inline.get("Z")
        Z = CentralSubgroupSpec(schema, tuple(zi)) if zi is not None else (center(schema) if schema.c else None)
        return ScenarioDescriptor("inline", schema, mu, Z, "user-supplied")
    if cfg.scenario is None:
        raise UsageError("config needs 'scenario' or 'inline'")
    try:
        return scenario(cfg.scenario, **cfg.scenario_params)
    except TypeError as exc:
        raise UsageError(f"bad scenario parameters: {exc}") from exc


def start_point(desc, raw, seed: int = 0):
    s = desc.schema
    if raw is None:
        raise UsageError("parameter 'x' is required")
    if raw == "haar":
        rng = np.random.default_rng(seed)
        return point(s, [float(rng.random()) * float(p) for p in s.periods])
    if len(raw) != s.n:
        raise UsageError(f"x needs {s.n} coordinates")
    return point(s, [parse_scalar(v) for v in raw])


def base_pairs(mu: FiniteMeasure) -> list:
    """Unmerged (base matrix, weight) list, aligned with the atom order."""
    return [(tuple(tuple(int(v) for v in r) for r in g.aut.A), w) for g, w in mu.atoms]


def labeling_for(mu, labels) -> Labeling:
    labels = labels if labels is not None else [i % 2 for i in range(len(mu.atoms))]
    if len(labels) != len(mu.atoms):
        raise UsageError("one label per generator is required")
    return Labeling(list(labels))


# --- output ---------------------------------------------------------------------

class Writer:
    def __init__(self, outdir, chash: str, command: str, plot: bool):
        self.dir = Path(outdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash, self.command, self.plot = chash, command, plot
        self.files: list[str] = []

    def json(self, stem: str, obj: dict) -> Path:
        p = self.dir / f"{stem}.json"
        body = {"config_hash": self.hash, "command": self.command, "version": __version__}
        body.update(obj)
        p.write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable))
        self.files.append(str(p))
        return p

    def csv(self, stem: str, header, rows) -> Path:
        p = self.dir / f"{stem}.csv"
        with p.open("w", newline="") as fh:
            fh.write(f"# nilwalk-csv v{CSV_VERSION} config_hash={self.hash} command={self.command}\n")
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        self.files.append(str(p))
        return p

    def chart(self, stem: str, series: dict, **kw):
        if self.plot:
            p = line_chart(self.dir / f"{stem}.svg", series, **kw)
            text = p.read_text().replace("<svg ", f"<svg data-config-hash=\"{self.hash}\" ", 1)
            p.write_text(text)
            self.files.append(str(p))


def _jsonable(o):
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


# --- dichotomy ----------------------------------------------------------------------

def frequency_box(k: int, K: int) -> list:
    return [a for a in itertools.product(range(-K, K + 1), repeat=k) if any(a)]


def dichotomy_report(desc: ScenarioDescriptor, xs, schedule=(2, 4, 8, 12, 16), trials: int = 100_000,
                     K: int = 3, threshold: float = 0.05, Q: int = 10, h: float = 2, seed: int = 0,
                     threads: int = 1) -> list[dict]:
    """Per start point: torus-factor Fourier maxima along the m schedule plus detector output.

    A point is tagged "decaying" when the maximum at the last scheduled m is
    below ``threshold`` and "obstructed" otherwise.
    """
    if desc.arithmetic_only:
        raise UsageError(f"{desc.name} is arithmetic-only")
    s, mu = desc.schema, desc.measure
    box = frequency_box(s.k, K)
    gens = [g.aut.A for g in mu.support]
    subgroups, overflow = detect_low_height_subgroups(gens, h)
    nontrivial = [d.to_json() for d in subgroups if not d.is_trivial]
    rows = []
    for i, x in enumerate(xs):
        curve = []
        for m in sorted(schedule):
            nu = run_walk(mu, x, WalkConfig(m, trials, seed=seed + i, threads=threads))
            curve.append((m, max(abs(nu.fourier_torus(a)) for a in box)))
        base = list(x.coords[:s.k])
        pt, den, dist = nearest_rational_point(base, Q)
        rational = dist < 1e-9
        orbit = None
        if rational:
            rep = rationalize_affine_system([(A, [0] * s.k) for A in gens], pt, den)
            orbit = rep.orbit_size
        rows.append({
            "x": [str(v) if isinstance(v, Fraction) else float(v) for v in x.coords],
            "curve": curve, "final": curve[-1][1],
            "tag": "decaying" if curve[-1][1] < threshold else "obstructed",
            "rational_projection": [str(v) for v in pt] if rational else None,
            "denominator": den if rational else None,
            "rational_distance": dist, "orbit_size": orbit,
            "invariant_subgroups": nontrivial, "subgroup_overflows": len(overflow),
        })
    return rows


# --- commands -------------------------------------------------------------------------

def cmd_walk(cfg, desc, w, threads):
    x = start_point(desc, cfg.param("x"), cfg.seed)
    nu = run_walk(desc.measure, x, WalkConfig(int(cfg.param("m")), int(cfg.param("trials")), cfg.seed,
                                             cfg.param("mode"), int(cfg.param("cap")), threads))
    n = desc.schema.n
    if nu.is_exact:
        rows = [[i] + [str(v) for v in p.coords] + [str(wt)]
                for i, (p, wt) in enumerate(zip(nu.exact_points, nu.exact_weights))]
    else:
        rows = [[i] + [repr(float(v)) for v in p] + [repr(float(wt))]
                for i, (p, wt) in enumerate(zip(nu.points, nu.weights))]
    w.csv("walk", ["id"] + [f"x{i}" for i in range(n)] + ["weight"], rows)
    w.json("walk", {"schema": desc.schema.to_json(), "atoms": len(nu), "provenance": nu.provenance})
    return 0


def _report(w, stem, rep, chart=None):
    w.json(stem, rep.to_json())
    for name, pts in rep.curves.items():
        w.csv(f"{stem}_{name}", ["x", "y"], pts)
    if chart:
        w.chart(stem, {k: rep.curves[k] for k in chart if k in rep.curves}, title=stem, xlabel="m")


def cmd_lyapunov(cfg, desc, w, threads):
    Z = desc.Z if cfg.param("on") == "Z" else None
    if cfg.param("on") not in ("base", "Z"):
        raise UsageError("'on' must be 'base' or 'Z'")
    rep = lyapunov_estimate(matrix_measure(desc.measure, Z), int(cfg.param("n")), int(cfg.param("trials")),
                            cfg.seed, int(cfg.param("burn_in")))
    _report(w, "lyapunov", rep)
    return 0


def cmd_tau(cfg, desc, w, threads):
    kappas = tuple(float(k) for k in cfg.param("kappas"))
    rep = tau_Z_estimate(desc.measure, desc.Z, kappas, range(1, int(cfg.param("m_max")) + 1),
                         int(cfg.param("cap")))
    _report(w, "tau", rep, chart=list(rep.curves))
    return 0


def cmd_sigma(cfg, desc, w, threads):
    rep = sigma_estimate(desc.measure, desc.Z, R=int(cfg.param("R")), ms=range(1, int(cfg.param("m_max")) + 1))
    _report(w, "sigma", rep, chart=list(rep.curves))
    return 0


def cmd_wasserstein(cfg, desc, w, threads):
    s = desc.schema
    x = start_point(desc, cfg.param("x"), cfg.seed)
    nu = run_walk(desc.measure, x, WalkConfig(int(cfg.param("m")), int(cfg.param("trials")), cfg.seed,
                                             threads=threads))
    box = frequency_box(s.k, int(cfg.param("K")))
    dic = [TorusCharacter(s, a, float(cfg.param("alpha"))) for a in box]
    # nonzero characters integrate to 0 against Haar
    res = wasserstein_lower(nu, dic, haar_targets=[0.0] * len(dic))
    rows = [[list(a), d] for a, d in zip(box, res.deviations)]
    w.csv("wasserstein", ["frequency", "deviation"], rows)
    w.json("wasserstein", {"lower_bound": res.value, "witness_frequency": list(res.witness.a),
                           "alpha": float(cfg.param("alpha"))})
    return 0


def cmd_reduce_witness(cfg, desc, w, threads):
    s, mu = desc.schema, desc.measure
    x = start_point(desc, cfg.param("x"), cfg.seed)
    m = int(cfg.param("m"))
    a = cfg.param("a")
    if a is None:
        nu = push_measure(convolve_exact(mu, m), x)
        a = max(frequency_box(s.k, int(cfg.param("K"))), key=lambda b: abs(nu.fourier_torus(b)))
    f = TorusCharacter(s, a, 1.0, desc.Z)
    res = reduce_witness(f, x, mu, m, cfg.param("t"), float(cfg.param("C_pi")),
                         int(cfg.param("resolution")), int(cfg.param("N_max")))
    body = res.to_json()
    body["frequency"] = list(f.a)
    if res.certificate is not None:
        ok, d = res.certificate.verify()
        body["verified"], body["verify_deviation"] = ok, d
    w.json("reduce_witness", body)
    if res.certificate is None:
        raise AnalyticFailure("no witness found: " + res.status, body)
    return 0


def _torus_gens(cfg, desc):
    gens = cfg.param("gens")
    if gens is not None:
        return gens
    if desc is None:
        raise UsageError("need 'gens' or a scenario")
    return [g.aut.A for g in desc.measure.support]


def cmd_detect_subgroups(cfg, desc, w, threads):
    gens = _torus_gens(cfg, desc)
    descs, over = detect_low_height_subgroups(gens, float(cfg.param("h")), int(cfg.param("cap")))
    w.json("subgroups", {"subgroups": [d.to_json() for d in descs],
                         "overflow": [list(o.seed) for o in over]})
    return 0


def cmd_rationalize(cfg, desc, w, threads):
    gens = _torus_gens(cfg, desc)
    raw = cfg.param("x")
    if raw is None:
        raise UsageError("parameter 'x' is required")
    x = [parse_scalar(v) for v in raw]
    Q = int(cfg.param("Q"))
    pt, den, dist = nearest_rational_point(x, Q)
    rep = rationalize_affine_system([(A, [0] * len(x)) for A in gens], x, Q, int(cfg.param("index_bound")))
    w.json("rationalize", {"nearest": {"point": [str(v) for v in pt], "denominator": den, "distance": dist},
                           "system": rep.to_json()})
    return 0


def cmd_ld_tail(cfg, desc, w, threads):
    ms = list(range(int(cfg.param("m_step")), int(cfg.param("m_max")) + 1, int(cfg.param("m_step"))))
    tab = ld_tail(matrix_measure(desc.measure), float(cfg.param("omega")), ms, int(cfg.param("trials")),
                  cfg.seed)
    w.csv("ld_tail", ["m", "probability"], tab.rows)
    w.json("ld_tail", tab.to_json())
    w.chart("ld_tail", {"log P": [(m, math.log(p)) for m, p in tab.rows if p > 0]}, xlabel="m",
            ylabel="log probability")
    return 0


def cmd_return_times(cfg, desc, w, threads):
    mu = desc.measure
    lab = labeling_for(mu, cfg.param("labels"))
    rs = return_time_sim(base_pairs(mu), lab, int(cfg.param("m")), int(cfg.param("trials")), cfg.seed,
                         float(cfg.param("omega")))
    w.csv("return_times_tail", ["j", "probability"], rs.tail)
    body = rs.to_json()
    body["mu_circ"] = [[[list(r) for r in M], str(p)] for M, p, _ in rs.mu_circ]
    w.json("return_times", body)
    return 0


def cmd_decay_scan(cfg, desc, w, threads):
    mu = desc.measure
    lab = labeling_for(mu, cfg.param("labels"))
    D = np.asarray(cfg.param("direction"), dtype=float)
    npts = int(cfg.param("points"))
    scales = np.geomspace(0.1, float(cfg.param("xi_max")), npts)
    scan = decay_scan(base_pairs(mu), lab, int(cfg.param("n")), [s * D for s in scales])
    w.csv("decay_scan", ["xi_norm", "coset", "modulus"], scan.rows)
    w.json("decay_scan", {"coset_mass": scan.coset_mass, "n": scan.n})
    series: dict = {}
    for r, c, v in scan.rows:
        series.setdefault(f"coset {c}", []).append((r, v))
    w.chart("decay_scan", series, xlabel="|xi|", ylabel="modulus")
    return 0


def cmd_nc_check(cfg, desc, w, threads):
    eta = AlgebraMeasure.from_pairs([(M, p) for M, p in matrix_measure(desc.measure)])
    rep = nc_check(eta, float(cfg.param("eps")), float(cfg.param("kappa")), float(cfg.param("tau")),
                   float(cfg.param("delta")), int(cfg.param("n_random")), seed=cfg.seed)
    w.json("nc_check", {"ok": rep.ok, **rep.to_json()})
    return 0


def cmd_dichotomy(cfg, desc, w, threads):
    raw = cfg.param("xs")
    if not raw:
        raise UsageError("parameter 'xs' is required")
    xs = [start_point(desc, r, cfg.seed + i) for i, r in enumerate(raw)]
    rows = dichotomy_report(desc, xs, cfg.param("schedule"), int(cfg.param("trials")), int(cfg.param("K")),
                            float(cfg.param("threshold")), int(cfg.param("Q")), float(cfg.param("h")),
                            cfg.seed, threads)
    w.csv("dichotomy", ["point", "m", "max_modulus"],
          [[i, m, v] for i, r in enumerate(rows) for m, v in r["curve"]])
    w.json("dichotomy", {"rows": rows})
    w.chart("dichotomy", {f"x{i} ({r['tag']})": r["curve"] for i, r in enumerate(rows)}, xlabel="m",
            ylabel="max Fourier modulus")
    return 0


HANDLERS = {
    "walk": cmd_walk, "lyapunov": cmd_lyapunov, "tau": cmd_tau, "sigma": cmd_sigma,
    "wasserstein": cmd_wasserstein, "reduce-witness": cmd_reduce_witness,
    "detect-subgroups": cmd_detect_subgroups, "rationalize": cmd_rationalize, "ld-tail": cmd_ld_tail,
    "return-times": cmd_return_times, "decay-scan": cmd_decay_scan, "nc-check": cmd_nc_check,
    "dichotomy": cmd_dichotomy,
}

ANALYTIC = (AnalyticFailure, WalkCapExceeded, PowerIterationError, QuadratureError)


def run(command: str, cfg: ExperimentConfig, plot: bool = False, threads: int = 1) -> dict:
    """Execute one command; returns {"files": [...], "config_hash": ...}. Raises on failure."""
    cfg.command = command
    cfg.check()
    w = Writer(cfg.out, cfg.hash(), command, plot)
    if command == "scenario":
        w.json("scenarios", {"scenarios": list_scenarios()})
        return {"files": w.files, "config_hash": w.hash}
    if command in GENS_ONLY and cfg.scenario is None and cfg.inline is None and cfg.param("gens") is not None:
        desc = None
    else:
        desc = load_descriptor(cfg)
    if desc is not None and desc.arithmetic_only and command in EQUIDISTRIBUTION:
        raise UsageError(f"scenario {desc.name} is arithmetic-only; {command} is not permitted")
    HANDLERS[command](cfg, desc, w, threads)
    return {"files": w.files, "config_hash": w.hash}


def _fail(code: int, kind: str, message: str, details=None, out=None) -> int:
    body = {"error": kind, "message": message, "details": details or {}, "exit_code": code}
    text = json.dumps(body, sort_keys=True, default=_jsonable)
    print(text, file=sys.stderr)
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(text)
        except OSError:
            pass
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nilwalk", description="Random walks on compact nilmanifolds.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("action", nargs="?", help="for 'scenario': list")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--plot", action="store_true", help="also write SVG line charts")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (else config, else NILWALK_THREADS)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail(1, "usage", "invalid command line")
    out = args.out
    try:
        if args.command == "scenario":
            if args.action != "list":
                raise UsageError("usage: nilwalk scenario list")
            cfg = ExperimentConfig.from_json(Path(args.config).read_text()) if args.config else ExperimentConfig()
        else:
            if args.action is not None:
                raise UsageError(f"unexpected argument {args.action!r}")
            if not args.config:
                raise UsageError("--config is required")
            cfg = ExperimentConfig.from_json(Path(args.config).read_text())
        if args.out:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        out = cfg.out
        threads = resolve_threads(args.threads, cfg)
        res = run(args.command, cfg, args.plot, threads)
    except (ValueError, OSError) as exc:  # UsageError, ScenarioError and JSON errors included
        return _fail(1, "usage", str(exc), out=out)
    except ANALYTIC as exc:
        return _fail(2, "analytic-failure", str(exc), getattr(exc, "details", None), out=out)
    print(json.dumps(res))
    return 0


if __name__ == "__main__":
    sys.exit(main())
