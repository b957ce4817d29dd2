"""Experiment driver: configuration files, solves, sweeps, level sets, bounds.

An experiment is described by an INI file::

    [problem]
    dim = 2
    coarsest_cells = 2

    [cycle]
    nu1 = 1
    nu2 = 1
    gamma = 2

    [faults]
    kind = componentwise
    rate = 0.01
    sites = S_pre, S_post, rho, R, P

    [sweep]
    levels = 5, 6, 7
    eps = 0.001, 0.01
    configs = unprotected, protected

    [config.protected]
    protect_prolongation = yes

Each ``config.<label>`` section overrides fault and voting keys for one
labelled variant; ``faults.<site>`` sections override one site.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .analysis import (HypothesisError, assemble_iteration_matrix, energy_norms,
                       estimate_lyapunov, replica_bound_two_grid, two_grid_constant,
                       two_grid_matrix, wcycle_bound)
from .cycle import SITES, CycleConfig, OutcomeCounters, mg_cycle
from .faults import FaultModel, FaultStreams, rng_stream
from .grid import ProblemSpec, build_hierarchy, hierarchy_summary

log = logging.getLogger(__name__)

FAULT_KEYS = ("kind", "rate", "block_size", "silent_dist", "silent_scale")
VARIANT_KEYS = FAULT_KEYS + ("sites", "replicas", "protection", "protect_prolongation")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    out = []
    for t in text.replace(";", ",").split(","):
        t = t.strip()
        if not t:
            continue
        if ".." in t:
            lo, hi = t.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(t))
    return out


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]


@dataclass
class ExperimentConfig:
    """Everything needed to rerun one experiment.

    ``faults`` holds the base fault keys; ``site_faults`` per-site overrides;
    ``variants`` maps a configuration label to its overrides.
    """

    dim: int = 2
    coarsest_cells: int = 2
    theta: float | None = None
    nu1: int = 1
    nu2: int = 1
    gamma: int = 2
    threshold: float = 1e16
    faults: dict = field(default_factory=lambda: {"kind": "componentwise", "rate": 0.0})
    sites: tuple = SITES
    replicas: int = 1
    protection: tuple | None = None
    protect_prolongation: bool = False
    site_faults: dict = field(default_factory=dict)
    variants: dict = field(default_factory=lambda: {"default": {}})
    levels: list = field(default_factory=lambda: [3])
    eps: list | None = None
    iterations: int = 1000
    burn_in: int = 50
    replications: int = 1
    seed: int = 0
    target: float = 0.57
    target_tol: float = 0.005
    eps_range: tuple = (1e-4, 0.6)
    max_bisections: int = 12
    max_solve_iterations: int = 100
    solve_tol: float = 1e-10
    c_star: float = 1.0
    xi: float | None = None
    workers: int = 1
    output: str | None = None

    def __post_init__(self):
        if any(not 0.0 <= e <= 1.0 for e in self.eps_axis):
            raise ValueError(f"eps values must lie in [0, 1], got {self.eps_axis}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    @property
    def eps_axis(self) -> list:
        """Sweep fault rates; the base ``[faults] rate`` when none are given."""
        if self.eps is not None:
            return list(self.eps)
        return [float(self.faults.get("rate", 0.0))]

    def problem(self, levels: int) -> ProblemSpec:
        return ProblemSpec(self.dim, levels, self.coarsest_cells)

    def cycle_config(self, eps: float | None = None, label: str = "default") -> CycleConfig:
        """Cycle configuration of variant ``label`` with base fault rate ``eps``."""
        over = dict(self.variants.get(label, {}))
        fault_keys = dict(self.faults)
        fault_keys.update({k: over[k] for k in FAULT_KEYS if k in over})
        if eps is not None:
            fault_keys["rate"] = eps
        base = _fault_model(fault_keys)
        sites = over.get("sites", self.sites)
        faults = {s: base for s in sites}
        for site, keys in self.site_faults.items():
            merged = dict(fault_keys)
            merged.update(keys)
            faults[site] = _fault_model(merged)
        if over.get("protect_prolongation", self.protect_prolongation):
            faults.pop("P", None)
        replicas = over.get("replicas", self.replicas)
        return CycleConfig(self.nu1, self.nu2, self.gamma, faults,
                           {s: replicas for s in SITES},
                           over.get("protection", self.protection), self.threshold)


def _fault_model(keys: dict) -> FaultModel:
    return FaultModel(str(keys.get("kind", "none")), float(keys.get("rate", 0.0)),
                      int(keys.get("block_size", 2**14)), str(keys.get("silent_dist", "uniform")),
                      float(keys.get("silent_scale", 1.0)))


def _parse_variant(section) -> dict:
    out = {}
    for key, value in section.items():
        if key not in VARIANT_KEYS:
            raise ValueError(f"unknown key {key!r} in [{section.name}]")
        if key == "sites":
            out[key] = tuple(_names(value))
        elif key == "replicas":
            out[key] = int(value)
        elif key == "protection":
            v = _ints(value)
            out[key] = tuple(v) if v else None
        elif key == "protect_prolongation":
            out[key] = section.getboolean(key)
        elif key in ("rate", "silent_scale"):
            out[key] = float(value)
        elif key == "block_size":
            out[key] = int(value)
        else:
            out[key] = value.strip()
    return out


def load_config(text: str) -> ExperimentConfig:
    """Parse an experiment description in INI syntax."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    kw: dict = {}
    if cp.has_section("problem"):
        p = cp["problem"]
        kw["dim"] = p.getint("dim", 2)
        kw["coarsest_cells"] = p.getint("coarsest_cells", 2)
        if "theta" in p:
            kw["theta"] = p.getfloat("theta")
    if cp.has_section("cycle"):
        c = cp["cycle"]
        kw.update(nu1=c.getint("nu1", 1), nu2=c.getint("nu2", 1), gamma=c.getint("gamma", 2),
                  threshold=c.getfloat("threshold", 1e16))
    if cp.has_section("faults"):
        base = _parse_variant(cp["faults"])
        kw["faults"] = {k: base[k] for k in FAULT_KEYS if k in base}
        for key in ("sites", "replicas", "protection", "protect_prolongation"):
            if key in base:
                kw[key] = base[key]
    site_faults = {}
    variants = {}
    for name in cp.sections():
        if name.startswith("faults."):
            site = name.split(".", 1)[1]
            if site not in SITES:
                raise ValueError(f"unknown fault site {site!r} in [{name}]")
            site_faults[site] = _parse_variant(cp[name])
        elif name.startswith("config."):
            variants[name.split(".", 1)[1]] = _parse_variant(cp[name])
    kw["site_faults"] = site_faults
    if cp.has_section("sweep"):
        s = cp["sweep"]
        if "levels" in s:
            kw["levels"] = _ints(s["levels"])
        if "eps" in s:
            kw["eps"] = _floats(s["eps"])
        for key in ("iterations", "burn_in", "replications", "seed", "max_bisections", "workers"):
            if key in s:
                kw[key] = s.getint(key)
        for key in ("target", "target_tol"):
            if key in s:
                kw[key] = s.getfloat(key)
        if "output" in s:
            kw["output"] = s["output"].strip() or None
        if "eps_range" in s:
            kw["eps_range"] = tuple(_floats(s["eps_range"]))
        labels = _names(s.get("configs", ""))
        if labels:
            variants = {label: variants.get(label, {}) for label in labels}
    if not variants:
        variants = {"default": {}}
    kw["variants"] = variants
    if cp.has_section("solve"):
        s = cp["solve"]
        kw["max_solve_iterations"] = s.getint("max_iterations", 100)
        kw["solve_tol"] = s.getfloat("tol", 1e-10)
    if cp.has_section("bound"):
        b = cp["bound"]
        kw["c_star"] = b.getfloat("c_star", 1.0)
        if "xi" in b:
            kw["xi"] = b.getfloat("xi")
    return ExperimentConfig(**kw)


def read_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read())


@lru_cache(maxsize=8)
def _hierarchy(dim: int, levels: int, coarsest: int, theta):
    return build_hierarchy(ProblemSpec(dim, levels, coarsest), theta)


def hierarchy_for(exp: ExperimentConfig, levels: int):
    return _hierarchy(exp.dim, levels, exp.coarsest_cells, exp.theta)


def point_seed(base: int, levels: int, eps: float, label: str) -> int:
    """Stable per-point seed; independent of the order of the sweep axes."""
    key = zlib.crc32(f"{levels}|{eps!r}|{label}".encode())
    return int(np.random.SeedSequence(entropy=int(base), spawn_key=(key,)).generate_state(1)[0])


# -- hierarchy / solve -----------------------------------------------------------

def cmd_hierarchy(exp: ExperimentConfig) -> dict:
    return hierarchy_summary(hierarchy_for(exp, max(exp.levels)))


@dataclass
class SolveResult:
    residuals: list
    status: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "residual"])
        for i, r in enumerate(self.residuals):
            w.writerow([i, repr(float(r))])
        return buf.getvalue()


def cmd_solve(exp: ExperimentConfig, levels: int | None = None, eps: float | None = None,
              label: str | None = None, rhs=None) -> SolveResult:
    """Residual history of repeated cycles from ``x = 0``.

    The right-hand side defaults to ``A x*`` for a seeded random ``x*``.
    Stops at relative residual ``solve_tol``, flags divergence once the
    residual exceeds ``1e12`` times its initial value.
    """
    levels = levels if levels is not None else exp.levels[0]
    eps = eps if eps is not None else exp.eps_axis[0]
    label = label if label is not None else next(iter(exp.variants))
    h = hierarchy_for(exp, levels)
    cfg = exp.cycle_config(eps, label)
    A = h.A[levels]
    if rhs is None:
        rhs = A @ rng_stream(exp.seed, "rhs", levels).standard_normal(h.size(levels))
    b = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(b)
    r0 = float(np.linalg.norm(b))
    residuals = [r0]
    if r0 == 0.0:
        return SolveResult(residuals, "converged")
    status = "max_iterations"
    for it in range(1, exp.max_solve_iterations + 1):
        x = mg_cycle(levels, b, x, h, cfg, FaultStreams(exp.seed, it))
        r = float(np.linalg.norm(b - A @ x))
        residuals.append(r)
        if r <= exp.solve_tol * r0:
            status = "converged"
            break
        if not r <= 1e12 * r0:
            status = "diverged"
            break
    return SolveResult(residuals, status)


# -- Lyapunov sweeps -------------------------------------------------------------

@dataclass
class SweepRow:
    levels: int
    n: int
    eps: float
    config: str
    kind: str
    block_size: int | None
    rho: float
    stderr: float | None
    replications: int
    seed: int
    correct: int = 0
    mitigated: int = 0
    undetected: int = 0
    collapsed: int = 0
    error: str = ""


CSV_FIELDS = ("levels", "n", "eps", "config", "kind", "block_size", "rho", "stderr", "replications", "seed",
              "correct", "mitigated", "undetected", "collapsed", "error")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in rows:
        w.writerow([_cell(getattr(row, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[SweepRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(SweepRow(int(rec["levels"]), int(rec["n"]), float(rec["eps"]), rec["config"],
                             rec["kind"], int(rec["block_size"]) if rec["block_size"] else None,
                             float(rec["rho"]) if rec["rho"] else math.nan,
                             float(rec["stderr"]) if rec["stderr"] else None,
                             int(rec["replications"]), int(rec["seed"]), int(rec["correct"]),
                             int(rec["mitigated"]), int(rec["undetected"]),
                             int(rec["collapsed"]), rec["error"]))
    return rows


def run_point(exp: ExperimentConfig, levels: int, eps: float, label: str) -> SweepRow:
    """Lyapunov estimate at one sweep point, aggregated over replications."""
    seed = point_seed(exp.seed, levels, eps, label)
    h = hierarchy_for(exp, levels)
    n = h.size(levels)
    kind, block = exp.faults.get("kind", "none"), None
    try:
        cfg = exp.cycle_config(eps, label)
        models = [m for m in cfg.faults.values() if m.kind != "none"]
        if models:
            kind = models[0].kind
            block = models[0].block_size if kind == "blockwise" else None
        counters = OutcomeCounters()
        values, collapsed = [], 0
        for rep in range(exp.replications):
            est = estimate_lyapunov(h, cfg, exp.iterations, seed + rep, exp.burn_in,
                                    counters=counters)
            values.append(est.value)
            collapsed += est.collapsed
    except Exception as exc:  # recorded in-row; the sweep goes on
        log.exception("sweep point L=%d eps=%g %s failed", levels, eps, label)
        return SweepRow(levels, n, eps, label, kind, block, math.nan, None, exp.replications, seed,
                        error=f"{type(exc).__name__}: {exc}")
    totals = sum(counters.counts.values())
    stderr = (float(np.std(values, ddof=1) / math.sqrt(len(values)))
              if len(values) >= 2 else None)
    return SweepRow(levels, n, eps, label, kind, block, float(np.mean(values)), stderr, len(values),
                    seed,
                    int(totals[0]), int(totals[1]), int(totals[2]), collapsed)


def _run_point_args(args):
    return run_point(*args)


def cmd_lyapunov_sweep(exp: ExperimentConfig, workers: int | None = None) -> list[SweepRow]:
    """Estimate the rate for every (levels, eps, config) point of the sweep."""
    points = [(exp, L, e, label) for L in exp.levels for e in exp.eps_axis for label in exp.variants]
    workers = workers or exp.workers
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point_args, points))
    else:
        rows = [run_point(*p) for p in points]
    order = {label: i for i, label in enumerate(exp.variants)}
    return sorted(rows, key=lambda r: (r.levels, r.eps, order[r.config]))


# -- level sets -------------------------------------------------------------------

@dataclass
class LevelSetRow:
    levels: int
    n: int
    config: str
    eps_star: float | None
    eps_lo: float | None
    eps_hi: float | None
    rho_lo: float | None
    rho_hi: float | None
    status: str
    evaluations: int


LEVELSET_FIELDS = ("levels", "n", "config", "eps_star", "eps_lo", "eps_hi", "rho_lo", "rho_hi",
                   "status", "evaluations")


def levelset_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEVELSET_FIELDS)
    for row in rows:
        w.writerow([_cell(getattr(row, f)) for f in LEVELSET_FIELDS])
    return buf.getvalue()


def find_level(rate, target: float, eps_range=(1e-4, 0.6), tol: float = 0.005,
               max_bisections: int = 12):
    """Bisect (in ``log eps``) for ``rate(eps) = target``, assuming ``rate`` grows with eps.

    Returns ``(eps_star, eps_lo, eps_hi, rho_lo, rho_hi, status, evaluations)``.
    Status is ``ok``, ``unbounded`` (target not reached at the top of the
    range) or ``fault_free_above_target``.
    """
    lo, hi = eps_range
    evals = 0

    def f(e):
        nonlocal evals
        evals += 1
        return rate(e)

    r0 = f(0.0)
    if r0 >= target:
        return 0.0, 0.0, 0.0, r0, r0, "fault_free_above_target", evals
    r_hi = f(hi)
    if r_hi < target:
        return None, hi, None, r_hi, None, "unbounded", evals
    r_lo = f(lo)
    if r_lo > target:
        lo, r_lo = 0.0, r0
    if abs(r_hi - target) <= tol:
        return hi, lo, hi, r_lo, r_hi, "ok", evals
    for _ in range(max_bisections):
        mid = math.sqrt(lo * hi) if lo > 0 else hi / 10.0
        r_mid = f(mid)
        log.info("bracket [%g, %g] -> eps=%g rho=%g", lo, hi, mid, r_mid)
        if abs(r_mid - target) <= tol:
            return mid, lo, hi, r_lo, r_hi, "ok", evals
        if r_mid < target:
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
    return math.sqrt(lo * hi) if lo > 0 else hi, lo, hi, r_lo, r_hi, "ok", evals


def cmd_levelset(exp: ExperimentConfig) -> list[LevelSetRow]:
    """Fault rate at which the estimated rate reaches ``exp.target``, per size and config."""
    rows = []
    for label in exp.variants:
        for L in exp.levels:
            n = hierarchy_for(exp, L).size(L)

            def rate(eps, L=L, label=label):
                return run_point(exp, L, eps, label).rho

            res = find_level(rate, exp.target, exp.eps_range, exp.target_tol, exp.max_bisections)
            rows.append(LevelSetRow(L, n, label, *res))
    return rows


# -- bounds -----------------------------------------------------------------------

def cmd_bound(exp: ExperimentConfig, eps: float | None = None, label: str | None = None) -> dict:
    """Two-grid replica bound, fault-free norms and the multilevel bound.

    Uses a two-level hierarchy (``levels = 1``) built from the problem
    section; the Monte-Carlo Lyapunov estimate of the same instance is
    reported next to the bound.
    """
    eps = eps if eps is not None else exp.eps_axis[0]
    label = label if label is not None else next(iter(exp.variants))
    h = hierarchy_for(exp, 1)
    cfg = exp.cycle_config(eps, label)
    free = replace(cfg, faults={})
    E = assemble_iteration_matrix(h, free, 1)
    c_tg = two_grid_constant(h, cfg)
    xi = exp.xi if exp.xi is not None else c_tg
    lemma = wcycle_bound(xi, exp.c_star, exp.gamma)
    bound = replica_bound_two_grid(h, cfg)
    seed = point_seed(exp.seed, 1, eps, label)
    values = [estimate_lyapunov(h, cfg, exp.iterations, seed + r, exp.burn_in).value
              for r in range(exp.replications)]
    etg = two_grid_matrix(h, 1, cfg.nu1, cfg.nu2)
    A = h.A[1].toarray()
    return {
        "n": h.size(1),
        "eps": eps,
        "config": label,
        "replica_bound": bound,
        "lyapunov_estimate": float(np.mean(values)),
        "lyapunov_stderr": (float(np.std(values, ddof=1) / math.sqrt(len(values)))
                            if len(values) > 1 else None),
        "seed": seed,
        "fault_free_spectral_radius": float(np.abs(np.linalg.eigvals(E)).max()),
        "two_grid_norm_2": float(np.linalg.norm(etg, 2)),
        "two_grid_norm_A": energy_norms(etg, A, A)[0],
        "C_TG": c_tg,
        "lemma": {"xi": xi, "C_star": exp.c_star, "gamma": exp.gamma, "bound": lemma},
    }


__all__ = ["ExperimentConfig", "load_config", "read_config", "cmd_hierarchy", "cmd_solve",
           "cmd_lyapunov_sweep", "cmd_levelset", "cmd_bound", "run_point", "find_level",
           "rows_to_csv", "rows_from_csv", "levelset_to_csv", "HypothesisError"]
