"""Fault-prone multigrid cycle with laissez-faire mitigation.

Five operations of the cycle are fault sites: the pre- and post-smoothing
updates ``N (b - A x)``, the fine residual, the restricted residual and the
prolonged correction.  A site's clean output is passed through a voting
pipeline: ``K`` faulty replicas are drawn and a component is accepted once
``k`` of them agree bitwise with magnitude below the threshold; otherwise it
is zeroed.  Plain detection is ``k = K``; protection of the prolongation uses
a separate ``(K_P, k_P)`` pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from .faults import (NO_FAULTS, ZEROING_KINDS, FaultModel, FaultStreams, _block_members,
                     corrupt, fault_indices)
from .grid import GridHierarchy

SITES = ("S_pre", "S_post", "rho", "R", "P")
C, M, U = 0, 1, 2


@dataclass
class CycleConfig:
    """Cycle shape plus the fault model and voting parameters of every site.

    ``replicas[site]`` is the detection replica count ``K`` (default 1, i.e.
    no replication).  ``protection = (K_P, k_P)`` replaces detection on the
    prolongation by the k_P-of-K_P acceptance rule.
    """

    nu1: int = 1
    nu2: int = 1
    gamma: int = 2
    faults: dict = field(default_factory=dict)
    replicas: dict = field(default_factory=dict)
    protection: tuple | None = None
    threshold: float = 1e16
    fast_path: bool = True

    def __post_init__(self):
        if self.nu1 < 0 or self.nu2 < 0 or self.nu1 + self.nu2 < 1:
            raise ValueError(f"need nu1, nu2 >= 0 and nu1 + nu2 >= 1, got {self.nu1}, {self.nu2}")
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        unknown = (set(self.faults) | set(self.replicas)) - set(SITES)
        if unknown:
            raise ValueError(f"unknown fault sites {sorted(unknown)}; expected {SITES}")
        if any(k < 1 for k in self.replicas.values()):
            raise ValueError("replica counts must be >= 1")
        if self.protection is not None:
            KP, kP = self.protection
            if not 1 <= kP <= KP:
                raise ValueError(f"need 1 <= k_P <= K_P, got K_P={KP}, k_P={kP}")

    @classmethod
    def with_faults(cls, model: FaultModel, sites=SITES, replicas: int = 1,
                    protect_prolongation: bool = False, protection=None, **kwargs):
        """Same ``model`` on every site in ``sites``.

        ``protect_prolongation=True`` makes the prolongation exact (no faults
        there at all), the setting of the protected-prolongation experiments.
        """
        faults = {s: model for s in sites}
        if protect_prolongation:
            faults.pop("P", None)
        return cls(faults=faults, replicas={s: replicas for s in SITES},
                   protection=protection, **kwargs)

    def model(self, site: str) -> FaultModel:
        return self.faults.get(site, NO_FAULTS)

    def votes(self, site: str) -> tuple[int, int]:
        if site == "P" and self.protection is not None:
            return tuple(self.protection)
        K = self.replicas.get(site, 1)
        return K, K

    @property
    def fault_free(self) -> bool:
        return not any(m.active for m in self.faults.values())


class OutcomeCounters:
    """Per-site tallies of correct, mitigated and undetected components."""

    def __init__(self):
        self.counts = {s: np.zeros(3, dtype=np.int64) for s in SITES}

    def add(self, site: str, counts) -> None:
        self.counts[site] += np.asarray(counts, dtype=np.int64)

    def total(self, site: str) -> int:
        return int(self.counts[site].sum())

    def merge(self, other: "OutcomeCounters") -> None:
        for s in SITES:
            self.counts[s] += other.counts[s]

    def as_dict(self) -> dict:
        return {s: {"C": int(c[0]), "M": int(c[1]), "U": int(c[2])} for s, c in self.counts.items()}


@lru_cache(maxsize=256)
def agreement_probabilities(rate: float, K: int, k: int) -> tuple[float, float, float]:
    """Outcome probabilities of the k-of-K rule for replicas that are either
    clean or zeroed, each zeroed independently with probability ``rate``.

    Replicas are drawn one at a time until either value has appeared ``k``
    times; the clean value wins with a negative-binomial probability.
    """
    q = 1.0 - rate
    extra = min(k - 1, K - k)
    pc = sum(comb(k - 1 + j, j) * q**k * rate**j for j in range(extra + 1))
    pu = sum(comb(k - 1 + j, j) * rate**k * q**j for j in range(extra + 1))
    return pc, max(0.0, 1.0 - pc - pu), pu


def vote(W: np.ndarray, k: int, threshold: float = 1e16):
    """Sequential k-of-K acceptance, vectorised over components.

    ``W[j, i]`` is replica ``j`` of component ``i``.  Component ``i`` takes
    the first replica value that reaches ``k`` bitwise-identical copies with
    magnitude below ``threshold``.  Returns ``(values, accepted)``; rejected
    components hold 0.
    """
    K, m = W.shape
    bits = np.ascontiguousarray(W).view(np.uint64)
    small = np.abs(W) < threshold
    out = np.zeros(m)
    done = np.zeros(m, dtype=bool)
    for j in range(k - 1, K):
        count = (bits[: j + 1] == bits[j]).sum(axis=0)
        hit = ~done & (count >= k) & small[j]
        out[hit] = W[j, hit]
        done |= hit
    return out, done


def _guard(out: np.ndarray, threshold: float, skip=None) -> int:
    """Zero entries at or above ``threshold`` (and NaN); return how many."""
    if out.size == 0 or (out.max() < threshold and out.min() > -threshold):
        return 0
    big = ~(np.abs(out) < threshold)
    if skip is not None:
        big[skip] = False
    out[big] = 0.0
    return int(big.sum())


def _literal_vote(y, model, K, k, threshold, rngs):
    """Simulate ``K`` faulty replicas of ``y`` and vote, component by component."""
    reps = [corrupt(model, y, rng) for rng in rngs[:K]]
    union = np.unique(np.concatenate([idx for idx, _ in reps])) if reps else np.empty(0, np.intp)
    out = y.copy()
    mitigated = undetected = 0
    if union.size:
        clean = y[union]
        W = np.tile(clean, (K, 1))
        for j, (idx, vals) in enumerate(reps):
            W[j, np.searchsorted(union, idx)] = vals
        vals, accepted = vote(W, k, threshold)
        out[union] = vals
        wrong = accepted & ~(vals == clean)
        mitigated = int((~accepted).sum())
        undetected = int(wrong.sum())
    mitigated += _guard(out, threshold, skip=union)
    if K == 1 and model.kind in ZEROING_KINDS:
        # a zeroing fault without replication is a detected, mitigated fault
        mitigated, undetected = mitigated + undetected, 0
    return out, (y.size - mitigated - undetected, mitigated, undetected)


def event_level_fast_path(model: FaultModel, n: int, K: int, k: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample voting outcomes directly from their closed-form probabilities.

    Only valid for zeroing models, whose replicas are either clean or zero.
    Returns the sorted indices of the affected units (components, or blocks
    for ``blockwise``) and a boolean array marking which of them are
    undetected (all replicas zeroed) rather than mitigated.
    """
    if model.kind not in ZEROING_KINDS:
        raise ValueError(f"fast path supports {ZEROING_KINDS}, not {model.kind!r}")
    pc, _, pu = agreement_probabilities(model.rate, K, k)
    hit = fault_indices(1.0 - pc, n, rng)
    if hit.size == 0 or K == 1:
        return hit, np.zeros(hit.size, dtype=bool)
    return hit, rng.random(hit.size) < pu / (1.0 - pc)


def _fast_vote(y, model, K, k, threshold, rng):
    n = y.size
    if model.kind == "blockwise":
        bs = model.block_size
        blocks, und_blocks = event_level_fast_path(model, -(-n // bs), K, k, rng)
        idx = _block_members(blocks, bs, n)
        und = und_blocks[np.searchsorted(blocks, idx // bs)]
    else:
        idx, und = event_level_fast_path(model, n, K, k, rng)
    if idx.size == 0:
        if y.max() < threshold and y.min() > -threshold:
            return y, (n, 0, 0)
        out = y.copy()
        mitigated = _guard(out, threshold)
        return out, (n - mitigated, mitigated, 0)
    out = y.copy()
    out[idx] = 0.0
    nonzero = y[idx] != 0.0
    # all replicas zeroed on a true zero is still the correct value
    undetected = int((und & nonzero).sum())
    mitigated = idx.size - undetected - int((und & ~nonzero).sum())
    mitigated += _guard(out, threshold, skip=idx)
    return out, (n - mitigated - undetected, mitigated, undetected)


def replicate_detect(y: np.ndarray, model: FaultModel, K: int, rngs, threshold: float = 1e16):
    """Detection with ``K`` replicas: accept a component only on unanimous
    bitwise agreement below ``threshold``, otherwise zero it.

    Returns ``(values, (n_correct, n_mitigated, n_undetected))``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    return _literal_vote(np.asarray(y, dtype=np.float64), model, K, K, threshold, list(rngs))


def protect_prolongation(e_coarse: np.ndarray, P, model: FaultModel, K_P: int, k_P: int,
                         rngs, threshold: float = 1e16):
    """Prolonged correction ``P e`` computed with up to ``K_P`` faulty replicas,
    accepting a component as soon as ``k_P`` of them agree.

    Returns ``(update, (n_correct, n_mitigated, n_undetected))``; the caller
    adds ``update`` to the fine iterate.
    """
    if not 1 <= k_P <= K_P:
        raise ValueError(f"need 1 <= k_P <= K_P, got K_P={K_P}, k_P={k_P}")
    return _literal_vote(P @ e_coarse, model, K_P, k_P, threshold, list(rngs))


def fault_site(y: np.ndarray, site: str, level: int, config: CycleConfig,
               streams: FaultStreams, counters: OutcomeCounters | None = None) -> np.ndarray:
    """Pass a clean site output through its fault, detection and mitigation model."""
    model = config.model(site)
    if not model.active:
        return y
    K, k = config.votes(site)
    if config.fast_path and model.kind in ZEROING_KINDS:
        out, counts = _fast_vote(y, model, K, k, config.threshold, streams.get(site, level, 0))
    else:
        rngs = [streams.get(site, level, j) for j in range(K)]
        out, counts = _literal_vote(y, model, K, k, config.threshold, rngs)
    if counters is not None:
        counters.add(site, counts)
    return out


def smooth(level: int, x: np.ndarray, b: np.ndarray, hierarchy: GridHierarchy,
           config: CycleConfig, site: str, streams: FaultStreams,
           counters: OutcomeCounters | None = None) -> np.ndarray:
    """One damped Jacobi step whose update goes through ``site``'s fault model."""
    A = hierarchy.A[level]
    if x.shape[0] != A.shape[0] or b.shape[0] != A.shape[0]:
        raise ValueError(f"level {level} expects vectors of length {A.shape[0]}")
    u = hierarchy.jacobi[level] * (b - A @ x)
    return x + fault_site(u, site, level, config, streams, counters)


def mg_cycle(level: int, b: np.ndarray, x: np.ndarray, hierarchy: GridHierarchy,
             config: CycleConfig, streams: FaultStreams,
             counters: OutcomeCounters | None = None) -> np.ndarray:
    """One fault-prone multigrid cycle on ``level``; returns the new iterate."""
    if level == 0:
        return hierarchy.coarse_solve(b)
    if x.shape[0] != hierarchy.size(level) or b.shape[0] != hierarchy.size(level):
        raise ValueError(f"level {level} expects vectors of length {hierarchy.size(level)}")
    A = hierarchy.A[level]
    for _ in range(config.nu1):
        x = smooth(level, x, b, hierarchy, config, "S_pre", streams, counters)
    r = fault_site(b - A @ x, "rho", level, config, streams, counters)
    d = fault_site(hierarchy.R[level - 1] @ r, "R", level - 1, config, streams, counters)
    e = np.zeros(d.shape[0])
    for _ in range(config.gamma):
        e = mg_cycle(level - 1, d, e, hierarchy, config, streams, counters)
    x = x + fault_site(hierarchy.P[level - 1] @ e, "P", level, config, streams, counters)
    for _ in range(config.nu2):
        x = smooth(level, x, b, hierarchy, config, "S_post", streams, counters)
    return x
