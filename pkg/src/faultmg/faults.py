"""Random diagonal fault matrices and the seeded streams that drive them.

Every fault realisation is drawn from its own counter-based Philox stream
keyed by ``(seed, site, level, iteration, replica)``.  A run is therefore
reproducible no matter in which order its pieces are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("none", "componentwise", "blockwise", "silent", "bitflip")
ZEROING_KINDS = ("componentwise", "blockwise")

# stream-id components; "init" is the initial iterate of a Lyapunov run
SITE_CODES = {"S_pre": 0, "S_post": 1, "rho": 2, "R": 3, "P": 4, "init": 5, "rhs": 6}


@dataclass(frozen=True)
class FaultModel:
    """Stochastic description of the faults hitting one operation.

    kind
        ``none``, ``componentwise`` (entries zeroed independently),
        ``blockwise`` (contiguous blocks zeroed together), ``silent``
        (entry multiplied by ``1 + eta``) or ``bitflip`` (one random bit of
        the float64 word flipped).
    rate
        Probability that an entry (or block) is hit.
    block_size
        Block length for ``blockwise``; the last block may be short.
    silent_dist, silent_scale
        ``uniform`` on ``(-scale, scale)`` or ``gaussian`` with standard
        deviation ``scale``.
    """

    kind: str = "none"
    rate: float = 0.0
    block_size: int = 2**14
    silent_dist: str = "uniform"
    silent_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"fault rate must lie in [0, 1], got {self.rate}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.silent_dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown silent distribution {self.silent_dist!r}")
        if self.kind == "bitflip" and self.rate >= 1.0:
            raise ValueError("bitflip rate must be < 1")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.rate > 0.0


NO_FAULTS = FaultModel()


def rng_stream(seed: int, site: str, level: int = 0, iteration: int = 0,
               replica: int = 0) -> np.random.Generator:
    """Independent generator for one (site, level, iteration, replica) tuple."""
    key = (SITE_CODES[site], int(level), int(iteration), int(replica))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


class FaultStreams:
    """Lazily created per-iteration streams, cached by (site, level, replica).

    Repeated visits of the same site and level within one iteration (more
    than one smoothing step, W-cycle recursion) consume one stream in order.
    """

    def __init__(self, seed: int, iteration: int = 0):
        self.seed = int(seed)
        self.iteration = int(iteration)
        self._cache: dict[tuple, np.random.Generator] = {}

    def get(self, site: str, level: int, replica: int = 0) -> np.random.Generator:
        key = (site, level, replica)
        g = self._cache.get(key)
        if g is None:
            g = self._cache[key] = rng_stream(self.seed, site, level, self.iteration, replica)
        return g


def fault_indices(rate: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted positions of independent Bernoulli(rate) successes among ``n``.

    Rare faults are placed by summing geometric gaps, which costs
    ``O(rate * n)`` instead of ``O(n)``.
    """
    if rate <= 0.0 or n <= 0:
        return np.empty(0, dtype=np.intp)
    if rate >= 1.0:
        return np.arange(n)
    if rate > 0.05 or n < 256:
        return np.flatnonzero(rng.random(n) < rate)
    expected = rate * n
    size = int(expected + 8.0 * math.sqrt(expected) + 16)
    # gaps beyond n are equivalent; clipping keeps the cumulative sum from overflowing
    pos = np.cumsum(np.minimum(rng.geometric(rate, size), n + 1)) - 1
    while pos[-1] < n:
        more = np.cumsum(np.minimum(rng.geometric(rate, size), n + 1)) + pos[-1]
        pos = np.concatenate([pos, more])
    return pos[: np.searchsorted(pos, n)].astype(np.intp)


def _block_members(blocks: np.ndarray, block_size: int, n: int) -> np.ndarray:
    if blocks.size == 0:
        return blocks
    idx = (blocks[:, None] * block_size + np.arange(block_size)).ravel()
    return idx[idx < n]


def _silent_eta(model: FaultModel, size: int, rng: np.random.Generator) -> np.ndarray:
    if model.silent_dist == "uniform":
        return rng.uniform(-model.silent_scale, model.silent_scale, size)
    return rng.normal(0.0, model.silent_scale, size)


def flip_bits(values: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Flip bit ``bits[i]`` (0 = least significant) of the float64 ``values[i]``."""
    words = np.ascontiguousarray(values, dtype=np.float64).view(np.uint64)
    flipped = words ^ np.left_shift(np.uint64(1), np.asarray(bits, dtype=np.uint64))
    return flipped.view(np.float64)


def sample_mask(model: FaultModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Diagonal of one realisation of the fault matrix, as a length-``n`` vector."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    m = np.ones(n)
    if not model.active:
        return m
    if model.kind == "componentwise":
        m[fault_indices(model.rate, n, rng)] = 0.0
    elif model.kind == "blockwise":
        nblocks = -(-n // model.block_size)
        blocks = fault_indices(model.rate, nblocks, rng)
        m[_block_members(blocks, model.block_size, n)] = 0.0
    elif model.kind == "silent":
        idx = fault_indices(model.rate, n, rng)
        m[idx] = 1.0 + _silent_eta(model, idx.size, rng)
    else:
        raise ValueError("bit-flip faults are not a diagonal multiplier; use bitflip_corrupt")
    return m


def apply_mask(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``diag(mask) y`` with exact zeros wherever the mask is zero."""
    if y.shape != mask.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {mask.shape}")
    with np.errstate(invalid="ignore"):
        return np.where(mask == 0.0, 0.0, y * mask)


def bitflip_corrupt(y: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Copy of ``y`` where each entry, with probability ``rate``, has one random bit flipped."""
    out = np.array(y, dtype=np.float64, copy=True)
    idx = fault_indices(rate, out.size, rng)
    if idx.size:
        out[idx] = flip_bits(out[idx], rng.integers(0, 64, idx.size))
    return out


def corrupt(model: FaultModel, y: np.ndarray, rng: np.random.Generator):
    """One faulty replica of ``y`` in sparse form.

    Returns ``(idx, values)``: the replica equals ``y`` except at the sorted
    positions ``idx``, where it holds ``values``.
    """
    n = y.size
    if not model.active:
        return np.empty(0, dtype=np.intp), np.empty(0)
    if model.kind == "componentwise":
        idx = fault_indices(model.rate, n, rng)
        return idx, np.zeros(idx.size)
    if model.kind == "blockwise":
        nblocks = -(-n // model.block_size)
        idx = _block_members(fault_indices(model.rate, nblocks, rng), model.block_size, n)
        return idx, np.zeros(idx.size)
    idx = fault_indices(model.rate, n, rng)
    if model.kind == "silent":
        return idx, y[idx] * (1.0 + _silent_eta(model, idx.size, rng))
    return idx, flip_bits(y[idx], rng.integers(0, 64, idx.size))


def model_moments(model: FaultModel) -> tuple[float, float]:
    """Mean ``e`` and variance bound of the diagonal entries of the fault matrix."""
    p = model.rate
    if model.kind == "none":
        return 1.0, 0.0
    if model.kind in ZEROING_KINDS:
        return 1.0 - p, p * (1.0 - p)
    if model.kind == "silent":
        s = model.silent_scale
        # eta is centred for both supported distributions
        m1 = 0.0
        m2 = s * s / 3.0 if model.silent_dist == "uniform" else s * s
        return 1.0 + p * m1, p * m2 - (p * m1) ** 2
    raise ValueError("bit-flip faults have no closed-form diagonal moments")
