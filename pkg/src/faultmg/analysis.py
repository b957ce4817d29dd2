"""Convergence analysis of the fault-prone cycle.

Random iteration matrices have no meaningful spectral radius; their
asymptotic rate is the Lyapunov spectral radius, estimated here as the
geometric mean of per-iteration contraction factors of a renormalised
iterate.  Small instances can instead be bounded through the deterministic
tensor expectation ``E[E (x) E]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cycle import SITES, CycleConfig, OutcomeCounters, agreement_probabilities, mg_cycle
from .faults import ZEROING_KINDS, FaultModel, FaultStreams, rng_stream, sample_mask
from .grid import GridHierarchy
from .linalg import ConvergenceError, kron, spectral_radius_dense, symmetric_sqrt

MAX_DENSE = 4096
MAX_TENSOR_N = 64


class HypothesisError(ValueError):
    """A precondition of a convergence bound does not hold."""


@dataclass
class LyapunovEstimate:
    value: float
    iterations: int
    factors: np.ndarray = field(repr=False)
    seed: int
    burn_in: int = 0
    collapsed: int = 0
    norm: str = "euclidean"

    @property
    def stderr(self) -> float:
        """Batch-means standard error (20 batches) of ``value``."""
        logs = np.log(self.factors)
        nb = min(20, logs.size)
        if nb < 2:
            return float("nan")
        means = np.array([b.mean() for b in np.array_split(logs, nb)])
        return float(self.value * means.std(ddof=1) / math.sqrt(nb))


def estimate_lyapunov(hierarchy: GridHierarchy, config: CycleConfig, iterations: int = 1000,
                      seed: int = 0, burn_in: int = 50, step=None,
                      counters: OutcomeCounters | None = None) -> LyapunovEstimate:
    """Geometric-mean contraction of ``iterations`` cycles with ``b = 0``.

    The iterate starts as a seeded standard normal vector of unit norm and is
    renormalised after every cycle.  The first ``burn_in`` factors are run
    but not averaged.  ``step(x, streams)`` replaces the multigrid cycle,
    which is handy for test doubles.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    L = hierarchy.levels
    n = hierarchy.size(L)
    b = np.zeros(n)

    def fresh(it):
        v = rng_stream(seed, "init", iteration=it).standard_normal(n)
        return v / np.linalg.norm(v)

    x = fresh(0)
    factors = np.empty(iterations)
    collapsed = 0
    tiny = np.finfo(np.float64).tiny
    for it in range(burn_in + iterations):
        streams = FaultStreams(seed, it)
        if step is None:
            x = mg_cycle(L, b, x, hierarchy, config, streams, counters)
        else:
            x = step(x, streams)
        f = float(np.linalg.norm(x))
        if f == 0.0 or not math.isfinite(f):
            collapsed += 1
            f = tiny
            x = fresh(it + 1)
        else:
            x = x / f
        if it >= burn_in:
            factors[it - burn_in] = f
    value = math.exp(math.fsum(np.log(factors)) / iterations)
    return LyapunovEstimate(value, iterations, factors, seed, burn_in, collapsed)


def _dense(M) -> np.ndarray:
    return M.toarray() if hasattr(M, "toarray") else np.asarray(M)


def _check_dense(n: int) -> None:
    if n > MAX_DENSE:
        raise ValueError(f"dense assembly limited to n <= {MAX_DENSE}, got {n}")


def assemble_iteration_matrix(hierarchy: GridHierarchy, config: CycleConfig,
                              level: int | None = None) -> np.ndarray:
    """Dense fault-free iteration matrix ``E_level`` from the level recursion."""
    if level is None:
        level = hierarchy.levels
    if not config.fault_free:
        raise ValueError("iteration matrix assembly needs a fault-free configuration")
    _check_dense(hierarchy.size(level))
    E = np.zeros((hierarchy.size(0),) * 2)
    for l in range(1, level + 1):
        A = _dense(hierarchy.A[l])
        n = A.shape[0]
        I = np.eye(n)
        S = I - hierarchy.jacobi[l][:, None] * A
        coarse = np.linalg.solve(_dense(hierarchy.A[l - 1]), _dense(hierarchy.R[l - 1]) @ A)
        Ec = np.linalg.matrix_power(E, config.gamma)
        CG = I - _dense(hierarchy.P[l - 1]) @ (np.eye(Ec.shape[0]) - Ec) @ coarse
        E = np.linalg.matrix_power(S, config.nu2) @ CG @ np.linalg.matrix_power(S, config.nu1)
    return E


def two_grid_matrix(hierarchy: GridHierarchy, level: int, nu_pre: int, nu_post: int) -> np.ndarray:
    """Fault-free two-grid iteration matrix on ``level`` (exact solve on ``level - 1``)."""
    A = _dense(hierarchy.A[level])
    _check_dense(A.shape[0])
    I = np.eye(A.shape[0])
    S = I - hierarchy.jacobi[level][:, None] * A
    CG = I - _dense(hierarchy.P[level - 1]) @ np.linalg.solve(
        _dense(hierarchy.A[level - 1]), _dense(hierarchy.R[level - 1]) @ A)
    return np.linalg.matrix_power(S, nu_post) @ CG @ np.linalg.matrix_power(S, nu_pre)


def two_grid_constant(hierarchy: GridHierarchy, config: CycleConfig) -> float:
    """``max_l ||E_TG_l(nu2, nu1)||_2``: smoothing counts swapped, as in the W-cycle bound."""
    return max(np.linalg.norm(two_grid_matrix(hierarchy, l, config.nu2, config.nu1), 2)
               for l in range(1, hierarchy.levels + 1))


# -- replica trick -------------------------------------------------------------

def _effective_model(config: CycleConfig, site: str) -> FaultModel:
    """Diagonal multiplier model of a site after detection/protection voting.

    For zeroing faults the vote output is the clean value or zero, so the
    site is again a zeroing model with rate ``1 - Pr{correct}``.
    """
    model = config.model(site)
    if not model.active:
        return model
    K, k = config.votes(site)
    if model.kind in ZEROING_KINDS:
        if K == 1:
            return model
        pc, _, _ = agreement_probabilities(model.rate, K, k)
        return FaultModel(model.kind, 1.0 - pc, model.block_size)
    if model.kind == "silent" and K == 1:
        return model
    raise ValueError(f"no diagonal multiplier model for {model.kind!r} faults with voting")


def _pair_moments(model: FaultModel, n: int) -> np.ndarray:
    """``E[x_i x_j]`` for the diagonal entries of one fault matrix."""
    if not model.active:
        return np.ones((n, n))
    q = 1.0 - model.rate
    if model.kind == "componentwise":
        Mom = np.full((n, n), q * q)
        np.fill_diagonal(Mom, q)
        return Mom
    if model.kind == "blockwise":
        block = np.arange(n) // model.block_size
        return np.where(block[:, None] == block[None, :], q, q * q)
    raise ValueError(f"closed-form tensor expectation not available for {model.kind!r}")


def _site_moments(config: CycleConfig, site: str, n: int):
    model = _effective_model(config, site)
    Mom = _pair_moments(model, n)
    return (1.0 - model.rate if model.active else 1.0), Mom.ravel()


def _two_grid_parts(hierarchy: GridHierarchy):
    if hierarchy.levels != 1:
        raise ValueError("two-grid analysis expects a hierarchy with levels == 1")
    n = hierarchy.size(1)
    if n > MAX_TENSOR_N:
        raise ValueError(f"tensor expectation limited to n <= {MAX_TENSOR_N}, got {n}")
    A = _dense(hierarchy.A[1])
    B = hierarchy.jacobi[1][:, None] * A
    G = _dense(hierarchy.P[0]) @ np.linalg.inv(_dense(hierarchy.A[0]))
    R = _dense(hierarchy.R[0])
    return n, A, B, G, R


def tensor_expectation_closed_form(hierarchy: GridHierarchy, config: CycleConfig) -> np.ndarray:
    """``E[E_TG (x) E_TG]`` for a two-level hierarchy with zeroing faults.

    The five sites are independent, so the expectation of the product of
    tensor squares is the product of the per-factor expectations; within a
    site the diagonal pair moments ``E[x_i x_j]`` enter.
    """
    n, A, B, G, R = _two_grid_parts(hierarchy)
    nc = R.shape[0]
    I = np.eye(n)
    II = np.eye(n * n)

    def smoother(site):
        e, d = _site_moments(config, site, n)
        return II - e * (kron(I, B) + kron(B, I)) + d[:, None] * kron(B, B)

    eP, dP = _site_moments(config, "P", n)
    eR, dR = _site_moments(config, "R", nc)
    er, dr = _site_moments(config, "rho", n)
    Y = eP * eR * er * (G @ R @ A)
    YY = (dP[:, None] * kron(G, G)) @ (dR[:, None] * kron(R, R)) @ (dr[:, None] * kron(A, A))
    CG = II - kron(I, Y) - kron(Y, I) + YY
    pre = np.linalg.matrix_power(smoother("S_pre"), config.nu1)
    post = np.linalg.matrix_power(smoother("S_post"), config.nu2)
    return post @ CG @ pre


def _batch_masks(model: FaultModel, batch: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if model.kind == "blockwise":
        return np.stack([sample_mask(model, n, rng) for _ in range(batch)])
    return sample_mask(model, batch * n, rng).reshape(batch, n)


def sample_two_grid_matrices(hierarchy: GridHierarchy, config: CycleConfig, count: int,
                             rng: np.random.Generator) -> np.ndarray:
    """``count`` independent realisations of the fault-prone two-grid matrix."""
    n, A, B, G, R = _two_grid_parts(hierarchy)
    nc = R.shape[0]
    I = np.eye(n)
    models = {s: _effective_model(config, s) for s in SITES}

    def smoother_power(site, power):
        out = np.broadcast_to(I, (count, n, n)).copy()
        for _ in range(power):
            X = _batch_masks(models[site], count, n, rng)
            out = (I - X[:, :, None] * B) @ out
        return out

    pre = smoother_power("S_pre", config.nu1)
    Xr = _batch_masks(models["rho"], count, n, rng)
    XR = _batch_masks(models["R"], count, nc, rng)
    XP = _batch_masks(models["P"], count, n, rng)
    CG = I - (XP[:, :, None] * G) @ ((XR[:, :, None] * R) @ (Xr[:, :, None] * A))
    post = smoother_power("S_post", config.nu2)
    return post @ CG @ pre


def tensor_expectation_monte_carlo(hierarchy: GridHierarchy, config: CycleConfig,
                                   samples: int = 100_000, seed: int = 0,
                                   batch: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean of ``E_TG (x) E_TG`` and its entrywise standard error."""
    n = hierarchy.size(1)
    rng = np.random.default_rng(seed)
    total = np.zeros((n * n, n * n))
    total_sq = np.zeros_like(total)
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        E = sample_two_grid_matrices(hierarchy, config, m, rng)
        T = np.einsum("bij,bkl->bikjl", E, E).reshape(m, n * n, n * n)
        total += T.sum(axis=0)
        total_sq += np.einsum("bij,bij->ij", T, T)
        done += m
    mean = total / samples
    var = np.maximum(total_sq / samples - mean**2, 0.0) * samples / max(samples - 1, 1)
    return mean, np.sqrt(var / samples)


def _radius(T: np.ndarray) -> float:
    try:
        return spectral_radius_dense(T)
    except ConvergenceError:
        return float(np.abs(np.linalg.eigvals(T)).max())


def replica_bound_two_grid(hierarchy: GridHierarchy, config: CycleConfig,
                           method: str = "closed-form", samples: int = 100_000,
                           seed: int = 0) -> float:
    """Upper bound ``sqrt(rho(E[E_TG (x) E_TG]))`` on the Lyapunov spectral radius."""
    if method == "closed-form":
        T = tensor_expectation_closed_form(hierarchy, config)
    elif method == "monte-carlo":
        T, _ = tensor_expectation_monte_carlo(hierarchy, config, samples, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return math.sqrt(_radius(T))


# -- norms and bounds ----------------------------------------------------------

def energy_norms(Z, A_row, A_col) -> tuple[float, float]:
    """``(||A_row^1/2 Z A_col^-1/2||_2, ||A_row Z A_col^-1||_2)``."""
    Z, A_row, A_col = (np.atleast_2d(_dense(M)).astype(np.float64) for M in (Z, A_row, A_col))
    if Z.shape != (A_row.shape[0], A_col.shape[0]):
        raise ValueError(f"incompatible shapes {Z.shape}, {A_row.shape}, {A_col.shape}")
    _check_dense(max(Z.shape))
    half_row = symmetric_sqrt(A_row)
    half_col = symmetric_sqrt(A_col)
    e1 = np.linalg.norm(half_row @ np.linalg.solve(half_col.T, Z.T).T, 2)
    e2 = np.linalg.norm(A_row @ np.linalg.solve(A_col.T, Z.T).T, 2)
    return float(e1), float(e2)


def wcycle_bound(xi: float, c_star: float, gamma: int) -> float:
    """Multilevel rate bound from the recursion ``eta_l <= xi + C_* eta_{l-1}^gamma``."""
    if gamma < 2:
        raise HypothesisError(f"gamma >= 2 violated (gamma = {gamma})")
    if c_star * gamma <= 1:
        raise HypothesisError(f"C_* * gamma > 1 violated (C_* * gamma = {c_star * gamma})")
    if xi < 0:
        raise HypothesisError(f"xi >= 0 violated (xi = {xi})")
    limit = (gamma - 1) / gamma * (c_star * gamma) ** (-1.0 / (gamma - 1))
    if xi > limit:
        raise HypothesisError(
            f"xi <= (gamma-1)/gamma * (C_* gamma)^(-1/(gamma-1)) violated ({xi} > {limit})")
    if gamma == 2:
        return 2.0 * xi / (1.0 + math.sqrt(max(0.0, 1.0 - 4.0 * c_star * xi)))
    return gamma / (gamma - 1) * xi


@dataclass
class ScalingFit:
    slope_n: float | None
    slope_eps: float | None
    intercept: float
    used: list
    excluded: list


def fit_scaling_exponent(points, baseline) -> ScalingFit:
    """Least-squares exponents of the excess rate ``rho - rho0`` in ``n`` and ``eps``.

    ``points`` holds ``(n, eps, rho)`` triples; ``baseline`` is either a
    number or a mapping from ``n`` to the fault-free rate at that size.  An
    axis that does not vary gets slope ``None``.  Points with non-positive
    excess are dropped and reported in ``excluded``.
    """
    used, excluded, rows, ys = [], [], [], []
    for n, eps, rho in points:
        base = baseline[n] if isinstance(baseline, dict) else baseline
        excess = rho - base
        if not excess > 0:
            excluded.append((n, eps, rho))
            continue
        used.append((n, eps, rho))
        rows.append((math.log(n), math.log(eps) if eps > 0 else float("nan")))
        ys.append(math.log(excess))
    if len(used) < 2:
        raise ValueError(f"need at least 2 points with positive excess, got {len(used)}")
    X = np.array(rows)
    vary = [bool(np.ptp(X[:, j]) > 0) for j in range(2)]
    if not any(vary):
        raise ValueError("neither n nor eps varies across the points")
    cols = [X[:, j] for j in range(2) if vary[j]]
    design = np.column_stack(cols + [np.ones(len(ys))])
    coef, *_ = np.linalg.lstsq(design, np.array(ys), rcond=None)
    it = iter(coef)
    slope_n = float(next(it)) if vary[0] else None
    slope_eps = float(next(it)) if vary[1] else None
    return ScalingFit(slope_n, slope_eps, float(coef[-1]), used, excluded)
