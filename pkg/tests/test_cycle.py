from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultmg.analysis import assemble_iteration_matrix
from faultmg.cycle import (SITES, CycleConfig, OutcomeCounters, agreement_probabilities,
                           event_level_fast_path, fault_site, mg_cycle, protect_prolongation,
                           replicate_detect, smooth, vote)
from faultmg.faults import FaultModel, FaultStreams, rng_stream
from faultmg.grid import ProblemSpec, build_hierarchy


def enumerate_outcomes(rate, K, k):
    """Exhaustive oracle over all 2^K clean/zeroed replica patterns (true value nonzero)."""
    pc = pm = pu = 0.0
    for pattern in product((0, 1), repeat=K):  # 1 = zeroed
        p = np.prod([rate if z else 1 - rate for z in pattern])
        counts = {0: 0, 1: 0}
        result = None
        for z in pattern:
            counts[z] += 1
            if counts[z] >= k:
                result = z
                break
        if result == 0:
            pc += p
        elif result == 1:
            pu += p
        else:
            pm += p
    return pc, pm, pu


def reference_cycle(level, b, x, h, nu1=1, nu2=1, gamma=2):
    """Plain W-cycle with no fault plumbing at all."""
    if level == 0:
        return h.coarse_solve(b)
    A = h.A[level]
    for _ in range(nu1):
        x = x + h.jacobi[level] * (b - A @ x)
    d = h.R[level - 1] @ (b - A @ x)
    e = np.zeros(d.shape[0])
    for _ in range(gamma):
        e = reference_cycle(level - 1, d, e, h, nu1, nu2, gamma)
    x = x + h.P[level - 1] @ e
    for _ in range(nu2):
        x = x + h.jacobi[level] * (b - A @ x)
    return x


@pytest.mark.parametrize("K,k", [(1, 1), (2, 2), (3, 3), (4, 3), (3, 2), (5, 3), (8, 8)])
@pytest.mark.parametrize("rate", [0.0, 0.1, 0.3, 0.7])
def test_agreement_probabilities_match_enumeration(K, k, rate):
    assert np.allclose(agreement_probabilities(rate, K, k), enumerate_outcomes(rate, K, k),
                       atol=1e-14)


def test_agreement_kp43_formula():
    for eps in (0.01, 0.1, 0.3):
        pc, _, _ = agreement_probabilities(eps, 4, 3)
        assert pc == pytest.approx((1 - eps) ** 3 * (1 + 3 * eps))


def test_config_validation():
    with pytest.raises(ValueError):
        CycleConfig(nu1=0, nu2=0)
    with pytest.raises(ValueError):
        CycleConfig(gamma=0)
    with pytest.raises(ValueError):
        CycleConfig(faults={"Q": FaultModel()})
    with pytest.raises(ValueError):
        CycleConfig(protection=(2, 3))
    cfg = CycleConfig.with_faults(FaultModel("componentwise", 0.1), protect_prolongation=True)
    assert "P" not in cfg.faults and cfg.votes("P") == (1, 1)
    cfg = CycleConfig.with_faults(FaultModel("bitflip", 0.1), replicas=3, protection=(4, 3))
    assert cfg.votes("P") == (4, 3) and cfg.votes("rho") == (3, 3)


def test_vote_examples():
    W = np.array([[3.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    vals, ok = vote(W, 2)
    assert np.array_equal(vals, [0, 1, 2]) and np.array_equal(ok, [False, True, True])
    # bitwise agreement: -0.0 and 0.0 differ
    vals, ok = vote(np.array([[0.0], [-0.0]]), 2)
    assert not ok[0]
    vals, ok = vote(np.array([[1e17], [1e17]]), 2)
    assert not ok[0] and vals[0] == 0.0
    vals, ok = vote(np.array([[np.nan], [np.nan]]), 2)
    assert not ok[0]
    # 2-of-3: first value reaching two copies wins
    vals, ok = vote(np.array([[5.0], [7.0], [7.0]]), 2)
    assert ok[0] and vals[0] == 7.0


def test_replicate_detect_examples():
    y = np.array([3.0, -1.5, 2.0])
    rngs = [rng_stream(0, "rho", replica=j) for j in range(3)]
    out, counts = replicate_detect(y, FaultModel(), 3, rngs)
    assert np.array_equal(out, y) and counts == (3, 0, 0)
    out, counts = replicate_detect(y, FaultModel("componentwise", 1.0), 2, rngs)
    # both replicas zeroed agree on 0 for a nonzero truth: undetected
    assert np.array_equal(out, np.zeros(3)) and counts == (0, 0, 3)


def test_replicate_detect_disagreement_is_mitigated():
    # replica 0 clean, replica 1 fully zeroed
    class Zero:
        def __init__(self, p):
            self.p = p

    y = np.array([3.0])
    model = FaultModel("componentwise", 0.5)
    for seed in range(200):
        rngs = [rng_stream(seed, "rho", replica=j) for j in range(2)]
        out, counts = replicate_detect(y, model, 2, rngs)
        if counts[1]:
            assert out[0] == 0.0
            return
    pytest.fail("no disagreement observed")


def _empirical(fn, trials=10**6, chunk=250_000):
    tot = np.zeros(3)
    for s in range(trials // chunk):
        tot += fn(s, chunk)
    return tot / trials


@pytest.mark.parametrize("rate", [0.1, 0.3])
def test_detect_k2_undetected_rate(rate):
    model = FaultModel("componentwise", rate)
    freq = _empirical(lambda s, n: replicate_detect(
        np.ones(n), model, 2, [rng_stream(s, "rho", replica=j) for j in range(2)])[1])
    pu = rate**2
    assert abs(freq[2] - pu) <= 5 * np.sqrt(pu * (1 - pu) / 10**6)


def test_detect_many_replicas_undetected_small():
    model = FaultModel("componentwise", 0.3)
    freq = _empirical(lambda s, n: replicate_detect(
        np.ones(n), model, 8, [rng_stream(s, "R", replica=j) for j in range(8)])[1],
        trials=10**7, chunk=10**6)
    assert freq[2] < 0.3**8 * 1.1


def test_protect_prolongation():
    P = build_hierarchy(ProblemSpec(1, 1, 4)).P[0]
    e = np.array([1.0, -2.0, 0.5])
    rngs = [rng_stream(1, "P", replica=j) for j in range(4)]
    out, counts = protect_prolongation(e, P, FaultModel(), 4, 3, rngs)
    assert np.array_equal(out, P @ e) and counts == (7, 0, 0)
    # K_P = k_P = 1: plain faulty prolongation with the magnitude guard
    big = np.array([1e17, 1.0, 1.0])
    out, counts = protect_prolongation(big, P, FaultModel(), 1, 1, rngs)
    assert np.array_equal(out[:3], np.zeros(3)) and counts[1] == 3
    with pytest.raises(ValueError):
        protect_prolongation(e, P, FaultModel(), 2, 3, rngs)


def test_fast_path_zero_rate():
    idx, und = event_level_fast_path(FaultModel("componentwise", 0.0), 1000, 3, 3,
                                     rng_stream(0, "S_pre"))
    assert idx.size == 0
    with pytest.raises(ValueError):
        event_level_fast_path(FaultModel("bitflip", 0.1), 10, 2, 2, rng_stream(0, "S_pre"))


@pytest.mark.parametrize("K,k", [(1, 1), (2, 2), (3, 3), (4, 3)])
def test_fast_path_matches_literal_statistics(K, k):
    model = FaultModel("componentwise", 0.2)
    n = 200_000
    y = np.ones(n)
    cfg_fast = CycleConfig(faults={"rho": model}, replicas={"rho": K},
                           protection=None)
    cfg_lit = CycleConfig(faults={"rho": model}, replicas={"rho": K}, fast_path=False)
    if k != K:
        cfg_fast = CycleConfig(faults={"P": model}, protection=(K, k))
        cfg_lit = CycleConfig(faults={"P": model}, protection=(K, k), fast_path=False)
    site = "rho" if k == K else "P"
    c1, c2 = OutcomeCounters(), OutcomeCounters()
    fault_site(y, site, 1, cfg_fast, FaultStreams(0, 0), c1)
    fault_site(y, site, 1, cfg_lit, FaultStreams(1, 0), c2)
    f1, f2 = c1.counts[site] / n, c2.counts[site] / n
    probs = np.array(agreement_probabilities(0.2, K, k))
    if K == 1:
        probs = np.array([probs[0], probs[1] + probs[2], 0.0])
    sd = np.sqrt(probs * (1 - probs) / n) + 1e-12
    assert np.all(np.abs(f1 - probs) <= 5 * sd)
    assert np.all(np.abs(f2 - probs) <= 5 * sd)


def test_blockwise_fast_path_consistent_blocks():
    model = FaultModel("blockwise", 0.3, block_size=8)
    cfg = CycleConfig(faults={"rho": model}, replicas={"rho": 2})
    out = fault_site(np.arange(1.0, 65.0), "rho", 1, cfg, FaultStreams(3, 0))
    blocks = out.reshape(8, 8) == 0
    assert np.all(blocks.all(axis=1) | ~blocks.any(axis=1))


def test_counters_conserved():
    h = build_hierarchy(ProblemSpec(2, 3))
    for cfg in (CycleConfig.with_faults(FaultModel("componentwise", 0.2), replicas=2),
                CycleConfig.with_faults(FaultModel("bitflip", 0.2), replicas=3, protection=(4, 3)),
                CycleConfig.with_faults(FaultModel("silent", 0.2))):
        c = OutcomeCounters()
        x = np.random.default_rng(0).standard_normal(h.size(3))
        mg_cycle(3, np.zeros_like(x), x, h, cfg, FaultStreams(0, 0), c)
        # per cycle: 2 smoothing sites + rho + P on each fine visit, R on the coarser grid
        visits = {3: 1, 2: 2, 1: 4}
        assert c.total("S_pre") == sum(v * h.size(l) for l, v in visits.items())
        assert c.total("R") == sum(v * h.size(l - 1) for l, v in visits.items())
        assert all(c.counts[s].min() >= 0 for s in SITES)


def test_smooth_examples():
    h = build_hierarchy(ProblemSpec(1, 1, 2))
    cfg = CycleConfig()
    b = np.array([0.0, 1.0, 0.0])
    x = smooth(1, np.zeros(3), b, h, cfg, "S_pre", FaultStreams(0))
    assert np.allclose(x, [0, 1 / 3, 0], rtol=0, atol=1e-16)
    zero_all = CycleConfig(faults={"S_pre": FaultModel("componentwise", 1.0)})
    x0 = np.array([0.3, -0.1, 0.2])
    assert np.array_equal(smooth(1, x0, b, h, zero_all, "S_pre", FaultStreams(0)), x0)
    xs = np.linalg.solve(h.A[1].toarray(), b)
    cfg = CycleConfig(faults={"S_pre": FaultModel("componentwise", 0.5)})
    assert np.allclose(smooth(1, xs, b, h, cfg, "S_pre", FaultStreams(0)), xs, atol=1e-15)
    with pytest.raises(ValueError):
        smooth(1, np.zeros(4), b, h, cfg, "S_pre", FaultStreams(0))


def test_cycle_level0_is_coarse_solve():
    h = build_hierarchy(ProblemSpec(2, 1, 3))
    b = np.arange(h.size(0), dtype=float)
    assert np.array_equal(mg_cycle(0, b, np.zeros_like(b), h, CycleConfig(), FaultStreams(0)),
                          h.coarse_solve(b))


def test_two_grid_example_matches_matrix():
    h = build_hierarchy(ProblemSpec(1, 1, 2))
    cfg = CycleConfig(gamma=1)
    b = np.array([0.0, 1.0, 0.0])
    xs = np.linalg.solve(h.A[1].toarray(), b)
    x1 = mg_cycle(1, b, np.zeros(3), h, cfg, FaultStreams(0))
    E = assemble_iteration_matrix(h, cfg)
    assert np.allclose(x1 - xs, E @ (0 - xs), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["componentwise", "blockwise", "silent", "bitflip"])
def test_zero_rate_bitwise_equivalence(kind):
    h = build_hierarchy(ProblemSpec(2, 3))
    rng = np.random.default_rng(4)
    b = rng.standard_normal(h.size(3))
    x_ref = x = np.zeros_like(b)
    cfg = CycleConfig.with_faults(FaultModel(kind, 0.0, block_size=4), replicas=2,
                                  protection=(4, 3))
    for it in range(5):
        x = mg_cycle(3, b, x, h, cfg, FaultStreams(0, it))
        x_ref = reference_cycle(3, b, x_ref, h)
    assert x.tobytes() == x_ref.tobytes()


@pytest.mark.parametrize("dim,levels", [(1, 3), (2, 2)])
def test_exact_solution_is_fixed_without_prolongation_faults(dim, levels):
    h = build_hierarchy(ProblemSpec(dim, levels))
    n = h.size(levels)
    xs = np.random.default_rng(0).standard_normal(n)
    b = h.A[levels] @ xs
    cfg = CycleConfig.with_faults(FaultModel("componentwise", 0.3), sites=("S_pre", "S_post",
                                                                         "rho", "R"))
    x = mg_cycle(levels, b, xs, h, cfg, FaultStreams(1, 0))
    assert np.linalg.norm(x - xs) <= 1e-12 * np.linalg.norm(xs)


def test_deterministic_replay():
    h = build_hierarchy(ProblemSpec(2, 3))
    cfg = CycleConfig.with_faults(FaultModel("bitflip", 0.05), replicas=2)
    b = np.ones(h.size(3))

    def run():
        x, hist = np.zeros_like(b), []
        for it in range(5):
            x = mg_cycle(3, b, x, h, cfg, FaultStreams(9, it))
            hist.append(np.linalg.norm(b - h.A[3] @ x))
        return hist

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.9), st.integers(1, 4), st.integers(0, 1000))
def test_counters_sum_to_components(rate, K, seed):
    y = np.random.default_rng(seed).standard_normal(257)
    cfg = CycleConfig(faults={"R": FaultModel("bitflip", rate)}, replicas={"R": K})
    c = OutcomeCounters()
    out = fault_site(y, "R", 0, cfg, FaultStreams(seed), c)
    # inactive sites are bypassed entirely and record nothing
    assert c.total("R") == (y.size if rate > 0 else 0)
    assert np.all(np.isfinite(out))
