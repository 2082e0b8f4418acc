"""The fourteen acceptance criteria, one test each.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from shuffledp.accounting import (
    PrivacyBudget,
    amplify_subsampling,
    binomial_delta_exact,
    blanket_decompose,
    solve_rr_p,
)
from shuffledp.audit import (
    Brittle1,
    Brittle2,
    audit_neighbors,
    audit_robustness,
    direct_distribution,
    enumerate_transcript_distribution,
    online_wrapper_distribution,
    total_variation,
)
from shuffledp.errors import IndeterminateResult, PreconditionError
from shuffledp.histograms import (
    ParallelHistogram,
    all_repetition_collision,
    countmin_params,
    true_counts,
)
from shuffledp.model import PublicRandomness, execute
from shuffledp.sums import (
    RandomizedResponse,
    SplitMix,
    Zsum,
    polya_share_pmf,
    rr_output_distribution,
    symmetric_geometric_pmf,
)
from shuffledp.testing import (
    PCInstance,
    ProbabilitySource,
    TesterConfig,
    Verdict,
    calibrate_threshold,
    compression_success_probability,
    pc_sample_count,
    pc_solve,
    sample_size,
    uniformity_core_test,
)

#: suite constant for the histogram bound C * log(1/delta) / eps^2
HISTOGRAM_C = 20.0
#: suite constant for the randomized-response bound, a multiple of sqrt(log(1/delta)) / eps
RR_BOUND = 40.0


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@criterion(1, "shuffled randomized response accuracy")
def test_rr_accuracy(record_property):
    start = time.perf_counter()
    budget = PrivacyBudget(1.0, 1e-6)
    n = 10_000
    proto = RandomizedResponse.for_budget(n, budget)
    data = np.array([1] * 3000 + [0] * (n - 3000))
    errs = np.array([execute(proto, data, s) - 3000 for s in range(2000)])
    se = errs.std(ddof=1) / math.sqrt(errs.size)
    p95 = float(np.quantile(np.abs(errs), 0.95))
    elapsed = time.perf_counter() - start
    record_property("detail", f"p={proto.rr.p:.4f} mean={errs.mean():.2f} se={se:.2f} p95={p95:.1f} t={elapsed:.1f}s")
    assert abs(errs.mean()) <= 3 * se
    assert p95 <= RR_BOUND
    assert elapsed <= 60


@criterion(2, "shuffled randomized response robust privacy")
def test_rr_robust(record_property):
    budget = PrivacyBudget(1.0, 1e-6)
    p16 = solve_rr_p(16, budget)
    small = audit_robustness(RandomizedResponse(16, p16), 0.5, 1.0)
    # the n = 10^4 parameter, exactly audited with n / 2 participants
    p_big = solve_rr_p(10_000, budget)
    big = audit_robustness(RandomizedResponse(10_000, p_big), 0.5, 1.0, max_messages=None)
    record_property(
        "detail", f"n=16: p={p16:.3f} delta={small.delta_at_target:.2e}; n=1e4: p={p_big:.4f} delta={big.delta_at_target:.2e}"
    )
    assert small.delta_at_target <= budget.delta
    assert big.delta_at_target <= budget.delta


@criterion(3, "zsum maps all-zero input to zero")
def test_zsum_zero(record_property):
    proto = Zsum.for_budget(1000, PrivacyBudget(1.0, 1e-6))
    zeros = np.zeros(1000, dtype=np.int64)
    nonzero = sum(execute(proto, zeros, s) != 0 for s in range(100_000))
    record_property("detail", f"r={proto.zsum.r:.4f} nonzero={nonzero}/100000")
    assert nonzero == 0


@criterion(4, "histogram l_inf error does not grow with d")
def test_histogram_d_independence(record_property):
    start = time.perf_counter()
    n, budget, trials = 2000, PrivacyBudget(1.0, 1e-6), 100
    data = (np.random.default_rng(0).zipf(1.5, size=n) - 1) % 50
    p95 = {}
    # disjoint seed ranges, so the two universe sizes see independent noise
    for offset, d in enumerate((50, 500)):
        proto = ParallelHistogram.for_budget(n, d, budget)
        truth = true_counts(data, d)
        errs = [execute(proto, data, offset * 10**6 + s).linf_error(truth) for s in range(trials)]
        p95[d] = float(np.quantile(errs, 0.95))
    bound = HISTOGRAM_C * math.log(1 / budget.delta) / budget.epsilon**2
    gap = abs(p95[500] - p95[50]) / min(p95.values())
    elapsed = time.perf_counter() - start
    record_property("detail", f"p95 d=50: {p95[50]:.1f}, d=500: {p95[500]:.1f}, gap={gap:.1%}, bound={bound:.0f}, t={elapsed:.0f}s")
    assert gap < 0.25
    assert max(p95.values()) <= bound
    assert elapsed <= 300


@criterion(5, "Count-Min all-repetition collision rate")
def test_countmin_failure(record_property):
    n, d, T, seeds = 50, 1000, 3, 10_000
    hits = 0
    for s in range(seeds):
        family = countmin_params(n, d, T, PublicRandomness(s))
        data = np.random.default_rng(s).choice(d, size=n, replace=False)
        hits += all_repetition_collision(data, family)
    rate = hits / seeds
    record_property("detail", f"d_hat={family.d_hat} rate={rate:.4f}")
    assert rate <= 0.01 + 0.005


@criterion(6, "binomial mechanism exactness")
def test_binomial_exact(record_property):
    value = binomial_delta_exact(2, 0.5, math.log(2))
    eps_grid = np.linspace(0, 3, 31)
    violations = 0
    for p in (0.1, 0.25, 0.5):
        table = np.array([[binomial_delta_exact(ell, p, e) for e in eps_grid] for ell in range(1, 65)])
        violations += int(np.sum(np.diff(table, axis=0) > 1e-15) + np.sum(np.diff(table, axis=1) > 1e-15))
    record_property("detail", f"delta={value!r} violations={violations}")
    assert value == 0.25
    assert violations == 0


@criterion(7, "divisible discrete Laplace noise")
def test_divisible_noise(record_property):
    worst = 0.0
    k = np.arange(-60, 61)
    for n in (2, 3, 5):
        for alpha in (0.3, 0.5, 0.8):
            share = polya_share_pmf(alpha, n, np.arange(-400, 401))
            conv = share
            for _ in range(n - 1):
                conv = np.convolve(conv, share)
            mid = conv.size // 2
            worst = max(worst, float(np.max(np.abs(conv[mid - 60 : mid + 61] - symmetric_geometric_pmf(alpha, k)))))
    record_property("detail", f"max deviation={worst:.2e}")
    assert worst < 1e-6


@criterion(8, "split-and-mix correctness and small-instance security")
def test_splitmix(record_property):
    rng = np.random.default_rng(1)
    correct = 0
    for trial in range(10_000):
        q, m, n = int(rng.integers(2, 40)), int(rng.integers(1, 5)), int(rng.integers(1, 8))
        data = rng.integers(0, q, n)
        correct += execute(SplitMix(n, q, m), data, trial) == int(data.sum()) % q
    dists = []
    for m in (1, 2, 3):
        proto = SplitMix(2, 3, m)
        dists.append(
            total_variation(enumerate_transcript_distribution(proto, [0, 1]), enumerate_transcript_distribution(proto, [2, 2]))
        )
    record_property("detail", f"correct={correct}/10000 tv(m=1,2,3)={[round(x, 4) for x in dists]}")
    assert correct == 10_000
    assert dists[0] > dists[1] > dists[2]


@criterion(9, "brittle protocols")
def test_brittle(record_property):
    start = time.perf_counter()
    rows = []
    for n in (2, 3, 4):
        b1_full = audit_neighbors(Brittle1(n), 1.0).epsilon_star
        b1_drop = audit_robustness(Brittle1(n), (n - 1) / n, 1.0).epsilon_star
        b2_full = audit_neighbors(Brittle2(n), 1.0).delta_at_target
        b2_drop = audit_robustness(Brittle2(n), (n - 1) / n, 1.0).delta_at_target
        rows.append((n, b1_full, b1_drop, b2_full, b2_drop))
    elapsed = time.perf_counter() - start
    record_property("detail", "; ".join(f"n={r[0]}: eps*={r[1]:.2f}/{r[2]}, delta={r[3]:.3f}/{r[4]}" for r in rows))
    for _, b1_full, b1_drop, b2_full, b2_drop in rows:
        assert math.isfinite(b1_full) and b1_drop == math.inf
        assert b2_full < 1 and b2_drop == 1.0
    assert elapsed <= 30


@criterion(10, "private uniformity tester")
def test_uniformity(record_property):
    start = time.perf_counter()
    d, alpha, budget = 100, 0.3, PrivacyBudget(1.0, 1e-6)
    m = sample_size(d, alpha, budget.epsilon)
    config = TesterConfig(d, alpha, m, budget)
    config = config.with_threshold(calibrate_threshold(config, 200, seed=7))
    null = [uniformity_core_test(ProbabilitySource.uniform(d), config, 1_000 + s) for s in range(200)]
    alt = [uniformity_core_test(ProbabilitySource.perturbed(d, alpha), config, 2_000 + s) for s in range(200)]
    type1 = null.count(Verdict.NOT_UNIFORM) / 200
    type2 = alt.count(Verdict.UNIFORM) / 200
    elapsed = time.perf_counter() - start
    record_property("detail", f"m={m} threshold={config.threshold:.0f} type I={type1:.3f} type II={type2:.3f} t={elapsed:.0f}s")
    assert type1 <= 1 / 3 and type2 <= 1 / 3
    assert elapsed <= 600


@criterion(11, "domain compression success probability")
def test_compression(record_property):
    prob = compression_success_probability([1.0, 0.0, 0.0, 0.0], 2, "image")
    record_property("detail", f"success={prob} over 16 assignments")
    assert prob >= 1 / 954
    assert prob == 0.875


@criterion(12, "pointer chasing")
def test_pointer_chasing(record_property):
    budget = PrivacyBudget(1.0, 1e-3)
    count = pc_sample_count(budget)
    rates = {}
    for ell in (3, 4):
        correct = 0
        for s in range(200):
            rng = np.random.default_rng(s)
            inst = PCInstance.random(ell, rng)
            try:
                correct += pc_solve(inst.sample(count, rng), ell, budget, s) == inst.answer()
            except IndeterminateResult:
                pass
        rates[ell] = correct / 200
    record_property("detail", f"samples={count} correct l=3: {rates[3]:.3f}, l=4: {rates[4]:.3f}")
    assert rates[3] >= 2 / 3 and rates[4] >= 2 / 3
    assert pc_sample_count(budget) == count


@criterion(13, "online wrapper matches direct execution")
def test_online_wrapper(record_property):
    proto = RandomizedResponse(8, 0.5)
    U = {0: 0.5, 1: 0.5}
    tv = total_variation(online_wrapper_distribution(proto, U, U), direct_distribution(proto, U))
    record_property("detail", f"tv={tv:.1e}")
    assert tv <= 1e-12


@criterion(14, "amplification formulas")
def test_amplification(record_property):
    value = amplify_subsampling(0.4, 10_000, 0.01)
    rejected = 0
    for args in ((0.5, 10_000, 0.01), (0.0, 10_000, 0.01), (0.4, 1000, 0.01), (0.4, 10_000, 0.02), (0.4, 10_000, 0.0)):
        try:
            amplify_subsampling(*args)
        except PreconditionError:
            rejected += 1
    gamma, blanket = blanket_decompose(rr_output_distribution(0.5), (0, 1))
    record_property("detail", f"value={value:.5f} rejected={rejected}/5 gamma={gamma} blanket={blanket}")
    assert abs(value - 0.10301) <= 1e-4
    assert rejected == 5
    assert gamma == 0.5 and blanket == {0: 0.5, 1: 0.5}
