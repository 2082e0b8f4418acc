import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shuffledp.accounting import PrivacyBudget, binomial_delta_exact, min_noise_trials
from shuffledp.errors import DomainError, FormatError, PreconditionError
from shuffledp.histograms import (
    CountMin,
    ExactHistogram,
    HashFamily,
    OptInHistogram,
    OptInParams,
    ParallelHistogram,
    all_repetition_collision,
    bin_totals,
    compressed_size,
    countmin_analyze,
    countmin_params,
    optin_estimates,
    optin_randomize,
    optin_raw,
    parallel_hist_analyze,
    parallel_hist_randomize,
    solve_optin_p,
    true_counts,
)
from shuffledp.model import PublicRandomness, Transcript, derive_seed, execute, transcript_of
from shuffledp.sums import ZsumParams
from scipy import stats


class TestParallel:
    def test_single_bin_is_zsum(self, rng):
        params = ZsumParams(0.0, 3)
        assert parallel_hist_randomize(0, 1, params, rng) == ((0, 1), (0, 0))

    def test_message_count(self, rng):
        for d in (1, 4, 9):
            assert len(parallel_hist_randomize(0, d, ZsumParams(0.7, 5), rng)) == 2 * d

    def test_bin_marginals(self):
        proto = ParallelHistogram(1, 3, 0.6)
        rng = np.random.default_rng(0)
        rows = np.full(100_000, 1)
        msgs, _ = proto.randomize_batch(rows, rng.random((rows.size, 3)), None)
        bits = msgs[:, 1].reshape(rows.size, 3, 2).sum(axis=2)
        assert abs(bits[:, 1].mean() - 1.6) < 0.01
        assert abs(bits[:, 0].mean() - 0.6) < 0.01 and abs(bits[:, 2].mean() - 0.6) < 0.01

    def test_empty_bins_zero(self):
        proto = ParallelHistogram.for_budget(2000, 50, PrivacyBudget(1.0, 1e-6))
        data = np.random.default_rng(0).integers(0, 10, 2000)
        for s in range(30):
            est = execute(proto, data, s)
            assert np.all(est.values[10:] == 0)

    def test_all_in_one_bin(self):
        # r = 0: every bin total is at most n, so every estimate truncates to 0
        assert list(execute(ParallelHistogram(7, 4, 0.0), [2] * 7, 0).values) == [0, 0, 0, 0]
        # r = 1: the full bin totals 2n and decodes to n, the rest total n
        assert list(execute(ParallelHistogram(7, 4, 1.0), [2] * 7, 0).values) == [0, 0, 7, 0]

    def test_bad_labels(self):
        with pytest.raises(FormatError):
            bin_totals(Transcript([(5, 1)]), 3)
        with pytest.raises(DomainError):
            parallel_hist_randomize(3, 3, ZsumParams(0.5, 2), np.random.default_rng(0))

    def test_bundle_law_sums_to_one(self):
        for x in range(3):
            law = ParallelHistogram(4, 3, 0.7).bundle_distribution(x)
            assert sum(law.values()) == pytest.approx(1.0)


class TestOptIn:
    def test_never_opt(self, rng):
        assert optin_randomize(2, OptInParams(4, 0.0, 5), rng) == ((0, 2), (1, 0))

    def test_always_opt_noise_law(self):
        rng = np.random.default_rng(1)
        counts = [sum(1 for m in optin_randomize(0, OptInParams(6, 1.0, 5), rng) if m[0] == 2) for _ in range(20_000)]
        observed = np.bincount(counts, minlength=7)
        expected = stats.binom.pmf(np.arange(7), 6, 0.5) * len(counts)
        assert stats.chisquare(observed, expected).pvalue > 1e-4

    def test_raw_counts(self):
        t = Transcript([(0, 1), (0, 1), (1, 1), (1, 1), (1, 0), (2, 1), (2, 1), (2, 1)])
        raw, opted = optin_raw(t, 3)
        assert list(raw) == [0, 5, 0] and opted == 2
        assert list(optin_estimates(raw, opted)) == [0, 4, 0]
        assert list(optin_estimates(raw, opted, truncate=False)) == [-1, 4, -1]

    def test_zero_bins_exact(self):
        proto = OptInHistogram.for_budget(2000, 40, PrivacyBudget(1.0, 1e-6))
        data = np.zeros(2000, dtype=np.int64)
        for s in range(20):
            est = execute(proto, data, s)
            assert np.all(est.values[1:] == 0)

    def test_solved_p_certified(self):
        budget = PrivacyBudget(1.0, 1e-6)
        p = solve_optin_p(10_000, 100, budget).p_opt
        need = min_noise_trials(0.5, 0.25e-6)
        assert 0 < p < 1
        assert stats.binom.cdf(need - 1, 5000, p) <= 0.5e-6
        assert binomial_delta_exact(need, 0.5, 0.5) <= 0.25e-6

    def test_unbiased_untruncated(self):
        proto = OptInHistogram(500, 5, 0.3, truncate=False)
        data = np.random.default_rng(0).integers(0, 5, 500)
        errs = np.array([execute(proto, data, s).values - true_counts(data, 5) for s in range(500)])
        # |H| counts all opted users, so the noise is centred exactly
        assert np.all(np.abs(errs.mean(axis=0)) < 4 * errs.std(axis=0) / math.sqrt(500))


class TestCountMin:
    def test_compressed_size(self):
        assert compressed_size(10, 4, 2) == 200
        assert compressed_size(10, 4, 1) == 4000
        assert compressed_size(50, 1000, 3) == math.ceil(50 * 100000 ** (1 / 3))

    def test_collision_rate(self):
        d_hat, hits = 50, 0
        trials = 20_000
        for s in range(trials):
            h = HashFamily(1, d_hat, 2, s).table()[0]
            hits += h[0] == h[1]
        assert hits / trials <= 1 / d_hat + 0.005

    def test_hash_reproducible(self):
        pub = PublicRandomness(5)
        a = countmin_params(10, 30, 2, pub).table()
        b = countmin_params(10, 30, 2, pub).table()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, countmin_params(10, 30, 2, PublicRandomness(6)).table())

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.integers(0, 10**6))
    def test_one_sided_error(self, data, seed):
        n, d = len(data), 6
        proto = CountMin(n, d, 2, ExactHistogram(n, 3), d_hat=3)
        est = execute(proto, data, seed)
        assert np.all(est.values >= true_counts(data, d))

    def test_min_over_repetitions(self):
        family = HashFamily(2, 2, 2, 0)
        table = family.table()
        inner = ExactHistogram(8, 2)
        # repetition 0 reports 5 in every bucket, repetition 1 reports 3
        msgs = [(0, b) for b in (0, 0, 0, 0, 0, 1, 1, 1, 1, 1)] + [(1, b) for b in (0, 0, 0, 1, 1, 1)]
        est = countmin_analyze(Transcript(msgs), family, inner)
        assert list(est.values) == [3, 3]
        assert table.shape == (2, 2)

    def test_single_repetition_is_inner(self):
        n, d = 30, 8
        data = np.random.default_rng(2).integers(0, d, n)
        proto = CountMin(n, d, 1, ExactHistogram(n, 16), d_hat=16)
        for s in range(20):
            est = execute(proto, data, s)
            family = proto.family(PublicRandomness(derive_seed(s, "public")))
            buckets = np.bincount(family.table()[0][data], minlength=16)
            assert np.array_equal(est.values, buckets[family.table()[0]])

    def test_neighbour_moves_two_bins(self):
        n, d = 20, 10
        data = np.random.default_rng(3).integers(0, d, n)
        alt = data.copy()
        alt[0] = (alt[0] + 1) % d
        proto = CountMin(n, d, 3, ExactHistogram(n, 7), d_hat=7)
        t1 = transcript_of(proto, data, 4)
        t2 = transcript_of(proto, alt, 4)
        for rep in range(3):
            a = bin_totals_exact(t1.select(rep), 7)
            b = bin_totals_exact(t2.select(rep), 7)
            assert np.abs(a - b).sum() <= 2

    def test_collision_detector(self):
        family = HashFamily(1, 2, 3, 0)
        table = family.table()[0]
        want = table[0] == table[1] or table[0] == table[2] or table[1] == table[2]
        assert all_repetition_collision([0, 1, 2], family) == want
        assert not all_repetition_collision([0], HashFamily(1, 2, 1, 0))

    def test_inner_size_checked(self):
        with pytest.raises(PreconditionError):
            CountMin(10, 50, 2, ExactHistogram(10, 3), d_hat=4)


def bin_totals_exact(t: Transcript, size: int) -> np.ndarray:
    if len(t) == 0:
        return np.zeros(size, dtype=np.int64)
    return np.bincount(t.column(0), minlength=size)
