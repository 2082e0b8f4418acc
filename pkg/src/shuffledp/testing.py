"""Private uniformity testing and pointer chasing.

The uniformity tester Poissonizes the sample count, collects per-bin counts
through the opt-in histogram (whose debiased noise is symmetric and
independent across bins), and thresholds the statistic

    Z' = (d / m) * sum_j [(c_j - m / d)^2 - c_j].

The decision threshold is the 5/6 quantile of Z' under the uniform null,
estimated by simulation. Domain compression hashes [d] into d_hat groups
before testing.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from itertools import permutations, product
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .accounting import PrivacyBudget
from .errors import DomainError, FormatError, IndeterminateResult, PreconditionError, UncalibratedError
from .histograms import (
    HistogramEstimate,
    OptInHistogram,
    ParallelHistogram,
    optin_estimates,
    optin_raw,
    solve_optin_p,
    true_counts,
)
from .model import PublicRandomness, derive_seed, execute, transcript_of

DEFAULT_TEST_DELTA = 1e-6
#: factor applied to d^(3/4) / (alpha eps) + d^(1/2) / alpha^2 to get m
SAMPLE_MULTIPLE = 10.0
#: factor applied to log(1/delta) / eps^2 to get the pointer-chasing sample count
PC_SAMPLE_MULTIPLE = 60.0


class Verdict(str, enum.Enum):
    UNIFORM = "uniform"
    NOT_UNIFORM = "not-uniform"


@dataclass(frozen=True)
class TesterConfig:
    """d: universe size; alpha: TV distance to detect; m: Poisson mean sample count."""

    __test__ = False  # keep pytest from collecting this as a test class

    d: int
    alpha: float
    m: float
    budget: PrivacyBudget
    threshold: float | None = None
    reference: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.d < 2:
            raise PreconditionError(f"universe size must be >= 2, got {self.d}")
        if not 0 < self.alpha < 1:
            raise PreconditionError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.m > 0:
            raise PreconditionError(f"m must be positive, got {self.m}")
        if self.reference is not None and len(self.reference) != self.d:
            raise PreconditionError("reference distribution must have length d")

    def with_threshold(self, threshold: float) -> "TesterConfig":
        return replace(self, threshold=float(threshold))


def sample_size(d: int, alpha: float, epsilon: float, multiple: float = SAMPLE_MULTIPLE) -> int:
    """multiple * (d^(3/4) / (alpha eps) + d^(1/2) / alpha^2), rounded up."""
    return math.ceil(multiple * (d**0.75 / (alpha * epsilon) + d**0.5 / alpha**2))


# ---------------------------------------------------------------------------
# sample sources


class SampleSource(Protocol):
    d: int

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class ProbabilitySource:
    """iid draws from an explicit probability vector over [d]."""

    probs: tuple[float, ...]

    def __init__(self, probs: Sequence[float]):
        arr = np.asarray(probs, dtype=float)
        if arr.ndim != 1 or arr.size < 1 or arr.min() < 0 or not math.isclose(arr.sum(), 1.0, abs_tol=1e-9):
            raise PreconditionError("probabilities must be a nonnegative vector summing to 1")
        object.__setattr__(self, "probs", tuple(float(p) for p in arr / arr.sum()))

    @property
    def d(self) -> int:
        return len(self.probs)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.d, size=int(count), p=np.asarray(self.probs))

    @classmethod
    def uniform(cls, d: int) -> "ProbabilitySource":
        return cls(np.full(d, 1.0 / d))

    @classmethod
    def point_mass(cls, d: int, at: int = 0) -> "ProbabilitySource":
        probs = np.zeros(d)
        probs[at] = 1.0
        return cls(probs)

    @classmethod
    def perturbed(cls, d: int, distance: float) -> "ProbabilitySource":
        """Half the bins at (1 + 2 distance) / d, half at (1 - 2 distance) / d; TV = distance."""
        if d % 2 or not 0 <= distance <= 0.5:
            raise PreconditionError("perturbed source needs even d and distance in [0, 1/2]")
        probs = np.full(d, 1.0 / d)
        probs[: d // 2] *= 1 + 2 * distance
        probs[d // 2 :] *= 1 - 2 * distance
        return cls(probs)


@dataclass(frozen=True)
class FileSource:
    """Samples read in order from a whitespace-separated file of integers in [0, d)."""

    values: tuple[int, ...]
    d: int

    @classmethod
    def from_path(cls, path: str | Path, d: int) -> "FileSource":
        tokens = Path(path).read_text().split()
        try:
            vals = np.array([int(tok) for tok in tokens], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"sample file holds a non-integer token: {exc}") from None
        if vals.size and (vals.min() < 0 or vals.max() >= d):
            raise DomainError(f"sample file has values outside [0, {d})")
        return cls(tuple(int(v) for v in vals), int(d))

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count > len(self.values):
            raise PreconditionError(f"need {count} samples, file holds {len(self.values)}")
        return np.asarray(self.values[:count], dtype=np.int64)


# ---------------------------------------------------------------------------
# statistic and noisy counts


def poissonize(m: float, rng: np.random.Generator) -> int:
    if not m > 0:
        raise PreconditionError(f"Poisson mean must be positive, got {m}")
    return int(rng.poisson(m))


def z_statistic(counts, m: float, d: int, reference: Sequence[float] | None = None) -> float:
    """(d / m) sum_j [(c_j - m / d)^2 - c_j], or its identity-testing form.

    With a ``reference`` distribution q the terms become
    [(c_j - m q_j)^2 - c_j] / (m q_j) over bins with q_j > 0.
    """
    if d < 2 or not m > 0:
        raise PreconditionError("need d >= 2 and m > 0")
    c = np.asarray(counts, dtype=float)
    if c.size != d:
        raise PreconditionError(f"expected {d} counts, got {c.size}")
    if reference is None:
        return float(d / m * np.sum((c - m / d) ** 2 - c))
    q = np.asarray(reference, dtype=float)
    live = q > 0
    lam = m * q[live]
    return float(np.sum(((c[live] - lam) ** 2 - c[live]) / lam))


@dataclass(frozen=True)
class NoiseTrace:
    """Debiased per-bin noise and the number of opted-in users."""

    noise: np.ndarray
    opted_in: int
    p_opt: float


def noisy_counts(
    samples, d: int, budget: PrivacyBudget, seed: int, p_opt: float | None = None
) -> tuple[HistogramEstimate, NoiseTrace]:
    """Untruncated opt-in histogram of ``samples``: true counts plus Bin(|H|, 1/2) - |H|/2 noise."""
    samples = np.asarray(samples, dtype=np.int64)
    truth = true_counts(samples, d)
    n = samples.size
    if n == 0:
        return HistogramEstimate(np.zeros(d)), NoiseTrace(np.zeros(d), 0, 0.0)
    if p_opt is None:
        p_opt = solve_optin_p(n, d, budget).p_opt if budget.epsilon > 0 else 0.0
    raw, opted = optin_raw(transcript_of(OptInHistogram(n, d, p_opt), samples, seed), d)
    est = optin_estimates(raw, opted, truncate=False)
    return HistogramEstimate(est), NoiseTrace(est - truth, opted, p_opt)


def _run_core(source: SampleSource, config: TesterConfig, seed: int) -> float:
    rng = np.random.default_rng(derive_seed(seed, "samples"))
    count = poissonize(config.m, rng)
    samples = source.sample(count, rng)
    est, _ = noisy_counts(samples, config.d, config.budget, derive_seed(seed, "histogram"))
    return z_statistic(est.values, config.m, config.d, config.reference)


def uniformity_core_test(source: SampleSource, config: TesterConfig, seed: int) -> Verdict:
    """NOT_UNIFORM iff Z' exceeds the calibrated threshold."""
    if config.threshold is None:
        raise UncalibratedError("run calibrate_threshold before testing")
    z = _run_core(source, config, seed)
    return Verdict.NOT_UNIFORM if z > config.threshold else Verdict.UNIFORM


def null_source(config: TesterConfig) -> ProbabilitySource:
    if config.reference is None:
        return ProbabilitySource.uniform(config.d)
    return ProbabilitySource(config.reference)


def calibrate_threshold(config: TesterConfig, trials: int = 200, seed: int = 0, quantile: float = 5 / 6) -> float:
    """Empirical ``quantile`` of Z' under the null at the configured m and budget."""
    if trials < 200:
        raise PreconditionError(f"calibration needs at least 200 trials, got {trials}")
    null = null_source(config)
    stats = [_run_core(null, config, derive_seed(seed, "calibrate", i)) for i in range(trials)]
    return float(np.quantile(stats, quantile))


# ---------------------------------------------------------------------------
# domain compression


@dataclass(frozen=True)
class PartitionMap:
    """assignment[j] is the group of element j."""

    assignment: tuple[int, ...]
    d_hat: int

    def __post_init__(self) -> None:
        if any(not 0 <= g < self.d_hat for g in self.assignment):
            raise PreconditionError("group index outside [0, d_hat)")

    @property
    def d(self) -> int:
        return len(self.assignment)

    def compress(self, samples) -> np.ndarray:
        return np.asarray(self.assignment, dtype=np.int64)[np.asarray(samples, dtype=np.int64)]

    def compress_distribution(self, probs) -> np.ndarray:
        return np.bincount(np.asarray(self.assignment), weights=np.asarray(probs, dtype=float), minlength=self.d_hat)

    @classmethod
    def identity(cls, d: int) -> "PartitionMap":
        return cls(tuple(range(d)), d)


def random_partition(d: int, d_hat: int, public: PublicRandomness) -> PartitionMap:
    """Each element of [d] goes to a uniformly random group, independently."""
    if not 2 <= d_hat < d:
        raise PreconditionError(f"need 2 <= d_hat < d, got d_hat={d_hat}, d={d}")
    groups = public.rng("partition").integers(0, d_hat, size=d)
    return PartitionMap(tuple(int(g) for g in groups), int(d_hat))


def default_compressed_size(d: int, alpha: float) -> int:
    return math.ceil(min(d, max(2, d ** (2 / 3) * alpha ** (2 / 3))))


def compressed_distance(d: int, d_hat: int, alpha: float) -> float:
    """alpha_hat = alpha sqrt(d_hat) / (477 sqrt(10 d))."""
    return alpha * math.sqrt(d_hat) / (477 * math.sqrt(10 * d))


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def compression_success_probability(probs, d_hat: int, reference: str = "image") -> float:
    """Fraction of all d_hat^d assignments with TV(D_G, U') >= TV(D, U) sqrt(d_hat) / (477 sqrt(10 d)).

    ``reference="image"`` compares against U_G, the image of the uniform
    distribution under the same assignment; ``reference="uniform"`` compares
    against the uniform distribution on [d_hat].
    """
    probs = np.asarray(probs, dtype=float)
    d = probs.size
    uniform = np.full(d, 1.0 / d)
    bound = tv_distance(probs, uniform) * math.sqrt(d_hat) / (477 * math.sqrt(10 * d))
    hits = 0
    total = 0
    for assignment in product(range(d_hat), repeat=d):
        g = PartitionMap(assignment, d_hat)
        ref = g.compress_distribution(uniform) if reference == "image" else np.full(d_hat, 1.0 / d_hat)
        hits += tv_distance(g.compress_distribution(probs), ref) >= bound
        total += 1
    return hits / total


@dataclass(frozen=True)
class _CompressedSource:
    inner: SampleSource
    partition: PartitionMap

    @property
    def d(self) -> int:
        return self.partition.d_hat

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.partition.compress(self.inner.sample(count, rng))


def uniformity_full_test(
    source: SampleSource,
    d: int,
    alpha: float,
    budget: PrivacyBudget,
    seed: int,
    d_hat: int | None = None,
    m: float | None = None,
    calibration_trials: int = 200,
) -> Verdict:
    """Compress [d] with a public random partition, then run the core test on [d_hat].

    The compressed null is U_G, the image of the uniform distribution, and
    the threshold is calibrated against it. With ``d_hat == d`` the
    partition is the identity and this is the core test.
    """
    d_hat = default_compressed_size(d, alpha) if d_hat is None else int(d_hat)
    if m is None:
        m = sample_size(d, alpha, budget.epsilon)
    public = PublicRandomness(derive_seed(seed, "public"))
    if d_hat >= d:
        partition = PartitionMap.identity(d)
        reference = None
        alpha_hat = alpha
    else:
        partition = random_partition(d, d_hat, public)
        reference = tuple(partition.compress_distribution(np.full(d, 1.0 / d)))
        alpha_hat = compressed_distance(d, d_hat, alpha)
    config = TesterConfig(partition.d_hat, alpha_hat, m, budget, reference=reference)
    threshold = calibrate_threshold(config, calibration_trials, derive_seed(seed, "calibration"))
    return uniformity_core_test(_CompressedSource(source, partition), config.with_threshold(threshold), seed)


# ---------------------------------------------------------------------------
# pointer chasing


@dataclass(frozen=True)
class PCInstance:
    """Two permutations of 1..ell, written as tuples."""

    a: tuple[int, ...]
    b: tuple[int, ...]

    def __post_init__(self) -> None:
        ell = len(self.a)
        for perm in (self.a, self.b):
            if len(perm) != ell or sorted(perm) != list(range(1, ell + 1)):
                raise PreconditionError("a and b must be permutations of 1..ell of equal length")

    @property
    def ell(self) -> int:
        return len(self.a)

    def elements(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        return ((1, self.a), (2, self.b))

    def answer(self) -> int:
        """b_{a_1}: the second pointer in the chase."""
        return self.b[self.a[0] - 1]

    def sample(self, count: int, rng: np.random.Generator) -> list[tuple[int, tuple[int, ...]]]:
        picks = rng.integers(0, 2, size=count)
        elems = self.elements()
        return [elems[int(i)] for i in picks]

    @classmethod
    def random(cls, ell: int, rng: np.random.Generator) -> "PCInstance":
        a = tuple(int(v) + 1 for v in rng.permutation(ell))
        b = tuple(int(v) + 1 for v in rng.permutation(ell))
        return cls(a, b)


def _perm_index(ell: int) -> dict[tuple[int, ...], int]:
    return {p: i for i, p in enumerate(permutations(range(1, ell + 1)))}


def pc_universe_size(ell: int) -> int:
    return 2 * math.factorial(ell)


def pc_encode(element: tuple[int, tuple[int, ...]], ell: int) -> int:
    """Index of (tag, permutation) in {1, 2} x permutations(ell), size 2 * ell!."""
    tag, perm = element
    if tag not in (1, 2):
        raise DomainError(f"pointer-chasing tag must be 1 or 2, got {tag}")
    index = _perm_index(ell).get(tuple(perm))
    if index is None:
        raise DomainError(f"{perm} is not a permutation of 1..{ell}")
    return (tag - 1) * math.factorial(ell) + index


def pc_decode(index: int, ell: int) -> tuple[int, tuple[int, ...]]:
    f = math.factorial(ell)
    tag, rest = divmod(int(index), f)
    return tag + 1, list(permutations(range(1, ell + 1)))[rest]


def pc_sample_count(budget: PrivacyBudget, multiple: float = PC_SAMPLE_MULTIPLE) -> int:
    """multiple * log(1/delta) / eps^2; does not depend on ell."""
    return math.ceil(multiple * math.log(1 / budget.delta) / budget.epsilon**2)


def pc_solve(samples: Sequence[tuple[int, tuple[int, ...]]], ell: int, budget: PrivacyBudget, seed: int) -> int:
    """Histogram the encoded samples with zsum bins and chase a_1 -> b_{a_1}.

    Bins with no samples are estimated as exactly 0, so any nonzero bin is a
    genuine instance element.
    """
    rows = np.array([pc_encode(s, ell) for s in samples], dtype=np.int64)
    if rows.size == 0:
        raise IndeterminateResult("no samples")
    d = pc_universe_size(ell)
    est = execute(ParallelHistogram.for_budget(rows.size, d, budget), rows, seed).values
    half = d // 2
    found = {}
    for tag, block in ((1, est[:half]), (2, est[half:])):
        nonzero = np.flatnonzero(block > 0)
        if nonzero.size == 0:
            raise IndeterminateResult(f"no element with tag {tag} survived the noise")
        found[tag] = pc_decode(tag_offset(tag, ell) + int(nonzero[np.argmax(block[nonzero])]), ell)[1]
    a, b = found[1], found[2]
    return int(b[a[0] - 1])


def tag_offset(tag: int, ell: int) -> int:
    return (tag - 1) * math.factorial(ell)
