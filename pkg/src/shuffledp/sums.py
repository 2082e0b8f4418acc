"""Binary sums and bounded-value sums in the shuffle model.

* randomized response: one bit per user, replaced by a fair coin with
  probability p;
* zsum: two bits per user (x, Ber(r)); an all-zero input is estimated as
  exactly 0;
* split-and-mix: additive shares modulo q, the secure-aggregation building
  block;
* bounded sums: fixed-point rounding plus infinitely divisible discrete
  Laplace noise, aggregated with split-and-mix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Sequence

import numpy as np
from scipy import stats

from .accounting import (
    DEFAULT_CONFIG,
    AccountantConfig,
    PrivacyBudget,
    binomial_delta_exact,
    solve_rr_p,
)
from .errors import DomainError, PreconditionError
from .model import MessageBundle, PublicRandomness, ShuffleProtocol, Transcript, check_universe

# ---------------------------------------------------------------------------
# randomized response


@dataclass(frozen=True)
class RRParams:
    p: float
    n: int

    def __post_init__(self) -> None:
        if not 0 <= self.p <= 1:
            raise PreconditionError(f"p must lie in [0, 1], got {self.p}")


def _rr_bits(x: np.ndarray, u: np.ndarray, p: float) -> np.ndarray:
    noisy = u[:, 0] < p
    coin = (u[:, 1] < 0.5).astype(np.int64)
    return np.where(noisy, coin, x)


def rr_randomize(x: int, params: RRParams, rng: np.random.Generator) -> MessageBundle:
    """With probability p send a fair coin, otherwise send x."""
    if x not in (0, 1):
        raise DomainError(f"randomized response takes a bit, got {x!r}")
    bit = _rr_bits(np.array([x]), rng.random((1, 2)), params.p)[0]
    return ((int(bit),),)


def rr_estimate(bit_sum: float, n: int, p: float) -> float:
    if p >= 1:
        raise PreconditionError("estimator undefined when p = 1 (every message is noise)")
    return (bit_sum - n * p / 2) / (1 - p)


def rr_analyze(t: Transcript, params: RRParams) -> float:
    """Unbiased sum estimate (sum(y) - n p / 2) / (1 - p)."""
    return rr_estimate(float(t.entries.sum()), params.n, params.p)


def rr_output_distribution(p: float):
    """Message distribution of the randomizer, as a function of the input bit."""

    def dist(x: int) -> dict[int, float]:
        one = p / 2 + (1 - p) * x
        return {0: 1 - one, 1: one}

    return dist


class RandomizedResponse(ShuffleProtocol):
    """Shuffled randomized response for binary sums."""

    name = "rr"
    arity = 1
    fixed_length = 1

    def __init__(self, n: int, p: float):
        super().__init__(n)
        self.rr = RRParams(float(p), self.n)

    @classmethod
    def for_budget(cls, n: int, budget: PrivacyBudget) -> "RandomizedResponse":
        return cls(n, solve_rr_p(n, budget))

    @property
    def p(self) -> float:
        return self.rr.p

    @property
    def draws(self) -> int:
        return 2

    def encode(self, dataset):
        return check_universe(dataset, 2, "bit")

    def randomize_batch(self, rows, u, public):
        bits = _rr_bits(rows, u, self.p)
        return bits.reshape(-1, 1), np.arange(len(rows))

    def analyze(self, transcript, public=None):
        return rr_analyze(transcript, self.rr)

    def alphabet(self):
        return [(0,), (1,)]

    def bundle_distribution(self, x):
        one = self.p / 2 + (1 - self.p) * int(x)
        return {(1, 0): 1 - one, (0, 1): one}

    def params(self):
        return {"p": self.p}


# ---------------------------------------------------------------------------
# zsum


@dataclass(frozen=True)
class ZsumParams:
    r: float
    n: int
    small_n_fallback: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.r <= 1:
            raise PreconditionError(f"r must lie in [0, 1], got {self.r}")


def _zsum_bits(x: np.ndarray, u: np.ndarray, params: ZsumParams) -> tuple[np.ndarray, np.ndarray]:
    if params.small_n_fallback:
        zeros = np.zeros(len(x), dtype=np.int64)
        return zeros, zeros
    return np.asarray(x, dtype=np.int64), (u < params.r).astype(np.int64)


def zsum_randomize(x: int, params: ZsumParams, rng: np.random.Generator) -> MessageBundle:
    """Send (x, Ber(r)), or (0, 0) when the small-n fallback is active."""
    if x not in (0, 1):
        raise DomainError(f"zsum takes a bit, got {x!r}")
    a, b = _zsum_bits(np.array([x]), rng.random(1), params)
    return ((int(a[0]),), (int(b[0]),))


def zsum_estimate(total, n: int, r: float):
    """0 when the bit total is at most n, else total - n r rounded, floored at 0.

    Works elementwise on arrays of totals.
    """
    total = np.asarray(total)
    est = np.maximum(np.rint(total - n * r), 0).astype(np.int64)
    est = np.where(total <= n, 0, est)
    return int(est) if est.ndim == 0 else est


def zsum_analyze(t: Transcript, params: ZsumParams) -> int:
    return zsum_estimate(int(t.entries.sum()), params.n, params.r)


@lru_cache(maxsize=1024)
def _solve_zsum_r(n: int, epsilon: float, delta: float, kappa: float) -> ZsumParams:
    r = 1 - kappa / (epsilon**2 * n) * math.log(1 / delta)
    half = n // 2
    if not 0.5 < r < 1 or half == 0:
        return ZsumParams(max(r, 0.0), n, small_n_fallback=True)
    if binomial_delta_exact(half, r, epsilon) <= delta:
        return ZsumParams(r, n)
    # the formula only holds up to a constant in epsilon; pull r towards 1/2
    # until the exact accountant certifies the half-population noise
    if binomial_delta_exact(half, 0.5, epsilon) > delta:
        return ZsumParams(r, n, small_n_fallback=True)
    lo, hi = 0.5, r  # lo passes, hi fails
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        if binomial_delta_exact(half, mid, epsilon) <= delta:
            lo = mid
        else:
            hi = mid
    return ZsumParams(lo, n)


def solve_zsum_r(n: int, budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG) -> ZsumParams:
    """Noise-bit bias for zsum.

    Starts from r = 1 - kappa / (eps^2 n) log(1/delta). If that is not in
    (1/2, 1) the small-n fallback is switched on. Otherwise r is lowered, if
    needed, to the largest value at which Bin(n // 2, r) noise passes the
    exact binomial accountant at ``budget``.
    """
    if budget.delta <= 0 or budget.epsilon <= 0:
        raise PreconditionError("zsum needs epsilon > 0 and delta > 0")
    return _solve_zsum_r(int(n), float(budget.epsilon), float(budget.delta), float(config.kappa))


class Zsum(ShuffleProtocol):
    """Two-message binary sum whose estimate is exactly 0 on all-zero input."""

    name = "zsum"
    arity = 1
    fixed_length = 2

    def __init__(self, n: int, r: float, small_n_fallback: bool = False):
        super().__init__(n)
        self.zsum = ZsumParams(float(r), self.n, small_n_fallback)

    @classmethod
    def for_budget(cls, n: int, budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG) -> "Zsum":
        zp = solve_zsum_r(n, budget, config)
        return cls(n, zp.r, zp.small_n_fallback)

    def encode(self, dataset):
        return check_universe(dataset, 2, "bit")

    def randomize_batch(self, rows, u, public):
        a, b = _zsum_bits(rows, u[:, 0], self.zsum)
        messages = np.stack([a, b], axis=1).reshape(-1, 1)
        return messages, np.repeat(np.arange(len(rows)), 2)

    def analyze(self, transcript, public=None):
        return zsum_analyze(transcript, self.zsum)

    def alphabet(self):
        return [(0,), (1,)]

    def bundle_distribution(self, x):
        if self.zsum.small_n_fallback:
            return {(2, 0): 1.0}
        r, x = self.zsum.r, int(x)
        dist: dict[tuple[int, int], float] = {}
        for b, pb in ((0, 1 - r), (1, r)):
            ones = x + b
            key = (2 - ones, ones)
            dist[key] = dist.get(key, 0.0) + pb
        return {k: v for k, v in dist.items() if v > 0}

    def params(self):
        return {"r": self.zsum.r, "small_n_fallback": self.zsum.small_n_fallback}


# ---------------------------------------------------------------------------
# split-and-mix secure aggregation


@dataclass(frozen=True)
class SplitMixParams:
    """q: modulus; m: shares per user; scale: fixed-point steps per unit;
    alpha: per-step decay of the discrete Laplace noise (0 disables noise)."""

    q: int
    m: int
    scale: int = 1
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.q < 1 or self.m < 1 or self.scale < 1:
            raise PreconditionError("need q >= 1, m >= 1, scale >= 1")
        if not 0 <= self.alpha < 1:
            raise PreconditionError(f"alpha must lie in [0, 1), got {self.alpha}")


def _split(values: np.ndarray, u: np.ndarray, q: int, m: int) -> np.ndarray:
    """Rows of m shares, uniform among those summing to each value mod q."""
    free = np.minimum((u[:, : m - 1] * q).astype(np.int64), q - 1)
    last = np.mod(values - free.sum(axis=1), q)
    return np.concatenate([free, last[:, None]], axis=1)


def splitmix_encode(v: int, params: SplitMixParams, rng: np.random.Generator) -> MessageBundle:
    if not 0 <= v < params.q:
        raise DomainError(f"value {v} is not a residue mod {params.q}")
    shares = _split(np.array([v]), rng.random((1, max(params.m - 1, 0))), params.q, params.m)[0]
    return tuple((int(s),) for s in shares)


def splitmix_decode(t: Transcript, q: int) -> int:
    """Sum of all shares mod q."""
    if len(t) == 0:
        return 0
    return int(np.mod(t.entries[:, 0], q).sum() % q)


class SplitMix(ShuffleProtocol):
    """Secure aggregation of residues mod q through the shuffler."""

    name = "splitmix"
    arity = 1

    def __init__(self, n: int, q: int, m: int):
        super().__init__(n)
        self.split = SplitMixParams(int(q), int(m))
        self.fixed_length = self.split.m

    @property
    def draws(self) -> int:
        return self.split.m - 1

    def encode(self, dataset):
        return check_universe(dataset, self.split.q, "residue")

    def randomize_batch(self, rows, u, public):
        shares = _split(rows, u, self.split.q, self.split.m)
        return shares.reshape(-1, 1), np.repeat(np.arange(len(rows)), self.split.m)

    def analyze(self, transcript, public=None):
        return splitmix_decode(transcript, self.split.q)

    def alphabet(self):
        return [(s,) for s in range(self.split.q)]

    def bundle_distribution(self, x):
        q, m = self.split.q, self.split.m
        dist: dict[tuple[int, ...], float] = {}
        weight = 1.0 / q ** (m - 1)
        for free in product(range(q), repeat=m - 1):
            shares = list(free) + [(int(x) - sum(free)) % q]
            key = tuple(shares.count(s) for s in range(q))
            dist[key] = dist.get(key, 0.0) + weight
        return dist

    def params(self):
        return {"q": self.split.q, "m": self.split.m}


# ---------------------------------------------------------------------------
# infinitely divisible discrete Laplace noise


def polya_share_pmf(alpha: float, n: int, support: np.ndarray) -> np.ndarray:
    """PMF of X - Y with X, Y iid negative binomial (shape 1/n, P[k] ~ alpha^k).

    n independent copies sum to the two-sided geometric law P[k] ~ alpha^|k|.
    """
    support = np.asarray(support, dtype=np.int64)
    reach = int(np.abs(support).max(initial=0))
    # one-sided NB pmf out far enough that the neglected tail is below 1e-18
    tail = reach + int(math.ceil(math.log(1e-18) / math.log(alpha))) + 1
    k = np.arange(tail + 1)
    nb = stats.nbinom.pmf(k, 1.0 / n, 1.0 - alpha)
    # P[X - Y = s] = sum_j nb[j + s] nb[j] for s >= 0, symmetric in s
    out = np.empty(support.shape, dtype=float)
    for idx, s in np.ndenumerate(np.abs(support)):
        out[idx] = float(np.dot(nb[s:], nb[: nb.size - s]))
    return out


def _polya_from_uniforms(u: np.ndarray, alpha: float, n: int) -> np.ndarray:
    """Inverse-CDF sampling of X - Y via the Gamma-Poisson mixture; u has 4 columns."""
    shape, scale = 1.0 / n, alpha / (1.0 - alpha)
    lam_x = stats.gamma.ppf(u[:, 0], shape, scale=scale)
    lam_y = stats.gamma.ppf(u[:, 1], shape, scale=scale)
    x = stats.poisson.ppf(u[:, 2], lam_x)
    y = stats.poisson.ppf(u[:, 3], lam_y)
    # poisson.ppf(u, 0) is 0 except at u == 0 where it is -1
    return (np.maximum(x, 0) - np.maximum(y, 0)).astype(np.int64)


def polya_divisible_sample(alpha: float, n: int, rng: np.random.Generator, size: int | None = None):
    """One user's share of discrete Laplace noise with decay ``alpha``.

    Summing ``n`` independent shares gives P[k] proportional to alpha^|k|.
    """
    if not 0 < alpha < 1:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    count = 1 if size is None else int(size)
    draws = _polya_from_uniforms(rng.random((count, 4)), alpha, n)
    return int(draws[0]) if size is None else draws


def symmetric_geometric_pmf(alpha: float, support: np.ndarray) -> np.ndarray:
    support = np.asarray(support)
    return (1 - alpha) / (1 + alpha) * alpha ** np.abs(support)


# ---------------------------------------------------------------------------
# bounded-value sums


def default_scale(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def default_modulus(n: int, scale: int) -> int:
    """Smallest power of two strictly above 4 n scale."""
    return 1 << (4 * n * scale).bit_length()


def default_message_count(n: int, delta: float) -> int:
    """1 + ceil(log(1/delta) / log(n)) shares per user."""
    if n < 2 or delta <= 0:
        return 2
    return 1 + math.ceil(math.log(1 / delta) / math.log(n))


def solve_bounded_sum_params(
    n: int, budget: PrivacyBudget, m: int | None = None, scale: int | None = None
) -> SplitMixParams:
    """Parameters for an eps-DP (up to the aggregation's delta) bounded sum.

    Rounded inputs move the integer sum by at most ``scale``, so the noise
    decay per fixed-point step is exp(-eps / scale).
    """
    scale = default_scale(n) if scale is None else int(scale)
    alpha = math.exp(-budget.epsilon / scale) if budget.epsilon > 0 else 0.0
    return SplitMixParams(
        q=default_modulus(n, scale),
        m=default_message_count(n, budget.delta) if m is None else int(m),
        scale=scale,
        alpha=alpha,
    )


def _bounded_shares(x: np.ndarray, u: np.ndarray, params: SplitMixParams, n: int) -> np.ndarray:
    scaled = x * params.scale
    base = np.floor(scaled)
    y = base.astype(np.int64) + (u[:, 0] < scaled - base)
    if params.alpha > 0:
        y = y + _polya_from_uniforms(u[:, 1:5], params.alpha, n)
    return _split(np.mod(y, params.q), u[:, 5:], params.q, params.m)


def _bounded_draws(params: SplitMixParams) -> int:
    return 5 + params.m - 1


def bounded_sum_randomize(
    x: float, params: SplitMixParams, rng: np.random.Generator, n: int = 1
) -> MessageBundle:
    """Round x * scale randomly, add a noise share, and split mod q.

    ``n`` is the number of users the noise is divided among.
    """
    if not 0 <= x <= 1:
        raise DomainError(f"bounded sum takes a value in [0, 1], got {x!r}")
    u = rng.random((1, _bounded_draws(params)))
    shares = _bounded_shares(np.array([float(x)]), u, params, n)[0]
    return tuple((int(s),) for s in shares)


def bounded_sum_analyze(t: Transcript, params: SplitMixParams, n: int) -> float:
    """Decode mod q inside a window of width q centred on n * scale / 2."""
    s = splitmix_decode(t, params.q)
    low = math.floor(n * params.scale / 2 - params.q / 2)
    return (low + (s - low) % params.q) / params.scale


class BoundedSum(ShuffleProtocol):
    """Sum of values in [0, 1] with discrete Laplace noise split across users."""

    name = "bounded_sum"
    arity = 1

    def __init__(self, n: int, params: SplitMixParams):
        super().__init__(n)
        if params.q <= n * params.scale:
            raise PreconditionError(f"modulus {params.q} must exceed n * scale = {n * params.scale}")
        self.split = params
        self.fixed_length = params.m

    @classmethod
    def for_budget(cls, n: int, budget: PrivacyBudget, m: int | None = None, scale: int | None = None):
        return cls(n, solve_bounded_sum_params(n, budget, m, scale))

    @property
    def draws(self) -> int:
        return _bounded_draws(self.split)

    def encode(self, dataset: Sequence[float]):
        arr = np.asarray(dataset, dtype=float).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() > 1 or np.isnan(arr).any()):
            raise DomainError("bounded sum values must lie in [0, 1]")
        return arr

    def randomize_batch(self, rows, u, public):
        shares = _bounded_shares(rows, u, self.split, self.n)
        return shares.reshape(-1, 1), np.repeat(np.arange(len(rows)), self.split.m)

    def analyze(self, transcript, public=None):
        return bounded_sum_analyze(transcript, self.split, self.n)

    def params(self):
        s = self.split
        return {"q": s.q, "m": s.m, "scale": s.scale, "alpha": s.alpha}
