"""Frequency estimation over a universe [d] in the shuffle model.

* parallel histogram: one zsum execution per bin, messages labelled by bin;
* opt-in histogram: a random subset of users adds Ber(1/2) noise to every bin;
* Count-Min: T hashed repetitions of an inner histogram over [d_hat],
  combined by taking the minimum.

Bins, repetitions and universe elements are 0-based throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import stats

from .accounting import DEFAULT_CONFIG, AccountantConfig, PrivacyBudget, _bisect_probability, min_noise_trials
from .errors import FormatError, PreconditionError
from .model import MessageBundle, derive_seed, PublicRandomness, ShuffleProtocol, Transcript, check_universe, user_uniforms
from .sums import ZsumParams, _zsum_bits, solve_zsum_r, zsum_estimate

# ---------------------------------------------------------------------------
# estimates


@dataclass(frozen=True)
class HistogramEstimate:
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def d(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, j):
        return self.values[j]

    def linf_error(self, truth) -> float:
        return float(np.abs(self.values - np.asarray(truth, dtype=float)).max(initial=0.0))


def true_counts(rows, d: int) -> np.ndarray:
    return np.bincount(check_universe(rows, d), minlength=d)


# ---------------------------------------------------------------------------
# parallel histogram over zsum


def histogram_bin_budget(budget: PrivacyBudget) -> PrivacyBudget:
    """Changing one row moves two bins, so each bin gets half the budget."""
    return budget.split(2)


def _parallel_messages(rows: np.ndarray, u: np.ndarray, d: int, params: ZsumParams) -> np.ndarray:
    n = len(rows)
    onehot = np.zeros((n, d), dtype=np.int64)
    onehot[np.arange(n), rows] = 1
    a, b = _zsum_bits(onehot.reshape(-1), u.reshape(-1), params)
    labels = np.broadcast_to(np.arange(d), (n, d)).reshape(-1)
    # per user: (0, a_0), (0, b_0), (1, a_1), (1, b_1), ...
    msgs = np.empty((n * d, 2, 2), dtype=np.int64)
    msgs[:, 0, 0] = labels
    msgs[:, 1, 0] = labels
    msgs[:, 0, 1] = a
    msgs[:, 1, 1] = b
    return msgs.reshape(-1, 2)


def parallel_hist_randomize(x: int, d: int, params: ZsumParams, rng: np.random.Generator) -> MessageBundle:
    """Run zsum on the indicator [x = j] for every bin j; 2d labelled messages."""
    rows = check_universe([x], d, "histogram")
    msgs = _parallel_messages(rows, rng.random((1, d)), d, params)
    return tuple((int(j), int(v)) for j, v in msgs)


def bin_totals(t: Transcript, d: int) -> np.ndarray:
    """Per-bin sum of the bit column; rejects labels outside [0, d)."""
    if len(t) == 0:
        return np.zeros(d, dtype=np.int64)
    if t.arity != 2:
        raise FormatError(f"expected (label, bit) messages, got arity {t.arity}")
    labels, bits = t.column(0), t.column(1)
    if labels.min() < 0 or labels.max() >= d:
        raise FormatError(f"message label outside [0, {d})")
    return np.bincount(labels, weights=bits, minlength=d).astype(np.int64)


def parallel_hist_analyze(t: Transcript, d: int, params: ZsumParams) -> HistogramEstimate:
    return HistogramEstimate(zsum_estimate(bin_totals(t, d), params.n, params.r))


class ParallelHistogram(ShuffleProtocol):
    """d parallel zsum executions whose estimates are exactly 0 on empty bins."""

    name = "parallel_hist"
    arity = 2

    def __init__(self, n: int, d: int, r: float, small_n_fallback: bool = False):
        super().__init__(n)
        if d < 1:
            raise PreconditionError(f"universe size must be >= 1, got {d}")
        self.d = int(d)
        self.zsum = ZsumParams(float(r), self.n, small_n_fallback)
        self.fixed_length = 2 * self.d

    @classmethod
    def for_budget(
        cls, n: int, d: int, budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG
    ) -> "ParallelHistogram":
        zp = solve_zsum_r(n, histogram_bin_budget(budget), config)
        return cls(n, d, zp.r, zp.small_n_fallback)

    @property
    def draws(self) -> int:
        return self.d

    def encode(self, dataset):
        return check_universe(dataset, self.d, "histogram")

    def randomize_batch(self, rows, u, public):
        msgs = _parallel_messages(rows, u, self.d, self.zsum)
        return msgs, np.repeat(np.arange(len(rows)), 2 * self.d)

    def analyze(self, transcript, public=None):
        return parallel_hist_analyze(transcript, self.d, self.zsum)

    def alphabet(self):
        return [(j, v) for j in range(self.d) for v in (0, 1)]

    def bundle_distribution(self, x):
        if self.d > 3:
            raise NotImplementedError("exact bundles only enumerated for d <= 3")
        r, fallback = self.zsum.r, self.zsum.small_n_fallback
        dist = {tuple([0] * (2 * self.d)): 1.0}
        for j in range(self.d):
            ind = int(x == j) and not fallback
            noise = [(0, 1.0)] if fallback else [(0, 1 - r), (1, r)]
            nxt: dict[tuple[int, ...], float] = {}
            for key, pk in dist.items():
                for b, pb in noise:
                    if pb == 0:
                        continue
                    k = list(key)
                    ones = ind + b
                    k[2 * j] += 2 - ones
                    k[2 * j + 1] += ones
                    nxt[tuple(k)] = nxt.get(tuple(k), 0.0) + pk * pb
            dist = nxt
        return dist

    def params(self):
        return {"d": self.d, "r": self.zsum.r, "small_n_fallback": self.zsum.small_n_fallback}


# ---------------------------------------------------------------------------
# opt-in histogram

DATA, FLAG, NOISE = 0, 1, 2


@dataclass(frozen=True)
class OptInParams:
    d: int
    p_opt: float
    n: int

    def __post_init__(self) -> None:
        if not 0 <= self.p_opt <= 1:
            raise PreconditionError(f"p_opt must lie in [0, 1], got {self.p_opt}")
        if self.d < 1:
            raise PreconditionError(f"universe size must be >= 1, got {self.d}")


@lru_cache(maxsize=4096)
def _solve_optin_p(n: int, epsilon: float, delta: float, tol: float) -> float:
    half = n // 2
    # each bin's Bin(|H|, 1/2) noise gets (eps/2, delta/4); the rest of delta
    # covers the event that too few of the n/2 robust participants opt in
    need = min_noise_trials(epsilon / 2, delta / 4)
    if need > half:
        return 1.0

    def ok(p: float) -> bool:
        return float(stats.binom.cdf(need - 1, half, p)) <= delta / 2

    if not ok(1.0):
        return 1.0
    return _bisect_probability(ok, 0.0, 1.0, tol)


def solve_optin_p(n: int, d: int, budget: PrivacyBudget, tol: float = 1e-6) -> OptInParams:
    """Smallest opt-in probability making the histogram robustly private.

    ``|H|`` is the number of opted-in users among the n/2 guaranteed
    participants. The exact binomial accountant gives the noise count each
    bin needs, and p_opt is set so that ``|H|`` falls short with probability
    at most delta / 2.
    """
    if budget.epsilon <= 0 or budget.delta <= 0:
        raise PreconditionError("opt-in histogram needs epsilon > 0 and delta > 0")
    return OptInParams(int(d), _solve_optin_p(int(n), float(budget.epsilon), float(budget.delta), tol), int(n))


def _optin_messages(rows: np.ndarray, u: np.ndarray, params: OptInParams) -> tuple[np.ndarray, np.ndarray]:
    n, d = len(rows), params.d
    users = np.arange(n)
    flag = (u[:, 0] < params.p_opt).astype(np.int64)
    noise = (u[:, 1:] < 0.5) & flag.astype(bool)[:, None]
    nz_user, nz_bin = np.nonzero(noise)
    msgs = np.concatenate(
        [
            np.stack([np.full(n, DATA), rows], axis=1),
            np.stack([np.full(n, FLAG), flag], axis=1),
            np.stack([np.full(nz_user.size, NOISE), nz_bin], axis=1),
        ]
    )
    owners = np.concatenate([users, users, nz_user])
    order = np.argsort(owners, kind="stable")
    return msgs[order], owners[order]


def optin_randomize(x: int, params: OptInParams, rng: np.random.Generator) -> MessageBundle:
    """(DATA, x), (FLAG, b) with b ~ Ber(p_opt), and if b = 1 a (NOISE, j) for each bin w.p. 1/2."""
    rows = check_universe([x], params.d, "histogram")
    msgs, _ = _optin_messages(rows, rng.random((1, 1 + params.d)), params)
    return tuple((int(a), int(b)) for a, b in msgs)


def optin_raw(t: Transcript, d: int) -> tuple[np.ndarray, int]:
    """Per-bin DATA + NOISE counts and the opted-in count |H|."""
    if len(t) == 0:
        return np.zeros(d, dtype=np.int64), 0
    if t.arity != 2:
        raise FormatError(f"expected (tag, value) messages, got arity {t.arity}")
    tags, vals = t.column(0), t.column(1)
    if np.any((tags < DATA) | (tags > NOISE)):
        raise FormatError("unknown message tag")
    binned = vals[tags != FLAG]
    if binned.size and (binned.min() < 0 or binned.max() >= d):
        raise FormatError(f"message value outside [0, {d})")
    raw = np.bincount(binned, minlength=d)
    return raw, int(vals[tags == FLAG].sum())


def optin_estimates(raw: np.ndarray, opted: int, truncate: bool = True) -> np.ndarray:
    est = raw - opted / 2
    if truncate:
        est = np.where(raw <= opted, 0.0, est)
    return est


def optin_analyze(t: Transcript, params: OptInParams, truncate: bool = True) -> HistogramEstimate:
    """raw_j - |H| / 2, or 0 when raw_j <= |H| and truncation is on."""
    raw, opted = optin_raw(t, params.d)
    return HistogramEstimate(optin_estimates(raw, opted, truncate))


class OptInHistogram(ShuffleProtocol):
    """Histogram where opted-in users add a Ber(1/2) message to every bin."""

    name = "optin_hist"
    arity = 2

    def __init__(self, n: int, d: int, p_opt: float, truncate: bool = True):
        super().__init__(n)
        self.optin = OptInParams(int(d), float(p_opt), self.n)
        self.truncate = truncate

    @classmethod
    def for_budget(cls, n: int, d: int, budget: PrivacyBudget, truncate: bool = True) -> "OptInHistogram":
        return cls(n, d, solve_optin_p(n, d, budget).p_opt, truncate)

    @property
    def d(self) -> int:
        return self.optin.d

    @property
    def draws(self) -> int:
        return 1 + self.d

    def encode(self, dataset):
        return check_universe(dataset, self.d, "histogram")

    def randomize_batch(self, rows, u, public):
        return _optin_messages(rows, u, self.optin)

    def analyze(self, transcript, public=None):
        return optin_analyze(transcript, self.optin, self.truncate)

    def params(self):
        return {"d": self.d, "p_opt": self.optin.p_opt, "truncate": self.truncate}


# ---------------------------------------------------------------------------
# Count-Min template


def compressed_size(n: int, d: int, T: int) -> int:
    """d_hat = ceil(n * (100 d)^(1/T))."""
    if T < 1:
        raise PreconditionError(f"repetitions T must be >= 1, got {T}")
    raw = n * (100.0 * d) ** (1.0 / T)
    near = round(raw)
    return max(2, near if abs(raw - near) < 1e-9 * max(1.0, raw) else math.ceil(raw))


@dataclass(frozen=True)
class HashFamily:
    """T independent hash functions [d] -> [d_hat] drawn from public randomness."""

    T: int
    d_hat: int
    d: int
    seed: int

    def __post_init__(self) -> None:
        if self.T < 1 or self.d_hat < 2:
            raise PreconditionError("need T >= 1 and d_hat >= 2")

    @classmethod
    def from_public(cls, T: int, d_hat: int, d: int, public: PublicRandomness) -> "HashFamily":
        return cls(T, d_hat, d, int(public.rng("countmin").integers(0, 2**63)))

    def table(self) -> np.ndarray:
        """(T, d) array whose row t is h^(t) on [d]."""
        return _hash_table(self.T, self.d_hat, self.d, self.seed)

    def __call__(self, t: int, j) -> np.ndarray:
        return self.table()[t, j]


@lru_cache(maxsize=64)
def _hash_table(T: int, d_hat: int, d: int, seed: int) -> np.ndarray:
    # each repetition reads its own substream, so the functions are independent
    keys = np.arange(d)
    table = np.stack(
        [np.floor(user_uniforms(derive_seed(seed, "rep", t), keys, 1)[:, 0] * d_hat).astype(np.int64) for t in range(T)]
    )
    table.setflags(write=False)
    return table


def countmin_params(n: int, d: int, T: int, public: PublicRandomness | None = None) -> HashFamily:
    return HashFamily.from_public(T, compressed_size(n, d, T), d, public or PublicRandomness(0))


def all_repetition_collision(data, family: HashFamily) -> bool:
    """True when some j in [d] shares a bucket with another data element under every h^(t)."""
    values = np.unique(check_universe(data, family.d))
    table = family.table()
    present = np.zeros(family.d, dtype=np.int64)
    present[values] = 1
    hit_every = np.ones(family.d, dtype=bool)
    for t in range(family.T):
        load = np.bincount(table[t, values], minlength=family.d_hat)
        hit_every &= load[table[t]] - present > 0
    return bool(hit_every.any())


class ExactHistogram(ShuffleProtocol):
    """Noiseless inner protocol: send x, count the values."""

    name = "exact_hist"
    arity = 1
    fixed_length = 1

    def __init__(self, n: int, d: int):
        super().__init__(n)
        self.d = int(d)

    @property
    def draws(self) -> int:
        return 0

    def encode(self, dataset):
        return check_universe(dataset, self.d, "histogram")

    def randomize_batch(self, rows, u, public):
        return rows.reshape(-1, 1), np.arange(len(rows))

    def analyze(self, transcript, public=None):
        if len(transcript) == 0:
            return HistogramEstimate(np.zeros(self.d))
        vals = transcript.column(0)
        if vals.min() < 0 or vals.max() >= self.d:
            raise FormatError(f"value outside [0, {self.d})")
        return HistogramEstimate(np.bincount(vals, minlength=self.d))

    def alphabet(self):
        return [(j,) for j in range(self.d)]

    def bundle_distribution(self, x):
        key = [0] * self.d
        key[int(check_universe([x], self.d, "histogram")[0])] = 1
        return {tuple(key): 1.0}

    def params(self):
        return {"d": self.d}


def countmin_randomize(
    x: int, family: HashFamily, inner: ShuffleProtocol, rng: np.random.Generator, public: PublicRandomness | None = None
) -> MessageBundle:
    """Run the inner randomizer on h^(t)(x) for each t and prefix its messages with t."""
    table = family.table()
    out = []
    for t in range(family.T):
        for msg in inner.randomize(int(table[t, x]), rng, public):
            out.append((t, *msg))
    return tuple(out)


def countmin_analyze(
    t: Transcript, family: HashFamily, inner: ShuffleProtocol, public: PublicRandomness | None = None
) -> HistogramEstimate:
    """z_j = min over repetitions of the inner estimate at h^(t)(j)."""
    table = family.table()
    z = np.full(family.d, np.inf)
    for rep in range(family.T):
        est = inner.analyze(t.select(rep), public)
        z = np.minimum(z, np.asarray(est.values)[table[rep]])
    return HistogramEstimate(z)


class CountMin(ShuffleProtocol):
    """T hashed repetitions of an inner histogram protocol over [d_hat].

    The inner protocol's budget should already account for the T-fold
    composition.
    """

    name = "countmin"

    def __init__(self, n: int, d: int, T: int, inner: ShuffleProtocol, d_hat: int | None = None):
        super().__init__(n)
        self.d, self.T = int(d), int(T)
        self.d_hat = compressed_size(n, d, T) if d_hat is None else int(d_hat)
        if getattr(inner, "d", self.d_hat) != self.d_hat:
            raise PreconditionError(f"inner protocol covers [{inner.d}], expected [{self.d_hat}]")
        self.inner = inner
        self.arity = inner.arity + 1
        self.fixed_length = None if inner.fixed_length is None else self.T * inner.fixed_length

    def family(self, public: PublicRandomness) -> HashFamily:
        return HashFamily.from_public(self.T, self.d_hat, self.d, public)

    @property
    def draws(self) -> int:
        return self.T * self.inner.draws

    def encode(self, dataset):
        return check_universe(dataset, self.d, "histogram")

    def randomize_batch(self, rows, u, public):
        table = self.family(public).table()
        k = self.inner.draws
        msgs, owners = [], []
        for t in range(self.T):
            m, o = self.inner.randomize_batch(table[t, rows], u[:, t * k : (t + 1) * k], public)
            m = np.asarray(m, dtype=np.int64).reshape(-1, self.inner.arity)
            msgs.append(np.concatenate([np.full((m.shape[0], 1), t), m], axis=1))
            owners.append(np.asarray(o))
        return np.concatenate(msgs), np.concatenate(owners)

    def analyze(self, transcript, public=None):
        return countmin_analyze(transcript, self.family(public or PublicRandomness(0)), self.inner, public)

    def params(self):
        return {"d": self.d, "T": self.T, "d_hat": self.d_hat, "inner": self.inner.name, **{
            f"inner_{k}": v for k, v in self.inner.params().items()
        }}
