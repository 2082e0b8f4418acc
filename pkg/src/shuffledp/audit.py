"""Exact privacy audits of shuffled transcripts at small n.

A shuffled transcript is a multiset, so its law is a distribution over
count vectors on the protocol's alphabet. That distribution is the
convolution of the per-user bundle-count distributions, which protocols
expose through ``alphabet`` and ``bundle_distribution``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EnumerationBudgetError, PreconditionError
from .model import (
    PublicRandomness,
    ShuffleProtocol,
    Transcript,
    check_universe,
    derive_seed,
    execute_partial,
    user_uniforms,
)

MAX_ALPHABET = 6
MAX_MESSAGES = 64

Counts = tuple[int, ...]


@dataclass(frozen=True)
class DistributionTable:
    """Exact law of a shuffled transcript, keyed by alphabet counts."""

    alphabet: tuple[tuple[int, ...], ...]
    probs: Mapping[Counts, float]

    def __post_init__(self) -> None:
        total = math.fsum(self.probs.values())
        if abs(total - 1) > 1e-12 * max(1, len(self.probs)):
            raise PreconditionError(f"probabilities sum to {total}, not 1")
        if any(len(k) != len(self.alphabet) for k in self.probs):
            raise PreconditionError("count vector length differs from the alphabet size")
        object.__setattr__(self, "probs", dict(sorted((k, v) for k, v in self.probs.items() if v > 0)))

    def __getitem__(self, key: Counts) -> float:
        return self.probs.get(tuple(key), 0.0)

    def __len__(self) -> int:
        return len(self.probs)

    def support(self) -> set[Counts]:
        return set(self.probs)

    def items(self):
        return self.probs.items()

    def length_distribution(self) -> dict[int, float]:
        """Law of the transcript size."""
        out: dict[int, float] = {}
        for k, v in self.probs.items():
            out[sum(k)] = out.get(sum(k), 0.0) + v
        return dict(sorted(out.items()))

    def marginal(self, statistic: Callable[[Counts], Hashable]) -> dict[Hashable, float]:
        out: dict[Hashable, float] = {}
        for k, v in self.probs.items():
            key = statistic(k)
            out[key] = out.get(key, 0.0) + v
        return out

    def key_of(self, transcript: Transcript) -> Counts:
        index = {sym: i for i, sym in enumerate(self.alphabet)}
        counts = [0] * len(self.alphabet)
        for sym, c in transcript.counts().items():
            counts[index[sym]] += c
        return tuple(counts)

    def with_messages(self, extra: Counts) -> "DistributionTable":
        """Post-processing that appends a fixed multiset of messages."""
        return DistributionTable(
            self.alphabet, {tuple(a + b for a, b in zip(k, extra)): v for k, v in self.probs.items()}
        )


def _convolve(acc: dict[Counts, float], step: Mapping[Counts, float]) -> dict[Counts, float]:
    out: dict[Counts, float] = {}
    for k1, p1 in acc.items():
        for k2, p2 in step.items():
            key = tuple(a + b for a, b in zip(k1, k2))
            out[key] = out.get(key, 0.0) + p1 * p2
    return out


def _bundle_law(protocol: ShuffleProtocol, x: Any) -> dict[Counts, float]:
    law = {tuple(int(c) for c in k): float(v) for k, v in protocol.bundle_distribution(x).items() if v > 0}
    return law


def _mixture_law(protocol: ShuffleProtocol, weights: Mapping[Any, float]) -> dict[Counts, float]:
    out: dict[Counts, float] = {}
    for x, w in weights.items():
        if w <= 0:
            continue
        for k, v in _bundle_law(protocol, x).items():
            out[k] = out.get(k, 0.0) + w * v
    return out


def _check_budget(protocol: ShuffleProtocol, laws: Sequence[Mapping[Counts, float]], limits: tuple[int, int]) -> None:
    max_alphabet, max_messages = limits
    a = len(protocol.alphabet())
    if max_alphabet is not None and a > max_alphabet:
        raise EnumerationBudgetError(f"alphabet size {a} exceeds the limit {max_alphabet}")
    total = sum(max(sum(k) for k in law) for law in laws)
    if max_messages is not None and total > max_messages:
        raise EnumerationBudgetError(f"up to {total} messages exceeds the limit {max_messages}")


DENSE_CELL_LIMIT = 5_000_000


def _dense_convolution(laws: Sequence[Mapping[Counts, float]], a: int) -> dict[Counts, float] | None:
    """Array convolution of the laws, or None if the grid would be too large.

    When every bundle of every law has the same length the last count is
    implied by the others and is dropped from the grid.
    """
    lengths = [{sum(k) for k in law} for law in laws]
    fixed = all(len(s) == 1 for s in lengths)
    dims = a - 1 if fixed else a
    if dims == 0:
        return None
    spans = [1 + sum(max(k[i] for k in law) for law in laws) for i in range(dims)]
    if math.prod(spans) > DENSE_CELL_LIMIT:
        return None
    from scipy import signal

    acc = np.ones((1,) * dims)
    for law in laws:
        shape = [1 + max(k[i] for k in law) for i in range(dims)]
        arr = np.zeros(shape)
        for k, v in law.items():
            arr[k[:dims]] += v
        acc = np.convolve(acc, arr) if dims == 1 else signal.convolve(acc, arr, method="direct")
    total = sum(next(iter(s)) for s in lengths) if fixed else 0
    out: dict[Counts, float] = {}
    for idx in zip(*np.nonzero(acc)):
        key = tuple(int(i) for i in idx)
        if fixed:
            key = key + (total - sum(key),)
        out[key] = float(acc[idx])
    return out


def _table(protocol: ShuffleProtocol, laws: Sequence[Mapping[Counts, float]], limits) -> DistributionTable:
    _check_budget(protocol, laws, limits)
    alphabet = tuple(tuple(s) for s in protocol.alphabet())
    acc = _dense_convolution(laws, len(alphabet)) if laws else None
    if acc is None:
        acc = {tuple([0] * len(alphabet)): 1.0}
        for law in laws:
            acc = _convolve(acc, law)
    return DistributionTable(alphabet, acc)


def enumerate_transcript_distribution(
    protocol: ShuffleProtocol,
    inputs: Sequence[Any],
    k: int | None = None,
    max_alphabet: int = MAX_ALPHABET,
    max_messages: int = MAX_MESSAGES,
) -> DistributionTable:
    """Exact law of the shuffled messages of the first ``k`` users of ``inputs``."""
    k = len(inputs) if k is None else int(k)
    if not 0 <= k <= len(inputs):
        raise PreconditionError(f"participant count {k} outside [0, {len(inputs)}]")
    laws = [_bundle_law(protocol, x) for x in list(inputs)[:k]]
    return _table(protocol, laws, (max_alphabet, max_messages))


def enumerate_mixture_distribution(
    protocol: ShuffleProtocol,
    input_laws: Sequence[Mapping[Any, float]],
    max_alphabet: int = MAX_ALPHABET,
    max_messages: int = MAX_MESSAGES,
) -> DistributionTable:
    """Exact transcript law when user i's input is drawn from ``input_laws[i]``."""
    laws = [_mixture_law(protocol, w) for w in input_laws]
    return _table(protocol, laws, (max_alphabet, max_messages))


# ---------------------------------------------------------------------------
# divergences


def hockey_stick(P: DistributionTable | Mapping, Q: DistributionTable | Mapping, epsilon: float) -> float:
    """sum over outcomes of max(P - e^eps Q, 0)."""
    p = P.probs if isinstance(P, DistributionTable) else P
    q = Q.probs if isinstance(Q, DistributionTable) else Q
    scale = math.exp(epsilon) if epsilon < 700 else math.inf
    terms = []
    for k, pk in p.items():
        qk = q.get(k, 0.0)
        gap = pk if qk == 0 else pk - scale * qk
        if gap > 0:
            terms.append(gap)
    return min(1.0, max(0.0, math.fsum(terms)))


def _violating_event(P: DistributionTable, Q: DistributionTable, epsilon: float) -> frozenset:
    scale = math.exp(epsilon)
    return frozenset(k for k, pk in P.items() if pk > scale * Q[k])


def max_log_ratio(P: DistributionTable, Q: DistributionTable) -> tuple[float, Counts | None]:
    """Largest |log P(o) / Q(o)| over outcomes in either support, with the outcome."""
    worst, where = 0.0, None
    for o in P.support() | Q.support():
        p, q = P[o], Q[o]
        if p == 0 or q == 0:
            return math.inf, o
        r = abs(math.log(p / q))
        if r > worst:
            worst, where = r, o
    return worst, where


@dataclass(frozen=True)
class AuditReport:
    """Tight guarantee over the audited neighbor pairs.

    epsilon_star: smallest eps with delta = 0 (+inf when supports differ).
    delta_at_target: smallest delta at ``target_epsilon``.
    witness: the neighbor pair attaining delta_at_target and the violating
    event (outcomes where one law exceeds e^eps times the other), plus the
    outcome attaining epsilon_star.
    """

    epsilon_star: float
    delta_at_target: float
    target_epsilon: float
    witness: dict = field(default_factory=dict)
    participants: int | None = None

    def satisfies(self, epsilon: float, delta: float = 0.0) -> bool:
        if delta == 0:
            return self.epsilon_star <= epsilon
        return self.delta_at_target <= delta and epsilon >= self.target_epsilon

    def to_record(self) -> dict:
        return {
            "epsilon_star": self.epsilon_star,
            "delta_at_target": self.delta_at_target,
            "target_epsilon": self.target_epsilon,
            "participants": self.participants,
            "witness": _jsonable(self.witness),
        }


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = [_jsonable(v) for v in obj]
        return sorted(items, key=repr) if isinstance(obj, (set, frozenset)) else items
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def assert_binary_exchangeable(protocol: ShuffleProtocol) -> None:
    """Check the preconditions of the binary default neighbor set.

    The domain must be exactly {0, 1}, and every user must run the same
    randomizer, so the transcript law depends on the inputs only through
    their sum. The first is probed through ``encode``; the second holds
    because ``bundle_distribution`` is a function of the row alone, and is
    spot-checked on a permuted input.
    """
    from .errors import DomainError

    protocol.encode([0, 1])
    try:
        protocol.encode([2])
    except DomainError:
        pass
    else:
        raise PreconditionError(f"{protocol.name} accepts rows other than 0/1; pass an explicit neighbor list")
    a = enumerate_transcript_distribution(protocol, [0, 1])
    b = enumerate_transcript_distribution(protocol, [1, 0])
    if a.probs.keys() != b.probs.keys() or any(abs(a[k] - b[k]) > 1e-12 for k in a.probs):
        raise PreconditionError(f"{protocol.name} transcript law depends on user order")


def default_binary_neighbors(k: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(0^k, 0^(k-1) 1) and (1^k, 1^(k-1) 0); exhaustive for exchangeable binary protocols."""
    if k < 1:
        return []
    return [
        (tuple([0] * k), tuple([0] * (k - 1) + [1])),
        (tuple([1] * k), tuple([1] * (k - 1) + [0])),
    ]


def audit_neighbors(
    protocol: ShuffleProtocol,
    epsilon: float,
    neighbors: Iterable[tuple[Sequence[Any], Sequence[Any]]] | None = None,
    participants: int | None = None,
    max_alphabet: int = MAX_ALPHABET,
    max_messages: int = MAX_MESSAGES,
) -> AuditReport:
    """Worst case over neighbor pairs of the two-sided hockey-stick divergence at ``epsilon``.

    ``participants`` (default ``protocol.n``) is the number of users whose
    messages reach the shuffler; the randomizer keeps the parameters it was
    built with.
    """
    k = protocol.n if participants is None else int(participants)
    if neighbors is None:
        assert_binary_exchangeable(protocol)
        pairs = default_binary_neighbors(k)
    else:
        pairs = [(tuple(x), tuple(y)) for x, y in neighbors]
    if not pairs:
        return AuditReport(0.0, 0.0, epsilon, {"pair": None}, k)
    cache: dict[tuple, DistributionTable] = {}

    def table(x: tuple) -> DistributionTable:
        if x not in cache:
            cache[x] = enumerate_transcript_distribution(protocol, x, None, max_alphabet, max_messages)
        return cache[x]

    best_delta, best_eps = -1.0, -1.0
    witness: dict = {}
    for x, y in pairs:
        if len(x) != k or len(y) != k:
            raise PreconditionError(f"neighbor inputs must have length {k}")
        if sum(a != b for a, b in zip(x, y)) > 1:
            raise PreconditionError(f"{x} and {y} differ in more than one row")
        P, Q = table(x), table(y)
        for first, second, a, b in ((x, y, P, Q), (y, x, Q, P)):
            delta = hockey_stick(a, b, epsilon)
            if delta > best_delta:
                best_delta = delta
                witness["pair"] = (first, second)
                witness["event"] = _violating_event(a, b, epsilon)
        ratio, outcome = max_log_ratio(P, Q)
        if ratio > best_eps:
            best_eps = ratio
            witness["pure_pair"] = (x, y)
            witness["pure_outcome"] = outcome
    return AuditReport(best_eps, best_delta, epsilon, witness, k)


def audit_robustness(
    protocol: ShuffleProtocol,
    gamma: float,
    epsilon: float,
    neighbors: Iterable[tuple[Sequence[Any], Sequence[Any]]] | None = None,
    **limits,
) -> AuditReport:
    """Audit when only gamma * n users take part, with parameters still set for n."""
    k = gamma * protocol.n
    if abs(k - round(k)) > 1e-9 or not 0 <= k <= protocol.n:
        raise PreconditionError(f"gamma * n = {k} must be an integer in [0, n]")
    return audit_neighbors(protocol, epsilon, neighbors, participants=int(round(k)), **limits)


# ---------------------------------------------------------------------------
# brittle protocols


class _UnaryCountProtocol(ShuffleProtocol):
    """Randomizers over {0, 1} that send a random number of copies of the symbol 1."""

    arity = 1

    def count_support(self, x: int) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def max_count(self) -> int:
        return max(max(self.count_support(0)), max(self.count_support(1)))

    def encode(self, dataset):
        return check_universe(dataset, 2, "bit")

    def randomize_batch(self, rows, u, public):
        counts = np.empty(len(rows), dtype=np.int64)
        for x in (0, 1):
            support = np.asarray(self.count_support(x))
            mask = rows == x
            pick = np.minimum((u[mask, 0] * support.size).astype(np.int64), support.size - 1)
            counts[mask] = support[pick]
        owners = np.repeat(np.arange(len(rows)), counts)
        return np.ones((owners.size, 1), dtype=np.int64), owners

    def analyze(self, transcript, public=None):
        return len(transcript)

    def alphabet(self):
        return [(1,)]

    def bundle_distribution(self, x):
        support = self.count_support(int(x))
        return {(c,): 1.0 / len(support) for c in support}


class Brittle1(_UnaryCountProtocol):
    """Pure DP with n users; not pure DP once one of them drops out.

    Message count is uniform on {0, ..., n+2} for input 0 and on
    {0, 1, n+1, n+2} for input 1.
    """

    name = "brittle1"

    def count_support(self, x):
        n = self.n
        return tuple(range(n + 3)) if x == 0 else (0, 1, n + 1, n + 2)


class Brittle2(_UnaryCountProtocol):
    """Approximate DP with n users; no DP at all with n - 1.

    Message count is uniform on {0, 1} for input 0 and on {n, n+1} for input 1.
    """

    name = "brittle2"

    def count_support(self, x):
        n = self.n
        return (0, 1) if x == 0 else (n, n + 1)


def brittle1_randomizer(x: int, n: int, rng: np.random.Generator):
    return Brittle1(n).randomize(x, rng)


def brittle2_randomizer(x: int, n: int, rng: np.random.Generator):
    return Brittle2(n).randomize(x, rng)


# ---------------------------------------------------------------------------
# removing the shuffler


def removal_epsilon(
    randomizer: ShuffleProtocol | Callable[[Any], Mapping[Hashable, float]], domain: Iterable[Any]
) -> float:
    """max over x, x', y of log(P[R(x) = y] / P[R(x') = y]) for a single-message randomizer."""
    if isinstance(randomizer, ShuffleProtocol):
        proto = randomizer
        if proto.fixed_length != 1:
            raise PreconditionError(f"{proto.name} is not a single-message randomizer")

        def dist(x):
            return proto.bundle_distribution(x)
    else:
        dist = randomizer
    laws = [dict(dist(x)) for x in domain]
    if not laws:
        raise PreconditionError("input domain is empty")
    outputs = set().union(*laws)
    worst = 0.0
    for y in outputs:
        probs = [law.get(y, 0.0) for law in laws]
        hi, lo = max(probs), min(probs)
        if hi > 0 and lo == 0:
            return math.inf
        if hi > 0:
            worst = max(worst, math.log(hi / lo))
    return worst


# ---------------------------------------------------------------------------
# online wrapper

#: probability that each streamed row is swapped for a reference draw
ONLINE_SWAP_PROBABILITY = 0.5


@dataclass(frozen=True)
class OnlineState:
    transcript: Transcript
    users_consumed: int

    @property
    def runs(self) -> int:
        """Randomizer executions whose messages make up the state."""
        return self.users_consumed


def _sample_rows(probs: Mapping[Any, float], count: int, rng: np.random.Generator) -> list:
    keys = list(probs)
    weights = np.asarray([probs[k] for k in keys], dtype=float)
    picks = rng.choice(len(keys), size=count, p=weights / weights.sum())
    return [keys[i] for i in picks]


def online_wrap(
    protocol: ShuffleProtocol,
    stream: Sequence[Any],
    reference: Mapping[Any, float],
    seed: int,
    q: float = ONLINE_SWAP_PROBABILITY,
) -> tuple[Any, list[OnlineState]]:
    """Online algorithm built from a robustly private shuffle protocol.

    The initial state is the shuffled output of n/2 users holding reference
    draws. The first Bin(n/2, q) streamed rows are replaced by fresh
    reference draws, then each row is randomized and its messages merged
    into the state. The output is the analyzer applied to the final state.
    """
    n = protocol.n
    half = n // 2
    if n % 2:
        raise PreconditionError(f"online wrapper needs even n, got {n}")
    if len(stream) != half:
        raise PreconditionError(f"stream must hold n/2 = {half} rows, got {len(stream)}")
    rng = np.random.default_rng(derive_seed(seed, "online"))
    public = PublicRandomness(derive_seed(seed, "public"))
    initial_rows = _sample_rows(reference, half, rng)
    swapped = int(rng.binomial(half, q))
    rows = _sample_rows(reference, swapped, rng) + list(stream)[swapped:]

    state = execute_partial(protocol, initial_rows, half, derive_seed(seed, "initial"))
    trace = [OnlineState(state, half)]
    user_key = derive_seed(seed, "stream")
    for i, row in enumerate(rows):
        encoded = protocol.encode([row])
        u = user_uniforms(user_key, np.array([i]), protocol.draws)
        msgs, _ = protocol.randomize_batch(encoded, u, public)
        msgs = np.asarray(msgs, dtype=np.int64).reshape(-1, protocol.arity)
        if len(state):
            merged = np.concatenate([state.entries, msgs])
        else:
            merged = msgs
        # the state is a multiset, so insertion at random positions is the same as a union
        state = Transcript(merged, arity=protocol.arity)
        trace.append(OnlineState(state, half + i + 1))
    return protocol.analyze(state, public), trace


def online_wrapper_distribution(
    protocol: ShuffleProtocol,
    stream_law: Mapping[Any, float],
    reference: Mapping[Any, float],
    q: float = ONLINE_SWAP_PROBABILITY,
    **limits,
) -> DistributionTable:
    """Exact law of the wrapper's final state when streamed rows are iid from ``stream_law``."""
    from scipy import stats

    half = protocol.n // 2
    acc: dict[Counts, float] = {}
    alphabet = None
    for b in range(half + 1):
        w = float(stats.binom.pmf(b, half, q))
        if w == 0:
            continue
        laws = [reference] * (half + b) + [stream_law] * (half - b)
        table = enumerate_mixture_distribution(protocol, laws, **limits)
        alphabet = table.alphabet
        for k, v in table.items():
            acc[k] = acc.get(k, 0.0) + w * v
    return DistributionTable(alphabet, acc)


def direct_distribution(protocol: ShuffleProtocol, law: Mapping[Any, float], **limits) -> DistributionTable:
    """Exact law of the full protocol's transcript on n iid rows from ``law``."""
    return enumerate_mixture_distribution(protocol, [law] * protocol.n, **limits)


def mix_laws(weight: float, law: Mapping[Any, float], reference: Mapping[Any, float]) -> dict[Any, float]:
    """weight * law + (1 - weight) * reference."""
    keys = set(law) | set(reference)
    return {k: weight * law.get(k, 0.0) + (1 - weight) * reference.get(k, 0.0) for k in keys}


def total_variation(P: DistributionTable | Mapping, Q: DistributionTable | Mapping) -> float:
    p = P.probs if isinstance(P, DistributionTable) else P
    q = Q.probs if isinstance(Q, DistributionTable) else Q
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
