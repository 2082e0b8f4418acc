"""Core shuffle-model types and the execution engine.

A protocol is a pair (randomizer, analyzer) that also knows the user count
``n``. Running it means: every user feeds their row through the randomizer,
the shuffler forgets which user sent which message, and the analyzer sees
only the resulting multiset.

Randomness layout for a run with top-level ``seed``:

* user ``i`` reads from a counter-based stream keyed by ``(seed, "users")``
  and indexed by ``i``, so per-user draws are independent of each other and
  of how many users run;
* public randomness (hash functions, partitions) is keyed by
  ``(seed, "public")``.

The analyzer only ever sees the canonical (sorted) form of the shuffled
messages, which is the same for every permutation, so the engine sorts
directly. ``shuffle`` performs the explicit permutation.
"""
from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DomainError, PreconditionError

Symbol = tuple[int, ...]
MessageBundle = tuple[Symbol, ...]

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: Any) -> int:
    """Derive a 64-bit seed from ``seed`` and a path of labels."""
    payload = json.dumps([int(seed) & _MASK64, *path], default=str).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 finaliser on a uint64 array."""
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def user_uniforms(key: int, users: np.ndarray, width: int) -> np.ndarray:
    """Uniform draws in [0, 1) for each user, ``width`` per user.

    Entry ``[i, j]`` depends only on ``(key, users[i], j)``.
    """
    users = np.asarray(users, dtype=np.uint64)
    if width == 0:
        return np.zeros((users.size, 0))
    base = splitmix64(np.uint64(key & _MASK64) ^ splitmix64(users))
    cols = np.arange(width, dtype=np.uint64) * np.uint64(0xD1B54A32D192ED03)
    bits = splitmix64(base[:, None] + cols[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class PublicRandomness:
    """Shared random string visible to every randomizer and the analyzer."""

    seed: int
    position: int = 0

    def rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, "public", tag, self.position))

    def advance(self, steps: int = 1) -> "PublicRandomness":
        return PublicRandomness(self.seed, self.position + steps)


def _canonical(entries: np.ndarray) -> np.ndarray:
    """Rows of ``entries`` in lexicographic order."""
    if entries.shape[0] <= 1 or entries.shape[1] == 0:
        return entries.copy()
    if entries.shape[1] == 1:
        return np.sort(entries, axis=0)
    if entries.min() >= 0:
        spans = [int(s) + 1 for s in entries.max(axis=0)]
        if np.prod(np.array(spans, dtype=float)) < 2.0**62:
            # pack each row into one integer, sort, and unpack
            key = np.zeros(entries.shape[0], dtype=np.int64)
            for col, span in zip(entries.T, spans):
                key = key * np.int64(span) + col
            key.sort()
            out = np.empty_like(entries)
            for i in range(len(spans) - 1, -1, -1):
                key, out[:, i] = np.divmod(key, np.int64(spans[i]))
            return out
    return entries[np.lexsort(entries.T[::-1])]


class Transcript:
    """Shuffled multiset of messages, stored in lexicographically sorted order."""

    __slots__ = ("_entries", "_hash")

    def __init__(self, entries: np.ndarray | Iterable[Symbol], arity: int | None = None):
        arr = np.asarray(entries if isinstance(entries, np.ndarray) else list(entries), dtype=np.int64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, arity if arity is not None else (1 if arr.size else 0))
        if arr.size == 0 and arity is not None:
            arr = arr.reshape(0, arity)
        arr = _canonical(arr)
        arr.setflags(write=False)
        self._entries = arr
        self._hash = None

    @classmethod
    def from_bundles(cls, bundles: Sequence[MessageBundle]) -> "Transcript":
        return cls([sym for bundle in bundles for sym in bundle])

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def arity(self) -> int:
        return self._entries.shape[1]

    def __len__(self) -> int:
        return self._entries.shape[0]

    def __iter__(self) -> Iterator[Symbol]:
        return (tuple(int(v) for v in row) for row in self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Transcript):
            return NotImplemented
        return self._entries.shape == other._entries.shape and bool(
            np.array_equal(self._entries, other._entries)
        )

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self._entries.shape, self._entries.tobytes()))
        return self._hash

    def __repr__(self) -> str:
        preview = list(self)[:6]
        more = "" if len(self) <= 6 else f", ... ({len(self)} total)"
        return f"Transcript({preview}{more})"

    def symbols(self) -> tuple[Symbol, ...]:
        return tuple(self)

    def counts(self) -> dict[Symbol, int]:
        if len(self) == 0:
            return {}
        uniq, cnt = np.unique(self._entries, axis=0, return_counts=True)
        return {tuple(int(v) for v in row): int(c) for row, c in zip(uniq, cnt)}

    def column(self, index: int) -> np.ndarray:
        return self._entries[:, index]

    def select(self, label: int, column: int = 0) -> "Transcript":
        """Messages whose ``column`` equals ``label``, with that column dropped."""
        rows = self._entries[self._entries[:, column] == label]
        return Transcript(np.delete(rows, column, axis=1), arity=self.arity - 1)


def _as_message_array(bundles: Sequence[MessageBundle | np.ndarray]) -> np.ndarray:
    parts = [np.asarray(b, dtype=np.int64).reshape(len(b), -1) for b in bundles if len(b)]
    if not parts:
        return np.zeros((0, 0), dtype=np.int64)
    return np.concatenate(parts, axis=0)


def permute(bundles: Sequence[MessageBundle | np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Concatenate bundles in order and apply a uniformly random permutation."""
    messages = _as_message_array(bundles)
    return messages[rng.permutation(messages.shape[0])]


def shuffle(bundles: Sequence[MessageBundle | np.ndarray], rng: np.random.Generator) -> Transcript:
    """The shuffler: permute all messages and keep only the multiset."""
    return Transcript(permute(bundles, rng))


@dataclass(frozen=True)
class ProtocolDescriptor:
    """Serializable identity of a protocol instance."""

    randomizer: str
    randomizer_params: Mapping[str, Any]
    analyzer: str
    analyzer_params: Mapping[str, Any]
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise PreconditionError(f"user count must be >= 1, got {self.n}")


class ShuffleProtocol(ABC):
    """A randomizer/analyzer pair with access to the user count ``n``.

    Subclasses implement the randomizer in batch form: ``randomize_batch``
    receives one row per user and a matrix of per-user uniforms (one row per
    user, ``draws`` columns) and returns the concatenated messages together
    with the index of the user that produced each one. Each user's output
    must depend only on their own row and their own uniforms.

    Protocols that support exact auditing also implement ``alphabet`` and
    ``bundle_distribution``.
    """

    name: str = "protocol"
    arity: int = 1
    #: bundle length when it is the same for every input, else ``None``
    fixed_length: int | None = None

    def __init__(self, n: int):
        if int(n) < 1:
            raise PreconditionError(f"user count must be >= 1, got {n}")
        self.n = int(n)

    # -- randomizer ---------------------------------------------------------
    @property
    def draws(self) -> int:
        """Number of uniforms each user consumes."""
        return 1

    def encode(self, dataset: Sequence[Any]) -> np.ndarray:
        """Validate rows and convert them to the array ``randomize_batch`` expects."""
        return np.asarray(dataset)

    @abstractmethod
    def randomize_batch(
        self, rows: np.ndarray, u: np.ndarray, public: PublicRandomness
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(messages, owners)`` with messages of shape (N, arity)."""

    def randomize(self, x: Any, rng: np.random.Generator, public: PublicRandomness | None = None) -> MessageBundle:
        """Run the randomizer for a single user."""
        rows = self.encode([x])
        u = rng.random((1, self.draws))
        messages, _ = self.randomize_batch(rows, u, public or PublicRandomness(0))
        return tuple(tuple(int(v) for v in m) for m in messages)

    # -- analyzer -----------------------------------------------------------
    @abstractmethod
    def analyze(self, transcript: Transcript, public: PublicRandomness) -> Any:
        """Compute the protocol output from the shuffled messages."""

    # -- exact distributions ------------------------------------------------
    def alphabet(self) -> list[Symbol]:
        raise NotImplementedError(f"{self.name} has no finite alphabet declared")

    def bundle_distribution(self, x: Any) -> dict[tuple[int, ...], float]:
        """Distribution of one user's bundle as counts over ``alphabet()``."""
        raise NotImplementedError(f"{self.name} does not expose exact bundle distributions")

    def params(self) -> dict[str, Any]:
        return {}

    def describe(self) -> ProtocolDescriptor:
        return ProtocolDescriptor(self.name, self.params(), self.name, self.params(), self.n)

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}(n={self.n}{', ' if args else ''}{args})"


def check_universe(rows: np.ndarray, size: int, what: str = "row") -> np.ndarray:
    """Integer rows in ``range(size)``; raises DomainError otherwise."""
    arr = np.asarray(rows)
    if arr.size and (not np.issubdtype(arr.dtype, np.integer)):
        if not np.all(np.mod(arr, 1) == 0):
            raise DomainError(f"{what} values must be integers")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64, copy=False).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= size):
        bad = arr[(arr < 0) | (arr >= size)][0]
        raise DomainError(f"{what} value {bad} outside universe [0, {size})")
    return arr


@dataclass
class _Streams:
    users: int
    public: PublicRandomness


def _streams(seed: int) -> _Streams:
    return _Streams(
        users=derive_seed(seed, "users"),
        public=PublicRandomness(derive_seed(seed, "public")),
    )


def _transcript(protocol: ShuffleProtocol, rows: np.ndarray, streams: _Streams) -> Transcript:
    users = np.arange(len(rows))
    u = user_uniforms(streams.users, users, protocol.draws)
    messages, _ = protocol.randomize_batch(rows, u, streams.public)
    messages = np.asarray(messages, dtype=np.int64).reshape(-1, protocol.arity)
    # the canonical sorted form of a multiset does not depend on the order it
    # arrived in, so applying the shuffler's permutation first would be a no-op
    return Transcript(messages, arity=protocol.arity)


def execute(protocol: ShuffleProtocol, dataset: Sequence[Any], seed: int) -> Any:
    """Run the full protocol on ``dataset``; deterministic given ``seed``."""
    rows = protocol.encode(dataset)
    if len(rows) != protocol.n:
        raise PreconditionError(f"dataset has {len(rows)} rows, protocol expects n={protocol.n}")
    streams = _streams(seed)
    return protocol.analyze(_transcript(protocol, rows, streams), streams.public)


def execute_partial(protocol: ShuffleProtocol, dataset: Sequence[Any], participant_count: int, seed: int) -> Transcript:
    """Adversary's view when only the first ``participant_count`` users take part.

    The randomizer keeps the parameters computed for the full ``protocol.n``.
    """
    k = int(participant_count)
    if k < 0 or k > protocol.n:
        raise PreconditionError(f"participant count {k} must lie in [0, n={protocol.n}]")
    if len(dataset) < k:
        raise PreconditionError(f"dataset has {len(dataset)} rows, need at least {k}")
    if k == 0:
        return Transcript(np.zeros((0, protocol.arity), dtype=np.int64), arity=protocol.arity)
    rows = protocol.encode(list(dataset)[:k])
    return _transcript(protocol, rows, _streams(seed))


def transcript_of(protocol: ShuffleProtocol, dataset: Sequence[Any], seed: int) -> Transcript:
    """The shuffled transcript stage of ``execute``."""
    return execute_partial(protocol, dataset, protocol.n, seed)
