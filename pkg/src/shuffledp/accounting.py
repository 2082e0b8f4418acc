"""Privacy accounting: exact binomial-mechanism divergence and parameter solvers.

All logarithms are natural.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Hashable, Iterable, Mapping

import numpy as np
from scipy import stats

from .errors import PreconditionError

#: Smallest constant for which the asymptotic binomial-mechanism check never
#: passes a configuration the exact accountant rejects, over the grid in
#: ``KAPPA_CALIBRATION_GRID`` (found by ``calibrate_kappa``; rounded up).
DEFAULT_KAPPA = 3.5

#: eps, delta and p values used to calibrate ``DEFAULT_KAPPA``.
KAPPA_CALIBRATION_GRID = {
    "epsilon": (0.1, 0.25, 0.5, 0.75, 0.9, 0.99),
    "delta": (1e-2, 1e-3, 1e-6, 1e-9),
    "p": (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.95),
}

_EXACT_PMF_LIMIT = 1000


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not (self.epsilon >= 0):
            raise PreconditionError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (0 <= self.delta < 1):
            raise PreconditionError(f"delta must lie in [0, 1), got {self.delta}")

    def split(self, parts: int = 2) -> "PrivacyBudget":
        """Per-part budget under basic composition of ``parts`` mechanisms."""
        return PrivacyBudget(self.epsilon / parts, self.delta / parts)


@dataclass(frozen=True)
class NoiseSpec:
    """Description of an additive noise distribution.

    family is one of ``"binomial"`` (uses ``trials`` and ``p``),
    ``"symmetric_geometric"`` (uses ``alpha``) or ``"polya_difference"``
    (uses ``alpha`` and ``order``, the number of shares summed).
    """

    family: str
    trials: int = 0
    p: float = 0.5
    alpha: float = 0.5
    order: int = 1

    def __post_init__(self) -> None:
        if self.family not in ("binomial", "symmetric_geometric", "polya_difference"):
            raise PreconditionError(f"unknown noise family {self.family!r}")
        if self.trials < 0 or not 0 <= self.p <= 1:
            raise PreconditionError("binomial noise needs trials >= 0 and p in [0, 1]")
        if self.family != "binomial" and not 0 < self.alpha < 1:
            raise PreconditionError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.order < 1:
            raise PreconditionError("order must be >= 1")


@dataclass(frozen=True)
class AccountantConfig:
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self) -> None:
        if not self.kappa > 0:
            raise PreconditionError(f"kappa must be positive, got {self.kappa}")


DEFAULT_CONFIG = AccountantConfig()


def binomial_pmf(trials: int, p: float) -> np.ndarray:
    """PMF of Bin(trials, p) on 0..trials."""
    if trials <= _EXACT_PMF_LIMIT:
        q = 1.0 - p
        return np.array([math.comb(trials, k) * p**k * q ** (trials - k) for k in range(trials + 1)])
    return stats.binom.pmf(np.arange(trials + 1), trials, p)


def hockey_stick_arrays(P: np.ndarray, Q: np.ndarray, epsilon: float) -> float:
    """sum(max(P - e^eps Q, 0)) for aligned probability arrays."""
    with np.errstate(over="ignore", invalid="ignore"):
        scale = math.exp(epsilon) if epsilon < 700 else math.inf
        diff = np.where(Q > 0, P - scale * Q, P)
    return float(np.clip(diff, 0.0, None).sum())


def binomial_delta_exact(trials: int, p: float, epsilon: float, shift: int = 1) -> float:
    """Tight delta of adding Bin(trials, p) noise to a 1-sensitive integer.

    Takes the larger of the two shift directions. ``shift=0`` compares the
    distribution with itself.
    """
    if trials < 0:
        raise PreconditionError(f"trials must be >= 0, got {trials}")
    if epsilon < 0:
        raise PreconditionError(f"epsilon must be >= 0, got {epsilon}")
    if not 0 <= p <= 1:
        raise PreconditionError(f"p must lie in [0, 1], got {p}")
    if trials == 0 or p in (0.0, 1.0):
        return 0.0 if shift == 0 else 1.0
    pmf = binomial_pmf(trials, p)
    s = abs(int(shift))
    P = np.concatenate([np.zeros(s), pmf, np.zeros(s)])
    if s == 0:
        return hockey_stick_arrays(P, P, epsilon)
    up = np.concatenate([np.zeros(2 * s), pmf])
    down = np.concatenate([pmf, np.zeros(2 * s)])
    return max(hockey_stick_arrays(P, up, epsilon), hockey_stick_arrays(P, down, epsilon))


def binomial_bound(budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG) -> float:
    """Right-hand side kappa / eps^2 * log(1/delta) of the asymptotic check."""
    return config.kappa / budget.epsilon**2 * math.log(1.0 / budget.delta)


def binomial_check_asymptotic(
    trials: int, p: float, budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG
) -> bool:
    """Whether trials * min(p, 1-p) >= kappa / eps^2 * log(1/delta)."""
    if not 0 < budget.epsilon < 1:
        raise PreconditionError(f"asymptotic check needs epsilon in (0, 1), got {budget.epsilon}")
    if not 0 < budget.delta < 1:
        raise PreconditionError(f"asymptotic check needs delta in (0, 1), got {budget.delta}")
    return trials * min(p, 1.0 - p) >= binomial_bound(budget, config)


def asymptotic_min_trials(p: float, budget: PrivacyBudget, config: AccountantConfig = DEFAULT_CONFIG) -> int:
    """Smallest trial count that passes ``binomial_check_asymptotic``."""
    need = binomial_bound(budget, config) / min(p, 1.0 - p)
    ell = max(1, math.ceil(need))
    # guard against the float ceiling landing one off the boundary
    while ell > 1 and binomial_check_asymptotic(ell - 1, p, budget, config):
        ell -= 1
    while not binomial_check_asymptotic(ell, p, budget, config):
        ell += 1
    return ell


@lru_cache(maxsize=4096)
def min_noise_trials(epsilon: float, delta: float, p: float = 0.5, limit: int = 1 << 24) -> int:
    """Smallest ``trials`` with ``binomial_delta_exact(trials, p, epsilon) <= delta``.

    Relies on the exact delta being non-increasing in ``trials``.
    """
    if delta <= 0:
        raise PreconditionError("exact binomial noise cannot certify delta = 0")
    hi = 1
    while binomial_delta_exact(hi, p, epsilon) > delta:
        hi *= 2
        if hi > limit:
            raise PreconditionError(f"no trial count below {limit} certifies ({epsilon}, {delta})")
    lo = hi // 2  # fails (or is 0)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if binomial_delta_exact(mid, p, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def _bisect_probability(ok: Callable[[float], bool], lo: float, hi: float, tol: float) -> float:
    """Smallest p in (lo, hi] with ok(p), assuming ok is monotone and ok(hi)."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@lru_cache(maxsize=1024)
def _solve_rr_p(n: int, epsilon: float, delta: float, tol: float) -> float:
    half = n // 2
    # half of delta bounds the chance of too few noisy users, half the mechanism
    need = min_noise_trials(epsilon, delta / 2)
    if need > half:
        return 1.0

    def ok(p: float) -> bool:
        return float(stats.binom.cdf(need - 1, half, p)) <= delta / 2

    if not ok(0.5):
        return 1.0
    return _bisect_probability(ok, 0.0, 0.5, tol)


def solve_rr_p(n: int, budget: PrivacyBudget, tol: float = 1e-6) -> float:
    """Noise probability for shuffled randomized response.

    Returns the smallest p (to ``tol``) such that, when only ``n // 2`` users
    participate, the number of users who send a fair coin is at least the
    exact binomial-mechanism requirement except with probability delta/2,
    and that requirement certifies (epsilon, delta/2). Falls back to p = 1
    (every message is a fair coin) when no p <= 1/2 works.
    """
    if n < 2:
        raise PreconditionError(f"need at least 2 users, got {n}")
    if budget.delta <= 0:
        raise PreconditionError("shuffled randomized response needs delta > 0")
    return _solve_rr_p(int(n), float(budget.epsilon), float(budget.delta), float(tol))


def amplify_subsampling(epsilon: float, n: int, delta: float) -> float:
    """Shuffled epsilon of an eps-local randomizer: 12 eps sqrt(log(1/delta)/n)."""
    if not 0 < epsilon < 0.5:
        raise PreconditionError(f"epsilon must satisfy 0 < epsilon < 1/2, got {epsilon}")
    if not n > 1000:
        raise PreconditionError(f"n must satisfy n > 1000, got {n}")
    # delta = 1/100 itself is accepted: the reference value is quoted there
    if not 0 < delta <= 0.01:
        raise PreconditionError(f"delta must satisfy 0 < delta <= 1/100, got {delta}")
    return 12.0 * epsilon * math.sqrt(math.log(1.0 / delta) / n)


def amplify_blanket(epsilon: float, n: int, delta: float, c: float) -> float:
    """c * min(eps, 1) * e^eps * sqrt(log(1/delta)/n).

    Only the order of growth is known for this bound, so the leading
    constant ``c`` is the caller's choice.
    """
    if epsilon < 0 or not 0 < delta < 1 or n < 1:
        raise PreconditionError("need epsilon >= 0, 0 < delta < 1, n >= 1")
    if c <= 0:
        raise PreconditionError(f"constant c must be positive, got {c}")
    limit = math.sqrt(n / math.log(1.0 / delta))
    if not math.exp(epsilon) < limit:
        raise PreconditionError(f"need e^epsilon < sqrt(n / log(1/delta)) = {limit:.6g}")
    return c * min(epsilon, 1.0) * math.exp(epsilon) * math.sqrt(math.log(1.0 / delta) / n)


def blanket_decompose(
    randomizer: Callable[[Any], Mapping[Hashable, float]], domain: Iterable[Any]
) -> tuple[float, dict[Hashable, float] | None]:
    """Largest input-independent component of a finite-output randomizer.

    Returns ``(gamma, blanket)`` where gamma = sum_y min_x P[R(x) = y] and
    blanket(y) = min_x P[R(x) = y] / gamma; blanket is ``None`` when gamma
    is 0.
    """
    dists = [dict(randomizer(x)) for x in domain]
    if not dists:
        raise PreconditionError("input domain is empty")
    outputs = set().union(*dists)
    floor = {y: min(d.get(y, 0.0) for d in dists) for y in outputs}
    gamma = float(sum(floor.values()))
    if gamma <= 0:
        return 0.0, None
    return gamma, {y: v / gamma for y, v in sorted(floor.items(), key=lambda kv: repr(kv[0])) if v > 0}


def calibrate_kappa(grid: Mapping[str, Iterable[float]] = KAPPA_CALIBRATION_GRID) -> float:
    """Smallest kappa for which the asymptotic check implies the exact one on ``grid``.

    For each (eps, delta, p) the exact accountant's minimal trial count is
    converted to the kappa that would make the asymptotic boundary land on
    it; the maximum over the grid is returned.
    """
    worst = 0.0
    for eps in grid["epsilon"]:
        for delta in grid["delta"]:
            for p in grid["p"]:
                ell = min_noise_trials(eps, delta, p)
                worst = max(worst, ell * min(p, 1 - p) * eps**2 / math.log(1 / delta))
    return worst


def noise_spec_pmf(spec: NoiseSpec, support: np.ndarray) -> np.ndarray:
    """PMF of a NoiseSpec evaluated on integer ``support``."""
    support = np.asarray(support)
    if spec.family == "binomial":
        return stats.binom.pmf(support, spec.trials, spec.p)
    a = spec.alpha
    if spec.family == "symmetric_geometric" or spec.order == 1:
        return (1 - a) / (1 + a) * a ** np.abs(support)
    from .sums import polya_share_pmf

    return polya_share_pmf(a, spec.order, support)
