"""Two-coin randomized response, de-biasing, and privacy-level calculators.

A response keeps the truthful bit with probability ``p``; otherwise it is
replaced by an independent Bernoulli(``q``) bit.  Sampling each client with
probability ``s`` before answering gives the amplified bounds computed by
:func:`eps_dp` and :func:`eps_zk`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BudgetRequiresSamplingError,
    BudgetUnachievableError,
    InfiniteEpsilonError,
    UndefinedEstimatorError,
    UndefinedLossError,
)
from .query import AnswerVector, Budget

DEFAULT_P = 0.9
DEFAULT_Q = 0.6


@dataclass(frozen=True)
class RRCoins:
    p: float
    q: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValueError(f"coin probabilities must lie in [0, 1]: p={self.p}, q={self.q}")

    @property
    def yes_given_yes(self) -> float:
        return self.p + (1.0 - self.p) * self.q

    @property
    def yes_given_no(self) -> float:
        return (1.0 - self.p) * self.q


@dataclass(frozen=True)
class PrivacyReport:
    eps_rr: float
    eps_dp: float
    eps_zk: float

    @property
    def ratio(self) -> float:
        return self.eps_zk / self.eps_dp


def randomize_bit(truth: int, coins: RRCoins, rng: np.random.Generator) -> int:
    if rng.random() < coins.p:
        return int(bool(truth))
    return int(rng.random() < coins.q)


def randomize_bits(truth: np.ndarray, coins: RRCoins, rng: np.random.Generator) -> np.ndarray:
    """Vectorized per-bit randomized response over an array of 0/1 values."""
    truth = np.asarray(truth, dtype=bool)
    keep = rng.random(truth.shape) < coins.p
    noise = rng.random(truth.shape) < coins.q
    return np.where(keep, truth, noise)


def randomize_vector(truth: AnswerVector, coins: RRCoins, rng: np.random.Generator) -> AnswerVector:
    """Independent coins for every bucket bit; query id and timestamp kept."""
    bits = randomize_bits(np.array(truth.bits, dtype=bool), coins, rng)
    return AnswerVector(tuple(int(b) for b in bits), truth.query_id, truth.timestamp_ms)


def debias_count(r_yes, n, coins: RRCoins):
    """Estimated truthful yes-count from ``r_yes`` observed ones out of ``n``.

    Works elementwise on arrays.  The result is not clamped to [0, n].
    """
    if coins.p <= 0.0:
        raise UndefinedEstimatorError("p = 0 carries no truthful signal; estimator undefined")
    return (r_yes - coins.yes_given_no * n) / coins.p


def accuracy_loss(actual: float, estimate: float) -> float:
    if actual == 0:
        raise UndefinedLossError("accuracy loss is undefined for a zero actual count")
    return abs((actual - estimate) / actual)


def invert_query_counts(estimate, scale):
    """Complementary count: the "no" estimate given a "yes" estimate, or back."""
    return scale - estimate


def eps_rr(coins: RRCoins) -> float:
    if coins.p >= 1.0 or coins.q <= 0.0:
        raise InfiniteEpsilonError(f"randomized response with p={coins.p}, q={coins.q} is not private")
    return math.log(coins.yes_given_yes / coins.yes_given_no)


def _check_s(s: float) -> None:
    if not 0.0 < s <= 1.0:
        raise ValueError(f"sampling probability must lie in (0, 1], got {s}")


def eps_dp(s: float, coins: RRCoins) -> float:
    _check_s(s)
    e_rr = eps_rr(coins)
    if s == 1.0:
        return e_rr
    return math.log1p(s * math.expm1(e_rr))


def eps_zk(s: float, coins: RRCoins) -> float:
    _check_s(s)
    if s >= 1.0:
        raise BudgetRequiresSamplingError("zero-knowledge bound needs s < 1")
    ratio = math.exp(eps_rr(coins))
    return math.log(s * (2.0 - s) / (1.0 - s) * ratio + (1.0 - s))


def privacy_report(s: float, coins: RRCoins) -> PrivacyReport:
    return PrivacyReport(eps_rr(coins), eps_dp(s, coins), eps_zk(s, coins))


def epsilon_for(kind: str, s: float, coins: RRCoins) -> float:
    return eps_zk(s, coins) if kind == "zk" else eps_dp(s, coins)


def invert_budget(budget: Budget, coins: RRCoins) -> float:
    """Sampling probability that spends exactly ``budget.epsilon``.

    Coins are fixed; only ``s`` is solved for.  A dp budget above the
    per-response level is met with s = 1.
    """
    e_rr = eps_rr(coins)
    eps = budget.epsilon
    if budget.kind == "dp":
        if e_rr == 0.0 or eps >= e_rr:
            return 1.0
        return math.expm1(eps) / math.expm1(e_rr)

    a_ = math.exp(e_rr)
    try:
        e_ = math.exp(eps)
    except OverflowError:
        raise BudgetUnachievableError(
            f"eps_zk={eps} is beyond floating-point reach", max_epsilon=_max_zk_epsilon(coins)
        ) from None
    qa = 1.0 - a_
    qb = 2.0 * a_ - 2.0 + e_
    qc = 1.0 - e_
    if qa == 0.0:
        roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        # qa < 0 and qc < 0, so the discriminant is below qb^2 and the
        # cancellation-free form below applies.
        t = -0.5 * (qb + math.copysign(math.sqrt(max(disc, 0.0)), qb))
        roots = [t / qa, qc / t]
    valid = [r for r in roots if 0.0 < r < 1.0]
    if not valid:
        raise BudgetUnachievableError(
            f"no sampling probability in (0, 1) reaches eps_zk={eps}",
            max_epsilon=_max_zk_epsilon(coins),
        )
    assert len(valid) == 1, "eps_zk is monotone in s; at most one root lies in (0, 1)"
    s = valid[0]
    # one Newton polish step in epsilon space
    f = eps_zk(s, coins) - eps
    h = 1e-7 * min(s, 1.0 - s)
    slope = (eps_zk(s + h, coins) - eps_zk(s - h, coins)) / (2.0 * h)
    if slope > 0 and 0.0 < s - f / slope < 1.0:
        s -= f / slope
    return s


def _max_zk_epsilon(coins: RRCoins) -> float:
    return eps_zk(math.nextafter(1.0, 0.0), coins)


def max_sampling_within(budget: Budget, coins: RRCoins) -> float:
    """Largest s whose epsilon does not exceed the budget (float-exact)."""
    s = invert_budget(budget, coins)
    while s > 0.0 and (s >= 1.0 and budget.kind == "zk" or epsilon_for(budget.kind, s, coins) > budget.epsilon):
        s = math.nextafter(s, 0.0)
    return s
