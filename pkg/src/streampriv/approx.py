"""Sampling estimators and error bounds.

Sums are scaled up from a sample to its population and bounded with a
Student-t interval.  The t quantile is computed here from the regularized
incomplete beta function so the package carries no scipy dependency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientSampleError
from .privacy import RRCoins, debias_count

log = logging.getLogger(__name__)

LOW_SAMPLE = 30
_EPS = 1e-15
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, 20000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def _lgamma_ratio(a: float, b: float) -> float:
    """log(Gamma(a + b) / Gamma(a)) without cancellation for large ``a``."""
    if a < 20.0:
        return math.lgamma(a + b) - math.lgamma(a)

    def corr(x: float) -> float:
        x2 = x * x
        return 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x * x2 * x2)

    return ((a - 0.5) * math.log1p(b / a) + b * math.log(a + b) - b
            + corr(a + b) - corr(a))


def betainc(a: float, b: float, x: float, xc: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).  ``xc`` is 1 - x when known exactly."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if xc is None:
        xc = 1.0 - x
    if x == 0.0:
        return 0.0
    if xc == 0.0:
        return 1.0
    big, small = (a, b) if a >= b else (b, a)
    log_front = (_lgamma_ratio(big, small) - math.lgamma(small)
                 + a * math.log(x) + b * math.log(xc))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, xc) / b


def _upper_tail(t: float, df: float) -> float:
    """P(T > t) for t >= 0."""
    t2 = t * t
    if t2 < 1.0:
        # x = df / (df + t^2) can round to 1; the tail is near 1/2 here so the
        # complement form loses nothing
        return 0.5 - 0.5 * betainc(0.5, 0.5 * df, t2 / (df + t2), df / (df + t2))
    return 0.5 * betainc(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))


def t_cdf(t: float, df: float) -> float:
    return 1.0 - _upper_tail(t, df) if t > 0 else _upper_tail(-t, df)


def t_pdf(t: float, df: float) -> float:
    log_norm = _lgamma_ratio(0.5 * df, 0.5) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - 0.5 * (df + 1) * math.log1p(t * t / df))


def t_quantile(df: float, prob: float) -> float:
    """Inverse Student-t CDF by bisection followed by Newton polishing."""
    if not df >= 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    if prob == 0.5:
        return 0.0
    target = 1.0 - prob if prob > 0.5 else prob
    sign = 1.0 if prob > 0.5 else -1.0

    lo, hi = 0.0, 1.0
    while _upper_tail(hi, df) > target:
        lo, hi = hi, hi * 2.0
    while hi - lo > 1e-4 * hi:
        mid = 0.5 * (lo + hi)
        if _upper_tail(mid, df) > target:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    for _ in range(50):
        nt = t + (_upper_tail(t, df) - target) / t_pdf(t, df)
        if not lo <= nt <= hi:
            nt = 0.5 * (lo + hi)
        if _upper_tail(nt, df) > target:
            lo = nt
        else:
            hi = nt
        done = abs(nt - t) <= 1e-14 * nt
        t = nt
        if done:
            break
    return sign * t


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class SrsPlan:
    population: int
    sample: int
    confidence_level: float = 0.95

    def __post_init__(self):
        if not 1 <= self.sample <= self.population:
            raise ValueError(f"need 1 <= sample <= population, got {self.sample}/{self.population}")


@dataclass(frozen=True)
class StratumStat:
    population: int  # B_i
    sample: int  # b_i
    sample_sum: float
    sample_variance: float  # r_i^2, unbiased (n-1) denominator

    def __post_init__(self):
        if not 1 <= self.sample <= self.population:
            raise ValueError(f"need 1 <= b <= B, got {self.sample}/{self.population}")
        if self.sample_variance < 0:
            raise ValueError("sample variance must be non-negative")

    @classmethod
    def from_values(cls, population: int, values: Sequence[float]) -> "StratumStat":
        v = np.asarray(values, dtype=float)
        var = float(v.var(ddof=1)) if v.size > 1 else 0.0
        return cls(population, int(v.size), float(v.sum()), var)


@dataclass(frozen=True)
class Estimate:
    value: float
    half_width: float
    confidence_level: float
    df: int
    variance: float = 0.0
    low_sample: bool = False

    @property
    def lower(self) -> float:
        return self.value - self.half_width

    @property
    def upper(self) -> float:
        return self.value + self.half_width


def _stratum_variance(big: int, small: int, r2: float) -> float:
    return big * (big - small) * r2 / small


def _estimate(strata: Sequence[StratumStat], df: int, confidence_level: float) -> Estimate:
    value = sum(st.population / st.sample * st.sample_sum for st in strata)
    var = sum(_stratum_variance(st.population, st.sample, st.sample_variance) for st in strata)
    half = t_quantile(df, 1.0 - (1.0 - confidence_level) / 2.0) * math.sqrt(var) if var > 0 else 0.0
    low = sum(st.sample for st in strata) < LOW_SAMPLE
    return Estimate(value, half, confidence_level, df, var, low)


def srs_estimate(plan: SrsPlan, sample_sum: float, sample_variance: float) -> Estimate:
    """Population sum from a simple random sample, with a t-based bound."""
    if plan.sample < 2:
        raise InsufficientSampleError("a simple random sample needs at least 2 members")
    stratum = StratumStat(plan.population, plan.sample, sample_sum, sample_variance)
    return _estimate([stratum], plan.sample - 1, plan.confidence_level)


def stratified_estimate(strata: Sequence[StratumStat], confidence_level: float = 0.95) -> Estimate:
    if not strata:
        raise InsufficientSampleError("no strata")
    df = sum(st.sample for st in strata) - len(strata)
    if df < 1:
        raise InsufficientSampleError(f"stratified sample has {df} degrees of freedom")
    return _estimate(strata, df, confidence_level)


def proportional_allocation(
    rates: Sequence[float] | Mapping[int, float],
    s: float,
    overrides: Mapping[int, float] | None = None,
) -> list[float]:
    """Per-stratum sampling probabilities.

    With a common ``s`` every stratum's expected sample is already
    proportional to its arrival rate; ``overrides`` pins individual strata.
    Sequence input numbers the strata 1..n.
    """
    items = list(rates.items()) if isinstance(rates, Mapping) else list(enumerate(rates, 1))
    if not items:
        raise ValueError("no strata rates given")
    if any(r <= 0 for _, r in items):
        raise ValueError("arrival rates must be positive")
    if not 0.0 < s <= 1.0:
        raise ValueError(f"sampling probability must lie in (0, 1], got {s}")
    overrides = overrides or {}
    out = []
    for sid, _ in items:
        si = overrides.get(sid, s)
        if not 0.0 < si <= 1.0:
            raise ValueError(f"override for stratum {sid} out of range: {si}")
        out.append(si)
    return out


def expected_samples(rates: Sequence[float], probs: Sequence[float]) -> list[float]:
    return [r * p for r, p in zip(rates, probs)]


def combine_errors(sampling_half_width: float, rr_half_width: float) -> float:
    if sampling_half_width < 0 or rr_half_width < 0:
        raise ValueError("half-widths must be non-negative")
    return sampling_half_width + rr_half_width


# ------------------------------------------------------ randomization error


def rr_count_variance(coins: RRCoins, n: int, pilot_rate: float | None = None) -> float:
    """Variance of the de-biased count over ``n`` fixed truthful answers.

    Without a pilot the observed-bit variance is bounded by the worse of the
    two response mixtures (never more than n/4); a pilot observed-yes rate r
    gives n*r*(1-r), capped by that bound.
    """
    if coins.p <= 0.0:
        raise ValueError("p must be positive")
    hi, lo = coins.yes_given_yes, coins.yes_given_no
    per = max(hi * (1 - hi), lo * (1 - lo))
    if pilot_rate is not None:
        per = min(per, pilot_rate * (1.0 - pilot_rate))
    return n * per / coins.p**2


def rr_error_halfwidth(
    coins: RRCoins, n: int, confidence_level: float = 0.95, pilot_rate: float | None = None
) -> float:
    """Half-width, in counts, of the randomization error over ``n`` responses."""
    if n < 1:
        raise ValueError("need at least one response")
    var = rr_count_variance(coins, n, pilot_rate)
    if var == 0.0:
        return 0.0
    z = t_quantile(max(n - 1, 1), 1.0 - (1.0 - confidence_level) / 2.0)
    return z * math.sqrt(var)


def calibrate_rr_error(
    coins: RRCoins,
    n: int,
    yes_fraction: float,
    rng: np.random.Generator,
    warmup_runs: int = 20,
    confidence_level: float = 0.95,
) -> tuple[float, float]:
    """Warm-up replay of randomized response without sampling.

    Runs ``warmup_runs`` synthetic windows of ``n`` answers with the given
    truthful-yes fraction and returns (half-width in counts, mean accuracy
    loss).  The half-width is the ``confidence_level`` quantile of the
    absolute de-bias error.
    """
    actual = int(round(yes_fraction * n))
    truth = np.zeros(n, dtype=bool)
    truth[:actual] = True
    errors = np.empty(warmup_runs)
    for i in range(warmup_runs):
        keep = rng.random(n) < coins.p
        noise = rng.random(n) < coins.q
        observed = int(np.where(keep, truth, noise).sum())
        errors[i] = abs(debias_count(observed, n, coins) - actual)
    half = float(np.quantile(errors, confidence_level))
    loss = float(errors.mean() / actual) if actual else float("nan")
    log.debug("rr warm-up: n=%d runs=%d half=%.3f loss=%.4f", n, warmup_runs, half, loss)
    return half, loss
