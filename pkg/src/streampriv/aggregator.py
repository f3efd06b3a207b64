"""Aggregator: share joining, sliding windows, estimation, feedback, history."""

from __future__ import annotations

import bisect
import logging
import math
import os
import struct
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .approx import (
    Estimate,
    SrsPlan,
    StratumStat,
    combine_errors,
    rr_count_variance,
    srs_estimate,
    stratified_estimate,
    t_quantile,
)
from .client import QueryBoard
from .errors import (
    CorruptMessageError,
    DuplicateQueryError,
    MalformedShareError,
    MissingSharesError,
    StreamPrivError,
)
from .privacy import DEFAULT_P, DEFAULT_Q, RRCoins, epsilon_for, max_sampling_within
from .query import Budget, ExecutionParams, Query, validate_query
from .transport import (
    PlainMessage,
    ShareMessage,
    decode_frame,
    deserialize_message,
    serialize_message,
    xor_bodies,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShareRecord:
    """What the aggregator sees of one share.  No client identifier exists here."""

    message_id: bytes
    share_index: int
    n_proxies: int
    body: bytes
    relay: str

    @classmethod
    def from_share(cls, share: ShareMessage, relay: str) -> "ShareRecord":
        return cls(share.message_id, share.share_index, share.n_proxies, share.body, relay)


@dataclass
class JoinMetrics:
    joined: int = 0
    expired: int = 0
    corrupt: int = 0
    conflicts: int = 0
    malformed: int = 0
    quarantined: int = 0
    late: int = 0
    replayed: int = 0

    def as_text(self) -> str:
        return "".join(f"{k} {v}\n" for k, v in vars(self).items())


class JoinBuffer:
    """Pairs shares by message id and decrypts complete sets.

    Ids of joined messages are remembered (up to ``remember`` of them) so a
    replayed share set is dropped instead of counted twice.
    """

    def __init__(self, n_proxies: int, metrics: JoinMetrics | None = None, remember: int = 1_000_000):
        self.n_proxies = n_proxies
        self.metrics = metrics or JoinMetrics()
        self.pending: dict[bytes, tuple[int, dict[int, bytes]]] = {}
        self._poisoned: dict[bytes, int] = {}
        self._joined: OrderedDict[bytes, None] = OrderedDict()
        self.remember = remember

    def add(self, rec: ShareRecord, now_ms: int = 0) -> PlainMessage | None:
        if rec.n_proxies != self.n_proxies or not 1 <= rec.share_index <= self.n_proxies:
            self.metrics.malformed += 1
            return None
        mid = rec.message_id
        if mid in self._poisoned:
            return None
        if mid in self._joined:
            self.metrics.replayed += 1
            return None
        first, parts = self.pending.setdefault(mid, (now_ms, {}))
        prev = parts.get(rec.share_index)
        if prev is not None:
            if prev != rec.body:
                log.warning("conflicting duplicate shares for message %s; dropping it", mid.hex())
                self.metrics.conflicts += 1
                del self.pending[mid]
                self._poisoned[mid] = now_ms
            return None
        parts[rec.share_index] = rec.body
        if len(parts) < self.n_proxies:
            return None
        del self.pending[mid]
        self._joined[mid] = None
        if len(self._joined) > self.remember:
            self._joined.popitem(last=False)
        try:
            msg = deserialize_message(xor_bodies(parts[i] for i in range(1, self.n_proxies + 1)))
        except (CorruptMessageError, MalformedShareError):
            self.metrics.corrupt += 1
            return None
        self.metrics.joined += 1
        return msg

    def expire(self, now_ms: int, timeout_ms: int) -> int:
        stale = [m for m, (t, _) in self.pending.items() if now_ms - t > timeout_ms]
        for m in stale:
            del self.pending[m]
        self.metrics.expired += len(stale)
        for m in [m for m, t in self._poisoned.items() if now_ms - t > timeout_ms]:
            del self._poisoned[m]
        return len(stale)


def ingest_and_join(shares: Iterable[ShareRecord], n_proxies: int,
                    buffer: JoinBuffer | None = None, now_ms: int = 0) -> list[PlainMessage]:
    """Join complete share sets from a merged relay stream, in any order."""
    buf = buffer or JoinBuffer(n_proxies)
    out = []
    for rec in shares:
        msg = buf.add(rec, now_ms)
        if msg is not None:
            out.append(msg)
    return out


# ------------------------------------------------------------------ windows


@dataclass(frozen=True)
class Window:
    start_ms: int
    end_ms: int
    messages: tuple[PlainMessage, ...] = ()

    def participation(self) -> Counter:
        return Counter(m.stratum_id for m in self.messages)


class SlidingWindow:
    """Event-time sliding window of length ``w`` advancing by ``delta``.

    Windows end on multiples of ``delta`` offset by ``origin_ms``.  Items
    older than every future window are dropped as late; items a full slide
    past the watermark are quarantined.
    """

    def __init__(self, length_ms: int, slide_ms: int, origin_ms: int = 0):
        if slide_ms > length_ms:
            raise ValueError("slide must not exceed window length")
        self.w = length_ms
        self.delta = slide_ms
        self.next_end = origin_ms + slide_ms
        self.watermark = origin_ms
        self._ts: list[int] = []
        self._items: list[PlainMessage] = []
        self.late = 0
        self.quarantined: list[PlainMessage] = []

    def insert(self, messages: Iterable[PlainMessage]) -> None:
        horizon = max(self.watermark, self.next_end) + self.delta
        for m in messages:
            ts = m.timestamp_ms
            if ts < self.next_end - self.w:
                self.late += 1
            elif ts >= horizon:
                log.warning("quarantining message with future timestamp %d", ts)
                self.quarantined.append(m)
            else:
                i = bisect.bisect_right(self._ts, ts)
                self._ts.insert(i, ts)
                self._items.insert(i, m)

    def advance(self, now_ms: int, incoming: Iterable[PlainMessage] = ()) -> list[Window]:
        self.insert(incoming)
        self.watermark = max(self.watermark, now_ms)
        out = []
        while self.next_end <= now_ms:
            start = self.next_end - self.w
            lo = bisect.bisect_left(self._ts, start)
            hi = bisect.bisect_left(self._ts, self.next_end)
            out.append(Window(start, self.next_end, tuple(self._items[lo:hi])))
            self.next_end += self.delta
            cut = bisect.bisect_left(self._ts, self.next_end - self.w)
            del self._ts[:cut], self._items[:cut]
        return out

    def __len__(self) -> int:
        return len(self._items)


def advance_window(state: SlidingWindow, now_ms: int, incoming: Iterable[PlainMessage] = ()) -> list[Window]:
    return state.advance(now_ms, incoming)


# --------------------------------------------------------------- estimation


@dataclass(frozen=True)
class BucketEstimate:
    index: int
    r_yes: int
    e_yes: float
    estimate: float
    half_width: float
    sampling_half_width: float
    rr_half_width: float
    clamped: float
    complement: float  # population-scale count of the opposite answer

    @property
    def lower(self) -> float:
        return self.estimate - self.half_width

    @property
    def upper(self) -> float:
        return self.estimate + self.half_width


@dataclass(frozen=True)
class WindowEstimate:
    query_id: int
    start_ms: int
    end_ms: int
    participants: int
    population: int
    buckets: tuple[BucketEstimate, ...]
    confidence_level: float
    low_sample: bool = False
    inverted: bool = False
    quarantined: int = 0
    effective_sampling: float | None = None

    @property
    def flags(self) -> str:
        f = [name for name, on in (("low-sample", self.low_sample), ("inverted", self.inverted)) if on]
        return ";".join(f) if f else "-"

    def relative_half_width(self) -> float:
        total = sum(abs(b.estimate) for b in self.buckets)
        if total == 0:
            return math.inf
        return sum(b.half_width for b in self.buckets) / total

    def csv_rows(self) -> list[list]:
        return [[self.start_ms, self.end_ms, b.index, b.r_yes, _fmt(b.e_yes), _fmt(b.estimate),
                 _fmt(b.half_width), _fmt(self.confidence_level), self.flags] for b in self.buckets]


CSV_HEADER = ["window_start_ms", "window_end_ms", "bucket_index", "R_y", "E_y",
              "estimate", "half_width", "confidence_level", "flags"]


def _fmt(x: float) -> str:
    return repr(float(x))


def estimate_bits(
    bits: np.ndarray,
    strata: np.ndarray,
    coins: RRCoins,
    population: Mapping[int, int],
    confidence_level: float = 0.95,
    inverted_mask: np.ndarray | None = None,
    report_inverted: bool = False,
) -> tuple[list[dict], bool]:
    """Per-bucket estimates from an (N, n) matrix of randomized bits.

    ``inverted_mask`` marks rows answered under the inverted query; every row
    is mapped into the reporting sense (``report_inverted``) before scaling.
    Returns the bucket dicts and the low-sample flag.
    """
    bits = np.asarray(bits, dtype=bool)
    n_rows, n_buckets = bits.shape
    strata = np.asarray(strata)
    if inverted_mask is None:
        inverted_mask = np.full(n_rows, report_inverted)
    flip = np.asarray(inverted_mask, dtype=bool) != report_inverted
    noise = coins.yes_given_no
    alpha = 1.0 - confidence_level
    sids = sorted(population)
    total_pop = sum(population.values())
    low = n_rows < 30 or any((strata == sid).sum() == 0 for sid in sids)
    out = []
    for b in range(n_buckets):
        col = bits[:, b]
        r_yes = int(col.sum())
        x = (col - noise) / coins.p
        x = np.where(flip, 1.0 - x, x)
        e_yes = float(x.sum())
        stats = []
        rr_var = 0.0
        for sid in sids:
            xs = x[strata == sid]
            nb = xs.size
            if nb == 0:
                continue
            big = max(population[sid], nb)
            stats.append(StratumStat(big, nb, float(xs.sum()), float(xs.var(ddof=1)) if nb > 1 else 0.0))
            if coins.p < 1.0:
                rate = float(col[strata == sid].mean())
                rr_var += (big / nb) ** 2 * rr_count_variance(coins, nb, rate)
        est, samp_hw, df = _sampling_part(stats, confidence_level)
        rr_hw = 0.0
        if rr_var > 0:
            rr_hw = t_quantile(max(df, 1), 1.0 - alpha / 2.0) * math.sqrt(rr_var)
        hw = combine_errors(samp_hw, rr_hw) if math.isfinite(samp_hw) else math.inf
        out.append(dict(index=b, r_yes=r_yes, e_yes=e_yes, estimate=est, half_width=hw,
                        sampling_half_width=samp_hw, rr_half_width=rr_hw,
                        clamped=min(max(est, 0.0), float(total_pop)),
                        complement=total_pop - est))
    return out, low


def _sampling_part(stats: list[StratumStat], confidence_level: float) -> tuple[float, float, int]:
    if not stats:
        return 0.0, math.inf, 0
    if len(stats) == 1:
        st = stats[0]
        if st.sample == st.population:
            return st.sample_sum, 0.0, max(st.sample - 1, 1)
        if st.sample < 2:
            return st.population / st.sample * st.sample_sum, math.inf, 0
        e = srs_estimate(SrsPlan(st.population, st.sample, confidence_level), st.sample_sum, st.sample_variance)
        return e.value, e.half_width, e.df
    df = sum(st.sample for st in stats) - len(stats)
    if df < 1:
        value = sum(st.population / st.sample * st.sample_sum for st in stats)
        full = all(st.sample == st.population for st in stats)
        return value, 0.0 if full else math.inf, 0
    e: Estimate = stratified_estimate(stats, confidence_level)
    return e.value, e.half_width, e.df


def messages_to_arrays(messages: Sequence[PlainMessage], n_buckets: int) -> tuple[np.ndarray, np.ndarray]:
    if not messages:
        return np.zeros((0, n_buckets), dtype=bool), np.zeros(0, dtype=np.int64)
    width = (n_buckets + 7) // 8
    raw = np.frombuffer(b"".join(m.payload for m in messages), dtype=np.uint8).reshape(len(messages), width)
    bits = np.unpackbits(raw, axis=1)[:, :n_buckets].astype(bool)
    strata = np.fromiter((m.stratum_id for m in messages), dtype=np.int64, count=len(messages))
    return bits, strata


def estimate_window(
    win: Window,
    query: Query,
    params: ExecutionParams,
    population_per_stratum: Mapping[int, int],
    confidence_level: float = 0.95,
    inverted_mask: np.ndarray | None = None,
    effective_sampling: float | None = None,
) -> WindowEstimate:
    """De-biased, population-scaled per-bucket counts with combined bounds.

    Messages whose stratum is not in ``population_per_stratum`` are
    quarantined.  In inverted mode the estimates count "no" answers and
    ``complement`` holds the "yes" count.
    """
    known = [i for i, m in enumerate(win.messages)
             if m.stratum_id in population_per_stratum and m.n_buckets == query.n_buckets]
    quarantined = len(win.messages) - len(known)
    if quarantined:
        log.warning("window %d-%d: quarantined %d messages", win.start_ms, win.end_ms, quarantined)
    msgs = [win.messages[i] for i in known]
    if inverted_mask is not None:
        inverted_mask = np.asarray(inverted_mask, dtype=bool)[known]
    bits, strata = messages_to_arrays(msgs, query.n_buckets)
    buckets, low = estimate_bits(bits, strata, RRCoins(params.p, params.q), population_per_stratum,
                                 confidence_level, inverted_mask, query.inverted)
    return WindowEstimate(
        query_id=query.query_id,
        start_ms=win.start_ms,
        end_ms=win.end_ms,
        participants=len(msgs),
        population=sum(population_per_stratum.values()),
        buckets=tuple(BucketEstimate(**b) for b in buckets),
        confidence_level=confidence_level,
        low_sample=low,
        inverted=query.inverted,
        quarantined=quarantined,
        effective_sampling=effective_sampling,
    )


# ------------------------------------------------------------------ feedback


@dataclass(frozen=True)
class FeedbackPolicy:
    up: float = 1.25
    down: float = 0.9
    deadband: float = 0.5
    s_min: float = 0.01


@dataclass(frozen=True)
class Feedback:
    params: ExecutionParams
    advisory: str | None = None


def adaptive_feedback(est: WindowEstimate, budget: Budget, current: ExecutionParams,
                      policy: FeedbackPolicy = FeedbackPolicy()) -> Feedback:
    """Retune the sampling probability toward the error target.

    Only ``s`` moves; the result never spends more than the budget.
    """
    if budget.error_target is None:
        return Feedback(current)
    coins = RRCoins(current.p, current.q)
    cap = max_sampling_within(budget, coins)
    rel = est.relative_half_width()
    target = budget.error_target
    advisory = None
    s = current.s
    if rel > target:
        want = s * policy.up
        if want > cap:
            s = cap
            advisory = (f"budget conflict: error target {target} needs more sampling than "
                        f"epsilon={budget.epsilon} allows; s held at {cap:.6g}")
            log.warning(advisory)
        else:
            s = want
    elif rel < policy.deadband * target:
        s = max(s * policy.down, min(policy.s_min, cap))
    s = min(s, cap)
    if s == current.s:
        return Feedback(current, advisory)
    new = replace(current, s=s)
    assert epsilon_for(budget.kind, new.s, coins) <= budget.epsilon
    return Feedback(new, advisory)


# ---------------------------------------------------------------- history

_REC_LEN = struct.Struct(">I")
_IDX = struct.Struct(">QQ")
HOUR_MS = 3_600_000


class HistoricalStore:
    """Append-only per-query, per-hour files of serialized messages.

    ``<root>/<query_id>/<hour_start_ms>.bin`` holds u32-length-prefixed
    records and ``.idx`` the (timestamp, offset) pairs pointing into it.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._handles: dict[tuple[int, int], tuple] = {}

    def _paths(self, qid: int, hour: int) -> tuple[Path, Path]:
        d = self.root / str(qid)
        return d / f"{hour}.bin", d / f"{hour}.idx"

    def append(self, msg: PlainMessage) -> None:
        hour = msg.timestamp_ms // HOUR_MS * HOUR_MS
        key = (msg.query_id, hour)
        data = serialize_message(msg)
        with self._lock:
            if key not in self._handles:
                binp, idxp = self._paths(*key)
                binp.parent.mkdir(parents=True, exist_ok=True)
                self._handles[key] = (open(binp, "ab"), open(idxp, "ab"))
            fb, fi = self._handles[key]
            offset = fb.tell()
            fb.write(_REC_LEN.pack(len(data)) + data)
            fi.write(_IDX.pack(msg.timestamp_ms, offset))

    def flush(self) -> None:
        with self._lock:
            for fb, fi in self._handles.values():
                fb.flush()
                fi.flush()

    def close(self) -> None:
        with self._lock:
            for fb, fi in self._handles.values():
                fb.close()
                fi.close()
            self._handles.clear()

    def _hours(self, qid: int, from_ms: int, to_ms: int) -> list[int]:
        d = self.root / str(qid)
        if not d.is_dir():
            return []
        hours = sorted(int(p.stem) for p in d.glob("*.idx"))
        return [h for h in hours if h + HOUR_MS > from_ms and h < to_ms]

    def scan(self, qid: int, from_ms: int, to_ms: int, sampling: float = 1.0,
             rng: np.random.Generator | None = None) -> list[PlainMessage]:
        """Messages with ``from_ms <= ts < to_ms`` in timestamp order.

        With ``sampling`` < 1 each stored message is kept independently with
        that probability, decided from the index alone so skipped records are
        never parsed.
        """
        self.flush()
        out: list[tuple[int, PlainMessage]] = []
        for hour in self._hours(qid, from_ms, to_ms):
            binp, idxp = self._paths(qid, hour)
            idx = np.frombuffer(idxp.read_bytes(), dtype=">u8").reshape(-1, 2)
            ts = idx[:, 0]
            sel = (ts >= from_ms) & (ts < to_ms)
            if sampling < 1.0:
                if rng is None:
                    raise ValueError("sampling below 1 needs a random generator")
                sel &= rng.random(len(ts)) < sampling
            blob = binp.read_bytes()
            for t, off in idx[sel]:
                off = int(off)
                (n,) = _REC_LEN.unpack_from(blob, off)
                out.append((int(t), deserialize_message(blob[off + 4: off + 4 + n])))
        out.sort(key=lambda p: p[0])
        return [m for _, m in out]


def historical_query(
    store: HistoricalStore,
    query: Query,
    params: ExecutionParams,
    time_range: tuple[int, int],
    aggregator_sampling: float,
    population_per_stratum: Mapping[int, int],
    rng: np.random.Generator | None = None,
    confidence_level: float = 0.95,
    inverted_at: Callable[[int], bool] | None = None,
) -> WindowEstimate:
    """Batch estimate over stored answers after a second sampling round.

    The population is the per-stratum answer slots over the range; the
    composed client x aggregator sampling rate is recorded on the result.
    ``inverted_at`` tells which stored answers came from the inverted query.
    """
    start, end = time_range
    if end <= start:
        raise StreamPrivError(f"empty time range [{start}, {end})")
    if not 0.0 < aggregator_sampling <= 1.0:
        raise ValueError("aggregator sampling must lie in (0, 1]")
    msgs = store.scan(query.query_id, start, end, aggregator_sampling, rng)
    mask = None
    if inverted_at is not None:
        mask = np.fromiter((inverted_at(m.timestamp_ms) for m in msgs), dtype=bool, count=len(msgs))
    return estimate_window(Window(start, end, tuple(msgs)), query, params, population_per_stratum,
                           confidence_level, mask, effective_sampling=params.s * aggregator_sampling)


# --------------------------------------------------------------- aggregator


@dataclass
class _Pipeline:
    query: Query
    params: ExecutionParams
    budget: Budget | None
    window: SlidingWindow
    inversions: list[tuple[int, bool]]
    registered: dict[int, int]
    estimates: list[WindowEstimate] = field(default_factory=list)
    advisories: list[str] = field(default_factory=list)

    def inverted_at(self, ts: int) -> bool:
        state = self.inversions[0][1]
        for since, inv in self.inversions:
            if ts >= since:
                state = inv
        return state


class Aggregator:
    """In-process aggregator: publishes queries, joins shares, emits windows."""

    def __init__(
        self,
        board: QueryBoard | None = None,
        coins: RRCoins = RRCoins(DEFAULT_P, DEFAULT_Q),
        n_proxies: int = 2,
        history: HistoricalStore | None = None,
        confidence_level: float = 0.95,
        feedback: FeedbackPolicy = FeedbackPolicy(),
        keep_estimates: int | None = 1000,
    ):
        self.board = board or QueryBoard()
        self.coins = coins
        self.n_proxies = n_proxies
        self.metrics = JoinMetrics()
        self.joiner = JoinBuffer(n_proxies, self.metrics)
        self.history = history
        self.confidence_level = confidence_level
        self.feedback = feedback
        self.keep_estimates = keep_estimates
        self.registered: Counter = Counter()
        self.pipelines: dict[int, _Pipeline] = {}
        self._lock = threading.RLock()

    # -- registration / publishing

    def register_client(self, stratum_id: int = 0, count: int = 1) -> None:
        with self._lock:
            self.registered[stratum_id] += count

    def publish_query(self, query: Query, budget: Budget, now_ms: int = 0) -> ExecutionParams:
        """Turn the budget into (s, p, q) with fixed coins and broadcast."""
        s = max_sampling_within(budget, self.coins)
        params = ExecutionParams(s, self.coins.p, self.coins.q)
        self._install(query, params, budget, now_ms)
        return params

    def publish_with_params(self, query: Query, params: ExecutionParams, now_ms: int = 0,
                            budget: Budget | None = None) -> ExecutionParams:
        self._install(query, params, budget, now_ms)
        return params

    def _install(self, query: Query, params: ExecutionParams, budget: Budget | None, now_ms: int) -> None:
        problems = validate_query(query)
        if problems:
            raise StreamPrivError("invalid query: " + "; ".join(problems))
        with self._lock:
            if query.query_id in self.pipelines:
                raise DuplicateQueryError(f"query {query.query_id} already published")
            origin = now_ms // query.slide_interval_ms * query.slide_interval_ms
            self.pipelines[query.query_id] = _Pipeline(
                query, params, budget,
                SlidingWindow(query.window_length_ms, query.slide_interval_ms, origin),
                [(-(2**63), query.inverted)],
                {k: v for k, v in self.registered.items() if v > 0},
            )
            self.board.publish(query, params)

    def invert(self, query_id: int, now_ms: int) -> Query:
        """Toggle query inversion; answers stamped from ``now_ms`` on use it."""
        with self._lock:
            pipe = self.pipelines[query_id]
            pipe.query = replace(pipe.query, inverted=not pipe.query.inverted)
            pipe.inversions.append((now_ms, pipe.query.inverted))
            self.board.publish(pipe.query, pipe.params)
            return pipe.query

    # -- data path

    def _registered_for(self, pipe: _Pipeline) -> dict[int, int]:
        # fixed at publish time; a query published before any client
        # registered follows the live counts instead
        if pipe.registered:
            return pipe.registered
        return {k: v for k, v in self.registered.items() if v > 0}

    def population(self, query_id: int, span_ms: int | None = None) -> dict[int, int]:
        """Answer slots per stratum over ``span_ms`` (default: one window)."""
        pipe = self.pipelines[query_id]
        q = pipe.query
        span = q.window_length_ms if span_ms is None else span_ms
        epochs = max(1, round(span / q.answer_frequency_ms))
        return {sid: n * epochs for sid, n in self._registered_for(pipe).items()}

    def ingest(self, records: Iterable[ShareRecord], now_ms: int) -> int:
        with self._lock:
            joined = ingest_and_join(records, self.n_proxies, self.joiner, now_ms)
            for msg in joined:
                pipe = self.pipelines.get(msg.query_id)
                if pipe is None:
                    self.metrics.quarantined += 1
                    continue
                if self.history is not None:
                    self.history.append(msg)
                pipe.window.insert([msg])
            return len(joined)

    def ingest_frames(self, frames: Iterable[bytes], relay: str, now_ms: int) -> int:
        recs = []
        for fr in frames:
            try:
                recs.append(ShareRecord.from_share(decode_frame(fr), relay))
            except MalformedShareError:
                self.metrics.malformed += 1
        return self.ingest(recs, now_ms)

    def poll(self, relays: Sequence, now_ms: int) -> int:
        total = 0
        for relay in relays:
            total += self.ingest_frames(relay.drain(), getattr(relay, "name", "relay"), now_ms)
        return total

    def advance(self, now_ms: int) -> list[WindowEstimate]:
        out = []
        with self._lock:
            if self.pipelines:
                timeout = 2 * min(p.query.slide_interval_ms for p in self.pipelines.values())
                self.joiner.expire(now_ms, timeout)
            for qid in sorted(self.pipelines):
                pipe = self.pipelines[qid]
                before = pipe.window.late + len(pipe.window.quarantined)
                for win in pipe.window.advance(now_ms):
                    mask = np.fromiter((pipe.inverted_at(m.timestamp_ms) for m in win.messages),
                                       dtype=bool, count=len(win.messages))
                    est = estimate_window(win, pipe.query, pipe.params, self.population(qid),
                                          self.confidence_level, mask)
                    self.metrics.quarantined += est.quarantined
                    pipe.estimates.append(est)
                    if self.keep_estimates and len(pipe.estimates) > self.keep_estimates:
                        del pipe.estimates[0]
                    out.append(est)
                    if pipe.budget is not None and pipe.budget.error_target is not None:
                        fb = adaptive_feedback(est, pipe.budget, pipe.params, self.feedback)
                        if fb.advisory:
                            pipe.advisories.append(fb.advisory)
                        if fb.params != pipe.params:
                            pipe.params = fb.params
                            self.board.publish(pipe.query, pipe.params)
                after = pipe.window.late + len(pipe.window.quarantined)
                self.metrics.late += after - before
        return out

    # -- analyst views

    def latest(self, query_id: int) -> WindowEstimate | None:
        est = self.pipelines[query_id].estimates
        return est[-1] if est else None

    def historical(self, query_id: int, from_ms: int, to_ms: int, sampling: float,
                   rng: np.random.Generator | None = None) -> WindowEstimate:
        if self.history is None:
            raise StreamPrivError("no historical store configured")
        pipe = self.pipelines[query_id]
        q = pipe.query
        pop = self.population(query_id, to_ms - from_ms)
        return historical_query(self.history, q, pipe.params, (from_ms, to_ms), sampling, pop,
                                rng or np.random.default_rng(), self.confidence_level, pipe.inverted_at)

    def status(self, query_id: int) -> dict:
        pipe = self.pipelines[query_id]
        coins = RRCoins(pipe.params.p, pipe.params.q)
        info = {
            "query_id": query_id,
            "s": pipe.params.s,
            "p": pipe.params.p,
            "q": pipe.params.q,
            "inverted": pipe.query.inverted,
            "windows": len(pipe.estimates),
            "registered": sum(self.registered.values()),
        }
        if 0 < pipe.params.s < 1 and pipe.params.p < 1:
            info["eps_zk"] = epsilon_for("zk", pipe.params.s, coins)
            info["eps_dp"] = epsilon_for("dp", pipe.params.s, coins)
        if pipe.advisories:
            info["advisory"] = pipe.advisories[-1]
        return info
