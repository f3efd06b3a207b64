"""Client side: local record store, per-epoch answering, share dispatch."""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .errors import BackpressureError
from .privacy import RRCoins, randomize_bits
from .query import ExecutionParams, Query, Scalar, bucketize, iter_key_values
from .transport import PlainMessage, ShareMessage, encode_frame, split_encrypt

log = logging.getLogger(__name__)


class ShareSink(Protocol):
    def forward(self, share: ShareMessage | bytes) -> None: ...


class LocalStore:
    """Append-only record log, optionally bounded as a ring buffer."""

    def __init__(self, capacity: int | None = None):
        self.records: deque[tuple[int, dict[str, Scalar]]] = deque(maxlen=capacity)

    def append(self, timestamp_ms: int, fields: Mapping[str, Scalar]) -> None:
        if self.records and timestamp_ms < self.records[-1][0]:
            raise ValueError("record timestamps must be non-decreasing")
        self.records.append((timestamp_ms, dict(fields)))

    def between(self, start_ms: int, end_ms: int) -> list[tuple[int, dict[str, Scalar]]]:
        return [r for r in self.records if start_ms <= r[0] < end_ms]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ClientConfig:
    client_id: str
    stratum_id: int = 0
    proxies: Sequence[ShareSink] = ()
    rng_seed: int | np.random.SeedSequence | None = None
    max_retries: int = 3
    backoff_s: float = 0.05


@dataclass(frozen=True)
class EpochOutcome:
    dispatched: bool
    message_id: bytes | None = None
    bytes_sent: int = 0
    dropped: bool = False


def sampling_coin(s: float, rng: np.random.Generator) -> bool:
    return bool(rng.random() < s)


def truthful_bits(store: LocalStore, query: Query, epoch_start_ms: int, epoch_end_ms: int) -> np.ndarray:
    """Bucket bits of the most recent matching record in the epoch (zeros if none)."""
    value = None
    for _, rec in reversed(store.between(epoch_start_ms, epoch_end_ms)):
        if query.predicate.matches(rec):
            value = rec.get(query.buckets.field)
            break
    bits = np.array(bucketize(value, query.buckets), dtype=bool)
    return ~bits if query.inverted else bits


def _send_with_retry(sink: ShareSink, frame: bytes, cfg: ClientConfig,
                     sleep: Callable[[float], None]) -> bool:
    for attempt in range(cfg.max_retries + 1):
        try:
            sink.forward(frame)
            return True
        except (BackpressureError, ConnectionError) as exc:
            if attempt == cfg.max_retries:
                log.warning("dropping share after %d attempts: %s", attempt + 1, exc)
                return False
            sleep(cfg.backoff_s * 2**attempt)
    return False


def answer_epoch(
    store: LocalStore,
    query: Query,
    params: ExecutionParams,
    cfg: ClientConfig,
    epoch_end_ms: int,
    rng: np.random.Generator,
    sleep: Callable[[float], None] = time.sleep,
) -> EpochOutcome:
    """Answer one epoch of ``query`` or stay silent.

    Sampling out sends nothing at all.  Otherwise the truthful bucket bits
    are randomized per bit, XOR-split, and share i goes to proxy i.
    """
    if not sampling_coin(params.s, rng):
        return EpochOutcome(dispatched=False)
    start = epoch_end_ms - query.answer_frequency_ms
    truth = truthful_bits(store, query, start, epoch_end_ms)
    noisy = randomize_bits(truth, RRCoins(params.p, params.q), rng)
    msg = PlainMessage.from_bits(query.query_id, noisy.astype(np.uint8), cfg.stratum_id, epoch_end_ms - 1)
    shares = split_encrypt(msg, len(cfg.proxies), rng)
    sent = 0
    for share, sink in zip(shares, cfg.proxies):
        frame = encode_frame(share)
        if not _send_with_retry(sink, frame, cfg, sleep):
            return EpochOutcome(dispatched=False, message_id=share.message_id, bytes_sent=sent, dropped=True)
        sent += len(frame)
    return EpochOutcome(dispatched=True, message_id=shares[0].message_id, bytes_sent=sent)


class QueryBoard:
    """In-process query broadcast: the aggregator writes, agents read.

    Each entry carries a revision that bumps whenever the aggregator changes
    the query (inversion) or its parameters (feedback).
    """

    def __init__(self):
        self._entries: dict[int, tuple[Query, ExecutionParams, int]] = {}
        self._lock = threading.Lock()

    def publish(self, query: Query, params: ExecutionParams) -> None:
        with self._lock:
            old = self._entries.get(query.query_id)
            rev = old[2] + 1 if old else 0
            self._entries[query.query_id] = (query, params, rev)

    def withdraw(self, query_id: int) -> None:
        with self._lock:
            self._entries.pop(query_id, None)

    def snapshot(self) -> dict[int, tuple[Query, ExecutionParams, int]]:
        with self._lock:
            return dict(self._entries)


def subscribe(source, seen: set[int]) -> Iterator[tuple[Query, ExecutionParams]]:
    """New (query, params) pairs from ``source``; ids in ``seen`` are skipped."""
    for qid, (query, params, _) in sorted(source.snapshot().items()):
        if qid in seen:
            continue
        seen.add(qid)
        yield query, params


@dataclass
class _Active:
    query: Query
    params: ExecutionParams
    revision: int
    next_epoch_end: int


@dataclass
class ClientAgent:
    """One client: a store, a config, a random source, and its subscriptions."""

    cfg: ClientConfig
    store: LocalStore = field(default_factory=LocalStore)
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        self.rng = np.random.default_rng(self.cfg.rng_seed)
        self.active: dict[int, _Active] = {}
        self._seen: set[int] = set()
        self.bytes_sent = 0

    def subscribe(self, source, now_ms: int) -> list[Query]:
        """Pick up new queries and parameter revisions; answering of a new
        query starts with the first full epoch after ``now_ms``."""
        snap = source.snapshot()
        added = []
        for query, params in subscribe(source, self._seen):
            f = query.answer_frequency_ms
            first_boundary = -(-now_ms // f) * f
            rev = snap[query.query_id][2]
            self.active[query.query_id] = _Active(query, params, rev, first_boundary + f)
            added.append(query)
        for qid, (query, params, rev) in snap.items():
            act = self.active.get(qid)
            if act is not None and rev != act.revision:
                act.query, act.params, act.revision = query, params, rev
        for qid in list(self.active):
            if qid not in snap:
                del self.active[qid]
        return added

    def tick(self, now_ms: int) -> list[EpochOutcome]:
        """Answer every epoch of every active query that ended by ``now_ms``."""
        out = []
        for qid in sorted(self.active):
            act = self.active[qid]
            while act.next_epoch_end <= now_ms:
                res = answer_epoch(self.store, act.query, act.params, self.cfg,
                                   act.next_epoch_end, self.rng, self.sleep)
                self.bytes_sent += res.bytes_sent
                out.append(res)
                act.next_epoch_end += act.query.answer_frequency_ms
        return out


def parse_agent_config(text: str) -> dict:
    """Agent config block: client_id, stratum, seed, and repeated ``proxy=host:port``."""
    out: dict = {"proxies": []}
    for key, value in iter_key_values(text):
        if key == "proxy":
            out["proxies"].append(value)
        elif key in ("stratum", "seed", "max_retries"):
            out[key] = int(value)
        else:
            out[key] = value
    return out
