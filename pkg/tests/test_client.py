import math

import numpy as np
import pytest

from streampriv.client import (
    ClientAgent,
    ClientConfig,
    LocalStore,
    QueryBoard,
    answer_epoch,
    parse_agent_config,
    sampling_coin,
    subscribe,
    truthful_bits,
)
from streampriv.errors import BackpressureError
from streampriv.query import BucketSpec, Condition, ExecutionParams, Predicate, Query
from streampriv.transport import Relay, ShareMessage, decode_frame, join_decrypt

SPEED = BucketSpec.from_edges("speed", [0, 1, 11, 21, 31, 41, 51, 61, 71, 81, 91, 101, math.inf])
EXACT = ExecutionParams(1.0, 1.0, 0.5, test_mode=True)


def speed_query(qid=1, **kw):
    return Query(qid, Predicate(()), SPEED, 1000, 5000, 1000, **kw)


def drain_join(relays):
    shares = [decode_frame(f) for r in relays for f in r.drain()]
    by_id = {}
    for s in shares:
        by_id.setdefault(s.message_id, []).append(s)
    return [join_decrypt(v) for v in by_id.values()]


def test_sampling_coin_rates():
    rng = np.random.default_rng(0)
    assert all(sampling_coin(1.0, rng) for _ in range(1000))
    assert abs(np.mean([sampling_coin(0.6, rng) for _ in range(10**5)]) - 0.6) < 0.01
    assert not any(sampling_coin(1e-6, rng) for _ in range(100))


def test_local_store_order_and_ring():
    store = LocalStore(capacity=2)
    store.append(1, {"a": 1})
    store.append(2, {"a": 2})
    store.append(3, {"a": 3})
    assert [t for t, _ in store.records] == [2, 3]
    with pytest.raises(ValueError):
        store.append(1, {})


def test_speed_fifteen_end_to_end():
    relays = [Relay("r1"), Relay("r2")]
    store = LocalStore()
    store.append(500, {"speed": 15})
    out = answer_epoch(store, speed_query(), EXACT, ClientConfig("c", 3, relays), 1000, np.random.default_rng(1))
    assert out.dispatched and out.message_id
    (msg,) = drain_join(relays)
    assert msg.bits == (0, 0, 1) + (0,) * 9
    assert (msg.stratum_id, msg.timestamp_ms, msg.query_id) == (3, 999, 1)


def test_most_recent_matching_record_wins():
    q = Query(1, Predicate((Condition("city", "=", "SF"),)), SPEED, 1000, 1000, 1000)
    store = LocalStore()
    store.append(100, {"city": "SF", "speed": 5})
    store.append(200, {"city": "SF", "speed": 25})
    store.append(300, {"city": "LA", "speed": 95})
    assert truthful_bits(store, q, 0, 1000).tolist() == list(np.array([0, 0, 0, 1] + [0] * 8, bool))


def test_empty_store_sends_zero_vector():
    relays = [Relay("r1"), Relay("r2")]
    answer_epoch(LocalStore(), speed_query(), EXACT, ClientConfig("c", 0, relays), 1000, np.random.default_rng(2))
    (msg,) = drain_join(relays)
    assert msg.bits == (0,) * 12


def test_inverted_query_negates_truth():
    store = LocalStore()
    store.append(10, {"speed": 15})
    bits = truthful_bits(store, speed_query(inverted=True), 0, 1000)
    assert bits.tolist() == [True, True, False] + [True] * 9


def test_sampled_out_epoch_is_silent():
    relays = [Relay("r1"), Relay("r2")]
    params = ExecutionParams(0.0, 1.0, 0.5, test_mode=True)
    out = answer_epoch(LocalStore(), speed_query(), params, ClientConfig("c", 0, relays), 1000,
                       np.random.default_rng(3))
    assert not out.dispatched and out.bytes_sent == 0
    assert len(relays[0]) == len(relays[1]) == 0


def test_share_i_goes_to_proxy_i():
    relays = [Relay(f"r{i}") for i in range(4)]
    answer_epoch(LocalStore(), speed_query(), EXACT, ClientConfig("c", 0, relays), 1000, np.random.default_rng(4))
    assert [decode_frame(r.drain()[0]).share_index for r in relays] == [1, 2, 3, 4]


def test_no_client_id_on_the_wire():
    relays = [Relay("r1"), Relay("r2")]
    cid = "client-very-unique-name"
    answer_epoch(LocalStore(), speed_query(), EXACT, ClientConfig(cid, 0, relays), 1000, np.random.default_rng(5))
    frames = b"".join(f for r in relays for f in r.drain())
    assert cid.encode() not in frames
    assert set(ShareMessage.__dataclass_fields__) == {"message_id", "share_index", "n_proxies", "body"}


def test_same_seed_same_bytes():
    def run(seed):
        relays = [Relay("r1"), Relay("r2")]
        store = LocalStore()
        store.append(10, {"speed": 42})
        params = ExecutionParams(0.7, 0.5, 0.5)
        agent = ClientAgent(ClientConfig("c", 0, relays, rng_seed=seed), store)
        board = QueryBoard()
        board.publish(speed_query(), params)
        agent.subscribe(board, 0)
        agent.tick(20_000)
        return [r.drain() for r in relays]

    assert run(9) == run(9)
    assert run(9) != run(10)


class FlakyRelay(Relay):
    def __init__(self, failures):
        super().__init__("flaky")
        self.failures = failures

    def forward(self, share):
        if self.failures:
            self.failures -= 1
            raise BackpressureError("full")
        super().forward(share)


def test_retry_with_backoff_then_success():
    sleeps = []
    relays = [FlakyRelay(2), Relay("r2")]
    cfg = ClientConfig("c", 0, relays, max_retries=3, backoff_s=0.01)
    out = answer_epoch(LocalStore(), speed_query(), EXACT, cfg, 1000, np.random.default_rng(6), sleeps.append)
    assert out.dispatched
    assert sleeps == [0.01, 0.02]


def test_retry_exhaustion_drops_epoch():
    relays = [FlakyRelay(10), Relay("r2")]
    cfg = ClientConfig("c", 0, relays, max_retries=2, backoff_s=0.01)
    out = answer_epoch(LocalStore(), speed_query(), EXACT, cfg, 1000, np.random.default_rng(7), lambda _: None)
    assert out.dropped and not out.dispatched


def test_subscribe_is_idempotent():
    board = QueryBoard()
    board.publish(speed_query(1), EXACT)
    seen = set()
    assert [q.query_id for q, _ in subscribe(board, seen)] == [1]
    board.publish(speed_query(1), EXACT)
    board.publish(speed_query(2), EXACT)
    assert [q.query_id for q, _ in subscribe(board, seen)] == [2]


def test_agent_starts_at_next_epoch_and_runs_queries_independently():
    relays = [Relay("r1"), Relay("r2")]
    board = QueryBoard()
    board.publish(speed_query(1), EXACT)
    agent = ClientAgent(ClientConfig("c", 0, relays, rng_seed=1))
    agent.subscribe(board, 1500)
    assert agent.tick(2999) == []
    assert len(agent.tick(3000)) == 1
    board.publish(Query(2, Predicate(()), SPEED, 500, 500, 500), EXACT)
    agent.subscribe(board, 3000)
    outs = agent.tick(4000)
    assert len(outs) == 1 + 2  # query 2 answers epochs ending 3500 and 4000
    msgs = drain_join(relays)
    assert sorted(m.query_id for m in msgs) == [1, 1, 2, 2]


def test_agent_picks_up_revisions_and_withdrawals():
    board = QueryBoard()
    board.publish(speed_query(1), EXACT)
    agent = ClientAgent(ClientConfig("c", 0, [Relay(), Relay()]))
    agent.subscribe(board, 0)
    board.publish(speed_query(1, inverted=True), EXACT)
    agent.subscribe(board, 0)
    assert agent.active[1].query.inverted
    board.withdraw(1)
    agent.subscribe(board, 0)
    assert agent.active == {}


def test_participation_is_binomial():
    relays = [Relay("r1", 10**6), Relay("r2", 10**6)]
    params = ExecutionParams(0.3, 0.9, 0.6)
    board = QueryBoard()
    board.publish(speed_query(), params)
    sent = 0
    for i in range(2000):
        agent = ClientAgent(ClientConfig(f"c{i}", 0, relays, rng_seed=i))
        agent.subscribe(board, 0)
        sent += sum(o.dispatched for o in agent.tick(1000))
    assert abs(sent - 600) < 3 * math.sqrt(2000 * 0.3 * 0.7)


def test_agent_config_parse():
    conf = parse_agent_config("client_id=a\nproxy=h:1\nproxy=h:2\nstratum=3\nseed=9\n")
    assert conf == {"client_id": "a", "proxies": ["h:1", "h:2"], "stratum": 3, "seed": 9}
