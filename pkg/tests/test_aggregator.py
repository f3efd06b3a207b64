import math
import time
from dataclasses import fields, replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from streampriv.aggregator import (
    Aggregator,
    HistoricalStore,
    JoinBuffer,
    ShareRecord,
    SlidingWindow,
    Window,
    WindowEstimate,
    adaptive_feedback,
    advance_window,
    estimate_bits,
    estimate_window,
    historical_query,
    ingest_and_join,
)
from streampriv.errors import DuplicateQueryError, StreamPrivError
from streampriv.privacy import RRCoins, eps_rr, eps_zk
from streampriv.query import Budget, BucketSpec, ExecutionParams, Predicate, Query
from streampriv.transport import PlainMessage, ShareMessage, serialize_message, split_encrypt

EXACT = ExecutionParams(1.0, 1.0, 0.5, test_mode=True)


def one_bucket_query(qid=1, f=1000, w=1000, delta=1000, inverted=False):
    return Query(qid, Predicate(()), BucketSpec.from_edges("v", [0, 1]), f, w, delta, inverted)


def records_for(msg, n, rng, relays=("r1", "r2", "r3")):
    return [ShareRecord.from_share(s, relays[s.share_index - 1]) for s in split_encrypt(msg, n, rng)]


# -------------------------------------------------------------------- join


def test_share_record_carries_no_client_identifier():
    names = {f.name for f in fields(ShareRecord)}
    assert names == {"message_id", "share_index", "n_proxies", "body", "relay"}


def test_join_is_order_insensitive():
    rng = np.random.default_rng(0)
    msg = PlainMessage.from_bits(5, [1, 0, 1], 2, 77)
    recs = records_for(msg, 3, rng)
    for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        assert ingest_and_join([recs[i] for i in order], 3) == [msg]


def test_lost_share_expires():
    rng = np.random.default_rng(1)
    buf = JoinBuffer(2)
    recs = records_for(PlainMessage.from_bits(1, [1]), 2, rng)
    assert ingest_and_join(recs[:1], 2, buf, now_ms=0) == []
    assert buf.expire(1000, 2000) == 0
    assert buf.expire(2001, 2000) == 1
    assert buf.metrics.expired == 1 and not buf.pending


def test_many_interleaved_messages_round_trip():
    rng = np.random.default_rng(2)
    msgs = [PlainMessage.from_bits(i % 7, rng.integers(0, 2, 1 + i % 40).tolist(), i % 3, i) for i in range(10**4)]
    recs = [r for m in msgs for r in records_for(m, 3, rng)]
    order = rng.permutation(len(recs))
    out = ingest_and_join([recs[i] for i in order], 3)
    assert len(out) == 10**4
    assert sorted(serialize_message(m) for m in out) == sorted(serialize_message(m) for m in msgs)


def test_conflicting_duplicate_drops_message():
    rng = np.random.default_rng(3)
    buf = JoinBuffer(2)
    a, b = records_for(PlainMessage.from_bits(1, [1]), 2, rng)
    forged = replace(a, body=bytes(x ^ 1 for x in a.body))
    assert ingest_and_join([a, forged, b], 2, buf) == []
    assert buf.metrics.conflicts == 1 and buf.metrics.joined == 0


def test_identical_duplicate_is_harmless():
    rng = np.random.default_rng(4)
    a, b = records_for(PlainMessage.from_bits(1, [1]), 2, rng)
    assert len(ingest_and_join([a, a, b], 2)) == 1


def test_replayed_message_dropped():
    rng = np.random.default_rng(12)
    buf = JoinBuffer(2)
    recs = records_for(PlainMessage.from_bits(1, [1]), 2, rng)
    assert len(ingest_and_join(recs + recs, 2, buf)) == 1
    assert buf.metrics.replayed == 2 and buf.metrics.joined == 1


def test_corrupt_counted():
    rng = np.random.default_rng(5)
    buf = JoinBuffer(2)
    a, b = records_for(PlainMessage.from_bits(1, [1, 0, 1]), 2, rng)
    bad = replace(b, body=b.body[:3] + bytes([b.body[3] ^ 0x10]) + b.body[4:])
    assert ingest_and_join([a, bad], 2, buf) == []
    assert buf.metrics.corrupt == 1


def test_wrong_proxy_count_is_malformed():
    rng = np.random.default_rng(6)
    buf = JoinBuffer(2)
    ingest_and_join(records_for(PlainMessage.from_bits(1, [1]), 3, rng), 2, buf)
    assert buf.metrics.malformed == 3


# ------------------------------------------------------------------ windows


def msg_at(ts, bits=(1,), stratum=0, qid=1):
    return PlainMessage.from_bits(qid, list(bits), stratum, ts)


def stream(win, msgs, last):
    """Feed messages one slide at a time, the way a live aggregator sees them."""
    out = []
    for end in range(win.next_end, last + 1, win.delta):
        out += win.advance(end, [m for m in msgs if end - win.delta <= m.timestamp_ms < end])
    return out


def test_ten_minute_window_every_minute():
    minute = 60_000
    win = SlidingWindow(10 * minute, minute)
    stamps = list(range(0, 30 * minute, 7_000))
    emitted = stream(win, [msg_at(t) for t in stamps], 30 * minute)
    assert [w.end_ms for w in emitted] == [k * minute for k in range(1, 31)]
    for w in emitted:
        assert w.end_ms - w.start_ms == 10 * minute
        members = sorted(m.timestamp_ms for m in w.messages)
        assert members == [t for t in stamps if w.start_ms <= t < w.end_ms]


def test_tumbling_windows_are_disjoint():
    win = SlidingWindow(1000, 1000)
    emitted = []
    for end in range(1000, 5001, 1000):
        emitted += advance_window(win, end, [msg_at(t) for t in range(end - 1000, end, 100)])
    seen = [m.timestamp_ms for w in emitted for m in w.messages]
    assert len(seen) == len(set(seen)) == 50


def test_empty_window_flagged_low_sample():
    (w,) = SlidingWindow(1000, 1000).advance(1000)
    est = estimate_window(w, one_bucket_query(), EXACT, {0: 100})
    assert est.participants == 0 and est.low_sample
    assert est.buckets[0].half_width == math.inf


def test_future_items_quarantined_and_late_items_counted():
    win = SlidingWindow(1000, 1000)
    win.advance(3000)
    win.insert([msg_at(5000), msg_at(500), msg_at(3500)])
    assert [m.timestamp_ms for m in win.quarantined] == [5000]
    assert win.late == 1
    assert len(win) == 1


@given(st.integers(1, 8), st.integers(1, 500), st.lists(st.integers(0, 20_000), max_size=60))
def test_window_conservation(k, delta, stamps):
    w = k * delta
    last = 20_000 + w + delta
    last -= last % delta
    win = SlidingWindow(w, delta)
    emitted = stream(win, [msg_at(t, stratum=i) for i, t in enumerate(stamps)], last)
    counts = {}
    for e in emitted:
        for m in e.messages:
            counts[m.stratum_id] = counts.get(m.stratum_id, 0) + 1
    for i, t in enumerate(stamps):
        expected = oracles.windows_containing(t, w, delta, last)
        assert len(expected) == k
        assert counts.get(i, 0) == len(expected)


# --------------------------------------------------------------- estimation


def test_census_without_randomization_is_exact():
    msgs = tuple(msg_at(10, [int(i < 60)]) for i in range(100))
    est = estimate_window(Window(0, 1000, msgs), one_bucket_query(), EXACT, {0: 100})
    b = est.buckets[0]
    assert (b.r_yes, b.e_yes, b.estimate, b.half_width) == (60, 60.0, 60.0, 0.0)


def test_coverage_srs_with_randomization():
    rng = np.random.default_rng(7)
    coins = RRCoins(0.3, 0.6)
    truth = np.zeros(10_000, bool)
    truth[:6000] = True
    hits = 0
    for _ in range(1000):
        sent = rng.random(10_000) < 0.6
        keep = rng.random(sent.sum()) < coins.p
        bits = np.where(keep, truth[sent], rng.random(sent.sum()) < coins.q)
        (b,), _ = estimate_bits(bits[:, None], np.zeros(sent.sum(), int), coins, {0: 10_000})
        hits += abs(b["estimate"] - 6000) <= b["half_width"]
    assert hits >= 900


def test_unknown_stratum_quarantined():
    msgs = (msg_at(1, [1], stratum=0), msg_at(1, [1], stratum=9), msg_at(1, [0], stratum=0))
    est = estimate_window(Window(0, 1000, msgs), one_bucket_query(), EXACT, {0: 2})
    assert est.quarantined == 1 and est.participants == 2
    assert est.buckets[0].estimate == 1.0


def test_debias_sum_close_to_participants():
    rng = np.random.default_rng(8)
    coins = RRCoins(0.5, 0.5)
    cats = rng.integers(0, 5, 5000)
    truth = cats[:, None] == np.arange(5)[None, :]
    bits = np.where(rng.random(truth.shape) < coins.p, truth, rng.random(truth.shape) < coins.q)
    buckets, _ = estimate_bits(bits, np.zeros(5000, int), coins, {0: 5000})
    total = sum(b["e_yes"] for b in buckets)
    assert abs(total - 5000) <= sum(b["half_width"] for b in buckets)


def test_inverted_reports_no_counts_with_complement():
    msgs = tuple(msg_at(1, [int(i >= 10)]) for i in range(100))  # inverted truth: 90 ones
    est = estimate_window(Window(0, 1000, msgs), one_bucket_query(inverted=True), EXACT, {0: 100})
    b = est.buckets[0]
    assert est.inverted and est.flags == "inverted"
    assert (b.estimate, b.complement) == (90.0, 10.0)


def test_mixed_window_after_inversion_maps_rows():
    # 50 answers given natively (yes = bit), 50 under inversion (bit = no)
    native = [msg_at(1, [int(i < 20)]) for i in range(50)]
    inverted = [msg_at(600, [int(i >= 20)]) for i in range(50)]
    mask = np.array([False] * 50 + [True] * 50)
    win = Window(0, 1000, tuple(native + inverted))
    est = estimate_window(win, one_bucket_query(inverted=True), EXACT, {0: 100}, inverted_mask=mask)
    assert est.buckets[0].estimate == 60.0  # no-count: 30 + 30


def test_stratified_path_used_for_several_strata():
    msgs = tuple(msg_at(1, [1], stratum=s) for s in (1, 1, 2, 2, 2))
    est = estimate_window(Window(0, 1000, msgs), one_bucket_query(), EXACT, {1: 4, 2: 6})
    assert est.buckets[0].estimate == pytest.approx(10.0)
    assert est.buckets[0].half_width == 0.0  # every sampled answer identical


def test_clamped_presentation():
    coins = RRCoins(0.5, 0.5)
    bits = np.zeros((40, 1), bool)
    (b,), _ = estimate_bits(bits, np.zeros(40, int), coins, {0: 40})
    assert b["estimate"] < 0 and b["clamped"] == 0.0


def test_csv_rows_shape():
    msgs = tuple(msg_at(1, [1]) for _ in range(3))
    est = estimate_window(Window(0, 1000, msgs), one_bucket_query(), EXACT, {0: 3})
    (row,) = est.csv_rows()
    assert row[:4] == [0, 1000, 0, 3] and row[-1] == "low-sample"


# ----------------------------------------------------------------- feedback


def fake_estimate(value, half_width):
    from streampriv.aggregator import BucketEstimate
    b = BucketEstimate(0, 0, value, value, half_width, half_width, 0.0, value, 0.0)
    return WindowEstimate(1, 0, 1000, 100, 100, (b,), 0.95)


def test_feedback_lowers_s_when_comfortably_accurate():
    coins = RRCoins(0.9, 0.6)
    budget = Budget("zk", 5.0, error_target=0.05)
    cur = ExecutionParams(0.3, 0.9, 0.6)
    new = adaptive_feedback(fake_estimate(100, 2), budget, cur).params
    assert new.s == pytest.approx(0.27)
    assert eps_zk(new.s, coins) <= budget.epsilon


def test_feedback_decrease_bounded_below():
    budget = Budget("zk", 5.0, error_target=0.05)
    cur = ExecutionParams(0.01, 0.9, 0.6)
    assert adaptive_feedback(fake_estimate(100, 0.1), budget, cur).params.s == 0.01


def test_feedback_raises_and_clamps_with_advisory():
    coins = RRCoins(0.9, 0.6)
    budget = Budget("zk", 3.0, error_target=0.01)
    cur = ExecutionParams(0.1, 0.9, 0.6)
    up = adaptive_feedback(fake_estimate(100, 5), budget, cur)
    assert up.params.s == pytest.approx(0.125) and up.advisory is None
    s = 0.1
    advisory = None
    for _ in range(30):
        fb = adaptive_feedback(fake_estimate(100, 5), budget, ExecutionParams(s, 0.9, 0.6))
        s, advisory = fb.params.s, fb.advisory or advisory
        assert eps_zk(s, coins) <= budget.epsilon
    assert advisory and "budget conflict" in advisory


def test_feedback_deadband():
    budget = Budget("zk", 5.0, error_target=0.05)
    cur = ExecutionParams(0.3, 0.9, 0.6)
    assert adaptive_feedback(fake_estimate(100, 5), budget, cur).params is cur
    assert adaptive_feedback(fake_estimate(100, 3), budget, cur).params is cur


@given(st.floats(0.5, 8.0), st.floats(0.001, 0.5), st.floats(0.01, 0.99), st.floats(0, 50))
def test_feedback_never_exceeds_budget(eps, target, s0, hw):
    coins = RRCoins(0.9, 0.6)
    budget = Budget("zk", eps, error_target=target)
    cap = ExecutionParams(min(s0, 0.99), 0.9, 0.6)
    if eps_zk(cap.s, coins) > eps:
        return
    new = adaptive_feedback(fake_estimate(100, hw), budget, cap).params
    assert eps_zk(new.s, coins) <= eps
    assert (new.p, new.q) == (0.9, 0.6)


# --------------------------------------------------------------- publishing


def test_publish_zk_ln5():
    agg = Aggregator(coins=RRCoins(0.5, 0.5))
    params = agg.publish_query(one_bucket_query(), Budget("zk", math.log(5)))
    assert params.s == pytest.approx(0.5, abs=1e-12)
    assert agg.board.snapshot()[1][1] == params


def test_publish_duplicate_rejected():
    agg = Aggregator()
    agg.publish_query(one_bucket_query(), Budget("zk", 1.0))
    with pytest.raises(DuplicateQueryError):
        agg.publish_query(one_bucket_query(), Budget("zk", 1.0))


def test_publish_dp_at_rr_level_gives_full_sampling():
    coins = RRCoins(0.9, 0.6)
    agg = Aggregator(coins=coins)
    assert agg.publish_query(one_bucket_query(), Budget("dp", eps_rr(coins))).s == 1.0


def test_publish_rejects_invalid_query():
    with pytest.raises(StreamPrivError):
        Aggregator().publish_query(one_bucket_query(w=500), Budget("zk", 1.0))


def test_population_fixed_at_publish():
    agg = Aggregator()
    agg.register_client(0, 10)
    agg.publish_query(one_bucket_query(w=3000), Budget("zk", 1.0))
    agg.register_client(0, 5)
    assert agg.population(1) == {0: 30}


# --------------------------------------------------------------- historical


def filled_store(tmp_path, n, yes, rng, coins=None, qid=1):
    store = HistoricalStore(tmp_path)
    truth = np.zeros(n, bool)
    truth[: int(yes * n)] = True
    rng.shuffle(truth)
    bits = truth if coins is None else np.where(rng.random(n) < coins.p, truth, rng.random(n) < coins.q)
    for i, b in enumerate(bits):
        store.append(msg_at(i % 100_000, [int(b)], qid=qid))
    store.flush()
    return store


def test_historical_identity_sampling_matches_streaming(tmp_path):
    rng = np.random.default_rng(9)
    agg = Aggregator(coins=RRCoins(0.9, 0.6), history=HistoricalStore(tmp_path))
    agg.register_client(0, 50)
    q = one_bucket_query(f=1000, w=4000, delta=4000)
    params = agg.publish_with_params(q, ExecutionParams(0.8, 0.9, 0.6))
    for t in range(0, 4000, 1000):
        for i in range(50):
            if rng.random() < 0.8:
                m = msg_at(t + 999, [int(rng.random() < 0.3)])
                agg.ingest(records_for(m, 2, rng), t)
    (streamed,) = agg.advance(4000)
    batch = agg.historical(1, 0, 4000, 1.0)
    assert batch.buckets == streamed.buckets
    assert batch.effective_sampling == params.s


def test_historical_scan_in_timestamp_order(tmp_path):
    store = HistoricalStore(tmp_path)
    for ts in (3_700_000, 10, 5, 3_600_001):
        store.append(msg_at(ts))
    got = [m.timestamp_ms for m in store.scan(1, 0, 10**7)]
    assert got == [5, 10, 3_600_001, 3_700_000]
    assert [m.timestamp_ms for m in store.scan(1, 6, 3_600_002)] == [10, 3_600_001]
    assert sorted(p.name for p in (tmp_path / "1").iterdir()) == ["0.bin", "0.idx", "3600000.bin", "3600000.idx"]


def test_historical_empty_range(tmp_path):
    with pytest.raises(StreamPrivError):
        historical_query(HistoricalStore(tmp_path), one_bucket_query(), EXACT, (10, 10), 1.0, {0: 1})


@pytest.mark.slow
def test_historical_sampling_speedup_and_loss(tmp_path):
    rng = np.random.default_rng(10)
    coins = RRCoins(0.9, 0.6)
    params = ExecutionParams(1.0, 0.9, 0.6)
    store = filled_store(tmp_path, 10**5, 0.6, rng, coins)
    q = one_bucket_query()
    pop = {0: 10**5}

    def timed(frac, seed):
        t0 = time.perf_counter()
        est = historical_query(store, q, params, (0, 10**5), frac, pop, np.random.default_rng(seed))
        return time.perf_counter() - t0, abs(est.buckets[0].estimate - 60_000) / 60_000

    full = [timed(1.0, s) for s in range(3)]
    part = [timed(0.6, s) for s in range(10)]
    speedup = min(t for t, _ in full) / min(t for t, _ in part)
    added_loss = np.mean([l for _, l in part]) - np.mean([l for _, l in full])
    assert speedup >= 1.4
    assert added_loss < 0.01


def test_composed_sampling_matches_two_stage():
    rng = np.random.default_rng(11)
    n, u, v = 10**5, 0.6, 0.7
    two_stage = (rng.random(n) < u) & (rng.random(n) < v)
    composed = rng.random(n) < u * v
    p1, p2 = two_stage.mean(), composed.mean()
    pooled = (p1 + p2) / 2
    z = (p1 - p2) / math.sqrt(pooled * (1 - pooled) * 2 / n)
    assert abs(z) < 2.576
