import math

import numpy as np
import pytest

from streampriv.aggregator import CSV_HEADER, Aggregator, HistoricalStore, Window, estimate_window
from streampriv.cli import main, parse_values, render_histogram
from streampriv.client import ClientAgent, ClientConfig, LocalStore
from streampriv.privacy import RRCoins, eps_zk
from streampriv.query import Budget, BucketSpec, ExecutionParams, Predicate, Query, format_query_block
from streampriv.service import AggregatorService, ControlClient, ControlServer, ProtocolError, handle_command
from streampriv.transport import PlainMessage, Relay, RelayClient, RelayServer

DISTANCE = BucketSpec.from_edges("distance", list(range(11)) + [math.inf])


def distance_query(qid=1, inverted=False):
    return Query(qid, Predicate(()), DISTANCE, 1000, 1000, 1000, inverted)


class Clock:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


# ------------------------------------------------------------ line protocol


def test_publish_echoes_params():
    agg = Aggregator(coins=RRCoins(0.9, 0.6))
    body = format_query_block(distance_query(), Budget("zk", 2.0))
    lines = handle_command(agg, "PUBLISH", body, Clock())
    kv = dict(ln.split("=", 1) for ln in lines)
    assert (float(kv["p"]), float(kv["q"])) == (0.9, 0.6)
    assert eps_zk(float(kv["s"]), RRCoins(0.9, 0.6)) <= 2.0
    assert agg.pipelines[1].query.n_buckets == 11


def test_protocol_verbs():
    agg = Aggregator(coins=RRCoins(0.9, 0.6))
    clock = Clock(5000)
    handle_command(agg, "REGISTER 0 7", "", clock)
    handle_command(agg, "PUBLISH", format_query_block(distance_query(), Budget("dp", 1.0)), clock)
    status = dict(ln.split("=", 1) for ln in handle_command(agg, "STATUS 1", "", clock))
    assert status["registered"] == "7" and status["inverted"] == "False"
    assert handle_command(agg, "INVERT 1", "", clock) == ["inverted=true"]
    queries = handle_command(agg, "QUERIES", "", clock)
    assert "inverted=true" in queries and queries[-1] == "---" and "revision=1" in queries
    assert handle_command(agg, "REPORT 1", "", clock) == [",".join(CSV_HEADER)]
    assert any(ln.startswith("joined ") for ln in handle_command(agg, "METRICS", "", clock))
    with pytest.raises(ValueError):
        handle_command(agg, "FROB", "", clock)
    with pytest.raises(ValueError):
        handle_command(agg, "PUBLISH", format_query_block(distance_query(2)), clock)


def test_errors_surface_verbatim_over_tcp():
    server = ControlServer(("127.0.0.1", 0), Aggregator())
    server.start()
    try:
        with ControlClient(*server.server_address) as c:
            with pytest.raises(ProtocolError, match="KeyError"):
                c.request("STATUS 42")
            assert c.request("REGISTER 1") == []
    finally:
        server.shutdown()
        server.server_close()


# ------------------------------------------------------------ live pipeline


def test_live_relays_control_and_agents(tmp_path, capsys):
    relays = [Relay("r1", 10**5), Relay("r2", 10**5)]
    relay_servers = [RelayServer(("127.0.0.1", 0), r) for r in relays]
    for s in relay_servers:
        s.start()
    clock = Clock(0)
    agg = Aggregator(coins=RRCoins(0.9, 0.6), history=HistoricalStore(tmp_path / "hist"))
    control = ControlServer(("127.0.0.1", 0), agg, clock)
    control.start()
    addr = "%s:%d" % control.server_address
    try:
        with ControlClient(*control.server_address) as analyst:
            analyst.request("REGISTER 0 40")
            analyst.request("PUBLISH", format_query_block(distance_query(), Budget("zk", 1.5)))
            proxies = [RelayClient(*s.server_address) for s in relay_servers]
            agents = []
            for i in range(40):
                store = LocalStore()
                store.append(0, {"distance": float(i % 11)})
                agent = ClientAgent(ClientConfig(f"a{i}", 0, proxies, rng_seed=i))
                agent.store = store
                agent.subscribe(analyst, 0)
                agents.append(agent)
            sources = [RelayClient(*s.server_address) for s in relay_servers]
            service = AggregatorService(agg, sources, clock=clock, lock=control.lock)
            emitted = []
            for now in (1000, 2000, 3000):
                clock.t = now
                for a in agents:
                    a.tick(now)
                emitted += service.step()
            assert [e.end_ms for e in emitted] == [1000, 2000, 3000]
            assert all(0 < e.participants <= 40 for e in emitted)
            assert "windows=3" in analyst.request("STATUS 1")
            assert agg.metrics.joined == sum(e.participants for e in emitted)

        out = tmp_path / "latest.csv"
        assert main(["report", "1", "--aggregator", addr, "--out", str(out), "--plot"]) == 0
        text = capsys.readouterr().out
        assert "window [2000, 3000)" in text and "±" in text
        assert out.read_text().startswith("window_start_ms,window_end_ms,bucket_index")
        assert (tmp_path / "latest.png").stat().st_size > 0

        hist = tmp_path / "hist.csv"
        assert main(["historical", "1", "0", "3000", "0.6", "--aggregator", addr, "--out", str(hist),
                     "--plot"]) == 0
        assert len(hist.read_text().splitlines()) == 12
        assert (tmp_path / "hist.png").exists()

        assert main(["invert", "1", "--aggregator", addr]) == 0
        assert "inverted=true" in capsys.readouterr().out
        assert main(["status", "1", "--aggregator", addr]) == 0
        assert "inverted=True" in capsys.readouterr().out
        for a in agents:
            a.subscribe(ControlClient(*control.server_address), 3000)
            assert a.active[1].query.inverted
    finally:
        control.shutdown()
        control.server_close()
        for s in relay_servers:
            s.shutdown()
            s.server_close()


def test_invert_on_rare_answer_gives_tighter_windows():
    rng = np.random.default_rng(0)
    agg = Aggregator(coins=RRCoins(0.9, 0.6))
    n = 5000
    agg.register_client(0, n)
    q = Query(1, Predicate(()), BucketSpec.from_edges("v", [0, 1]), 1000, 1000, 1000)
    agg.publish_query(q, Budget("zk", 3.0))
    relays = [Relay("r1", 10**6), Relay("r2", 10**6)]
    agents = []
    for i in range(n):
        a = ClientAgent(ClientConfig(f"c{i}", 0, relays, rng_seed=int(rng.integers(2**32))),
                        sleep=lambda _: None)
        a.store.append(0, {"v": 0.5 if i < n // 10 else 5.0})
        a.subscribe(agg.board, 0)
        agents.append(a)

    def step(now):
        for a in agents:
            a.tick(now)
        agg.poll(relays, now)
        return agg.advance(now)

    (native,) = step(1000)
    agg.invert(1, 1000)
    for a in agents:
        a.subscribe(agg.board, 1000)
    (inverted,) = step(2000)
    assert inverted.inverted and not native.inverted
    assert inverted.relative_half_width() < native.relative_half_width()
    assert inverted.buckets[0].half_width < native.buckets[0].half_width


# --------------------------------------------------------------------- CLI


def test_parse_values():
    assert parse_values("0.1,0.5,0.9") == [0.1, 0.5, 0.9]
    assert parse_values("0.1:0.5:0.1") == [0.1, 0.2, 0.3, 0.4, 0.5]
    assert parse_values("10:10000:3330") == [10, 3340, 6670, 10000]


def test_cli_run_is_deterministic_and_plots(tmp_path):
    sc = tmp_path / "sc.txt"
    sc.write_text("n_clients=1000\nyes=0.3,0.2\ns=0.6\np=0.5\nq=0.5\nruns=2\nepochs=2\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", str(sc), "--seed", "3", "--out", str(a), "--plot"]) == 0
    assert main(["run", str(sc), "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1 + 2 * 2 * 2
    assert (tmp_path / "a.png").stat().st_size > 0


def test_cli_sweep_writes_csv_and_figure(tmp_path):
    sc = tmp_path / "sc.txt"
    sc.write_text("n_clients=500\ns=0.5\nruns=3\n")
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "s", "0.2:0.8:0.3", str(sc), "--out", str(out), "--plot"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("param,value,run") and len(lines) == 1 + 3 * 3
    assert (tmp_path / "sweep.png").exists()


def test_cli_errors_exit_two(tmp_path, capsys):
    sc = tmp_path / "bad.txt"
    sc.write_text("colour=red\n")
    assert main(["run", str(sc)]) == 2
    assert "unknown scenario key" in capsys.readouterr().err
    good = tmp_path / "good.txt"
    good.write_text("n_clients=10\n")
    assert main(["sweep", "w", "1,2", str(good)]) == 2
    assert main(["status", "1", "--aggregator", "127.0.0.1:1"]) == 2


def test_render_histogram_bounds():
    msgs = tuple(PlainMessage.from_bits(1, [int(i < 30), int(i >= 30)], 0, 5) for i in range(50))
    q = Query(1, Predicate(()), BucketSpec.from_edges("v", [0, 1, 2]), 1000, 1000, 1000)
    est = estimate_window(Window(0, 1000, msgs), q, ExecutionParams(1.0, 1.0, 0.5, test_mode=True), {0: 50})
    text = render_histogram(est, width=10)
    assert "30.0 ± 0.0" in text and "#" * 10 in text
