"""Command-line entry point: simulations, sweeps, analyst verbs and services."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .aggregator import Aggregator, BucketEstimate, HistoricalStore, WindowEstimate
from .client import ClientAgent, ClientConfig, LocalStore, parse_agent_config
from .errors import StreamPrivError
from .harness import parse_scenario, results_csv, run_scenario, sweep, sweep_csv
from .privacy import RRCoins
from .query import parse_record
from .service import AggregatorService, ControlClient, ControlServer, ProtocolError, estimate_csv, now_ms
from .transport import Relay, RelayClient, RelayServer, parse_address

log = logging.getLogger("streampriv")


def parse_values(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_scenario(path: str, seed: int | None):
    sc = parse_scenario(Path(path).read_text())
    return replace(sc, seed=seed) if seed is not None else sc


# --------------------------------------------------------------- simulation


def cmd_run(args) -> int:
    sc = _load_scenario(args.scenario, args.seed)
    results = list(run_scenario(sc))
    _emit(results_csv(results, timing=args.timing), args.out)
    if args.plot:
        from .plotting import figure_path, plot_results
        target = figure_path(args.out) if args.out else Path(args.plot)
        plot_results(results, target)
        log.info("figure written to %s", target)
    return 0


def cmd_sweep(args) -> int:
    sc = _load_scenario(args.scenario, args.seed)
    rows = sweep(args.param, parse_values(args.values), sc)
    _emit(sweep_csv(rows), args.out)
    if args.plot:
        from .plotting import figure_path, plot_sweep
        target = figure_path(args.out) if args.out else Path(args.plot)
        plot_sweep(rows, target)
        log.info("figure written to %s", target)
    return 0


# ------------------------------------------------------------ analyst verbs


def _client(args) -> ControlClient:
    return ControlClient(*parse_address(args.aggregator))


def cmd_publish(args) -> int:
    with _client(args) as c:
        lines = c.request("PUBLISH", Path(args.query_file).read_text())
    print("\n".join(lines))
    return 0


def cmd_status(args) -> int:
    with _client(args) as c:
        print("\n".join(c.request(f"STATUS {args.query_id}")))
    return 0


def cmd_invert(args) -> int:
    with _client(args) as c:
        print("\n".join(c.request(f"INVERT {args.query_id}")))
    return 0


def cmd_historical(args) -> int:
    with _client(args) as c:
        lines = c.request(f"HISTORICAL {args.query_id} {args.from_ms} {args.to_ms} {args.sampling}")
    csv_lines = [ln for ln in lines if not ln.startswith("effective_sampling=")]
    _emit("\n".join(csv_lines) + "\n", args.out)
    for ln in lines:
        if ln.startswith("effective_sampling="):
            log.info(ln)
    return _plot_csv_rows(csv_lines, args)


def _rows_to_estimate(csv_lines: Sequence[str], query_id: int) -> WindowEstimate | None:
    rows = list(csv.DictReader(io.StringIO("\n".join(csv_lines))))
    if not rows:
        return None
    buckets = tuple(BucketEstimate(int(r["bucket_index"]), int(r["R_y"]), float(r["E_y"]),
                                   float(r["estimate"]), float(r["half_width"]), math.nan,
                                   math.nan, float(r["estimate"]), math.nan) for r in rows)
    flags = rows[0]["flags"]
    return WindowEstimate(query_id, int(rows[0]["window_start_ms"]), int(rows[0]["window_end_ms"]),
                          -1, -1, buckets, float(rows[0]["confidence_level"]),
                          "low-sample" in flags, "inverted" in flags)


def render_histogram(est: WindowEstimate, width: int = 40) -> str:
    """Text histogram with +/- bounds, one line per bucket."""
    top = max((abs(b.estimate) + (b.half_width if math.isfinite(b.half_width) else 0))
              for b in est.buckets) or 1.0
    lines = [f"window [{est.start_ms}, {est.end_ms}) ms  flags={est.flags}  "
             f"confidence={est.confidence_level:g}"]
    for b in est.buckets:
        bar = "#" * max(0, int(round(width * max(b.estimate, 0.0) / top)))
        lines.append(f"{b.index:>4}  {b.estimate:>12.1f} ± {b.half_width:<10.1f} {bar}")
    return "\n".join(lines) + "\n"


def _plot_csv_rows(csv_lines, args) -> int:
    if not getattr(args, "plot", None):
        return 0
    est = _rows_to_estimate(csv_lines, args.query_id)
    if est is None:
        log.warning("nothing to plot")
        return 0
    from .plotting import figure_path, plot_window
    target = figure_path(args.out) if args.out else Path(args.plot)
    plot_window(est, target)
    log.info("figure written to %s", target)
    return 0


def cmd_report(args) -> int:
    with _client(args) as c:
        lines = c.request(f"REPORT {args.query_id}")
    est = _rows_to_estimate(lines, args.query_id)
    if est is None:
        print("no window emitted yet")
        return 0
    sys.stdout.write(render_histogram(est))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return _plot_csv_rows(lines, args)


# ----------------------------------------------------------------- services


def cmd_serve_relay(args) -> int:
    relay = Relay(args.name, args.capacity)
    server = RelayServer(parse_address(args.listen), relay)
    log.info("relay %s listening on %s:%d", args.name, *server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_serve_aggregator(args) -> int:
    history = HistoricalStore(args.history) if args.history else None
    agg = Aggregator(coins=RRCoins(args.p, args.q), n_proxies=len(args.relay), history=history)
    relays = [RelayClient(*parse_address(r)) for r in args.relay]
    lock = threading.Lock()
    out = open(args.out, "a", newline="") if args.out else None
    if out is not None and out.tell() == 0:
        out.write(estimate_csv([], header=True))

    def sink(est: WindowEstimate) -> None:
        if out is not None:
            out.write(estimate_csv([est], header=False))
            out.flush()

    control = ControlServer(parse_address(args.listen), agg)
    control.lock = lock
    control.start()
    service = AggregatorService(agg, relays, args.poll_ms, sink, lock=lock)
    log.info("aggregator control on %s:%d, %d relays", *control.server_address, len(relays))
    try:
        service.run()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
        control.shutdown()
        if history:
            history.close()
        if out:
            out.close()
    return 0


def cmd_agent(args) -> int:
    conf = parse_agent_config(Path(args.config).read_text()) if args.config else {"proxies": []}
    proxies = [RelayClient(*parse_address(p)) for p in (args.proxy or conf["proxies"])]
    if len(proxies) < 2:
        raise StreamPrivError("an agent needs at least two proxies")
    stratum = args.stratum if args.stratum is not None else conf.get("stratum", 0)
    seed = args.seed if args.seed is not None else conf.get("seed")
    cfg = ClientConfig(conf.get("client_id", "agent"), stratum, proxies, seed,
                       conf.get("max_retries", 3))
    records = []
    if args.records:
        records = [parse_record(ln) for ln in Path(args.records).read_text().splitlines() if ln.strip()]
        records.sort(key=lambda r: r[0])
    agent = ClientAgent(cfg, LocalStore(capacity=args.store_capacity))
    control = ControlClient(*parse_address(args.aggregator))
    control.request(f"REGISTER {stratum}")
    deadline = time.time() + args.duration
    fed = 0
    try:
        while time.time() < deadline:
            now = now_ms()
            while fed < len(records) and records[fed][0] <= now:
                agent.store.append(*records[fed])
                fed += 1
            agent.subscribe(control, now)
            agent.tick(now)
            time.sleep(args.tick_ms / 1000.0)
    except KeyboardInterrupt:
        pass
    finally:
        control.close()
    log.info("agent sent %d bytes", agent.bytes_sent)
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streampriv", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def outputs(p, plot=True):
        p.add_argument("--out", help="write CSV here instead of stdout")
        if plot:
            p.add_argument("--plot", nargs="?", const="figure.png",
                           help="also render a PNG (next to --out, else at this path)")

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--timing", action="store_true", help="include wall time per window")
    outputs(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one scenario parameter")
    p.add_argument("param")
    p.add_argument("values", help="a,b,c or start:stop:step")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    outputs(p)
    p.set_defaults(func=cmd_sweep)

    def analyst(name, func, helptext):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--aggregator", default="127.0.0.1:7000", help="control host:port")
        p.set_defaults(func=func)
        return p

    p = analyst("publish", cmd_publish, "publish a query block file")
    p.add_argument("query_file")
    p = analyst("status", cmd_status, "show query parameters and state")
    p.add_argument("query_id", type=int)
    p = analyst("invert", cmd_invert, "toggle query inversion")
    p.add_argument("query_id", type=int)
    p = analyst("historical", cmd_historical, "batch estimate over stored answers")
    p.add_argument("query_id", type=int)
    p.add_argument("from_ms", type=int)
    p.add_argument("to_ms", type=int)
    p.add_argument("sampling", type=float)
    outputs(p)
    p = analyst("report", cmd_report, "latest window as a histogram")
    p.add_argument("query_id", type=int)
    outputs(p)

    p = sub.add_parser("serve-relay", help="run one relay")
    p.add_argument("--listen", default="127.0.0.1:7101")
    p.add_argument("--name", default="relay")
    p.add_argument("--capacity", type=int, default=1_000_000)
    p.set_defaults(func=cmd_serve_relay)

    p = sub.add_parser("serve-aggregator", help="run the aggregator")
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--relay", action="append", required=True, help="relay host:port (repeat)")
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--q", type=float, default=0.6)
    p.add_argument("--history", help="directory for the historical store")
    p.add_argument("--poll-ms", type=int, default=200)
    p.add_argument("--out", help="append window CSV rows here")
    p.set_defaults(func=cmd_serve_aggregator)

    p = sub.add_parser("agent", help="run one client agent")
    p.add_argument("--aggregator", default="127.0.0.1:7000")
    p.add_argument("--config", help="agent key=value file")
    p.add_argument("--proxy", action="append", help="relay host:port (repeat)")
    p.add_argument("--stratum", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--records", help="file of 'timestamp_ms,field=value,...' lines")
    p.add_argument("--duration", type=float, default=60.0, help="seconds to run")
    p.add_argument("--tick-ms", type=int, default=100)
    p.add_argument("--store-capacity", type=int, default=100_000)
    p.set_defaults(func=cmd_agent)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (StreamPrivError, ProtocolError, ConnectionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
