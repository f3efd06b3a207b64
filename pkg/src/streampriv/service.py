"""Aggregator control endpoint: a line protocol over TCP.

Requests are one line; ``PUBLISH`` is followed by a query block and a line
``END``.  Every reply starts with ``OK`` or ``ERR <message>``, carries zero
or more payload lines, and finishes with ``END``::

    PUBLISH                 -> OK, s=/p=/q= lines
    STATUS <qid>            -> OK, key=value lines
    INVERT <qid>            -> OK, inverted=true|false
    HISTORICAL <qid> <from_ms> <to_ms> <sampling>  -> OK, CSV rows
    REPORT <qid>            -> OK, CSV rows of the latest window
    QUERIES                 -> OK, per query: block, s/p/q/revision, "---"
    REGISTER <stratum> [n]  -> OK
    METRICS                 -> OK, "name value" lines
"""

from __future__ import annotations

import csv
import io
import logging
import socket
import socketserver
import threading
import time
from typing import Callable, Sequence

from .aggregator import CSV_HEADER, Aggregator, WindowEstimate
from .errors import StreamPrivError
from .query import ExecutionParams, format_params, format_query_block, parse_params, parse_query_block

log = logging.getLogger(__name__)

END = "END"


def now_ms() -> int:
    return int(time.time() * 1000)


def estimate_csv(estimates: Sequence[WindowEstimate], header: bool = True) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    if header:
        wr.writerow(CSV_HEADER)
    for est in estimates:
        wr.writerows(est.csv_rows())
    return buf.getvalue()


class ProtocolError(RuntimeError):
    """The peer answered ERR or broke framing."""


def handle_command(agg: Aggregator, line: str, body: str, clock: Callable[[], int] = now_ms) -> list[str]:
    """Execute one request; returns payload lines (raises on failure)."""
    parts = line.split()
    if not parts:
        raise ValueError("empty command")
    verb, args = parts[0].upper(), parts[1:]
    if verb == "PUBLISH":
        query, budget = parse_query_block(body)
        if budget is None:
            raise ValueError("PUBLISH needs a budget line")
        params = agg.publish_query(query, budget, clock())
        return format_params(params).splitlines()
    if verb == "STATUS":
        return [f"{k}={v}" for k, v in agg.status(int(args[0])).items()]
    if verb == "INVERT":
        q = agg.invert(int(args[0]), clock())
        return [f"inverted={'true' if q.inverted else 'false'}"]
    if verb == "HISTORICAL":
        qid, lo, hi, frac = int(args[0]), int(args[1]), int(args[2]), float(args[3])
        est = agg.historical(qid, lo, hi, frac)
        return estimate_csv([est]).splitlines() + [f"effective_sampling={est.effective_sampling!r}"]
    if verb == "REPORT":
        est = agg.latest(int(args[0]))
        return estimate_csv([est] if est else []).splitlines()
    if verb == "QUERIES":
        out = []
        for qid, (query, params, rev) in sorted(agg.board.snapshot().items()):
            out += format_query_block(query).splitlines()
            out += format_params(params).splitlines()
            out += [f"test_mode={'true' if params.test_mode else 'false'}", f"revision={rev}", "---"]
        return out
    if verb == "REGISTER":
        agg.register_client(int(args[0]), int(args[1]) if len(args) > 1 else 1)
        return []
    if verb == "METRICS":
        return agg.metrics.as_text().splitlines()
    raise ValueError(f"unknown command {verb}")


class _ControlHandler(socketserver.StreamRequestHandler):
    def handle(self):
        srv: ControlServer = self.server  # type: ignore[assignment]
        while True:
            raw = self.rfile.readline()
            if not raw:
                return
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            body_lines = []
            if line.split()[0].upper() == "PUBLISH":
                while True:
                    nxt = self.rfile.readline()
                    if not nxt or nxt.decode("utf-8").strip() == END:
                        break
                    body_lines.append(nxt.decode("utf-8"))
            try:
                with srv.lock:
                    payload = handle_command(srv.aggregator, line, "".join(body_lines), srv.clock)
                reply = ["OK", *payload, END]
            except Exception as exc:  # reported to the analyst verbatim
                log.info("control command %r failed: %s", line, exc)
                reply = [f"ERR {type(exc).__name__}: {exc}".replace("\n", " "), END]
            self.wfile.write(("\n".join(reply) + "\n").encode("utf-8"))
            self.wfile.flush()


class ControlServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], aggregator: Aggregator,
                 clock: Callable[[], int] = now_ms):
        super().__init__(address, _ControlHandler)
        self.aggregator = aggregator
        self.clock = clock
        self.lock = threading.Lock()

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="control", daemon=True)
        t.start()
        return t


class ControlClient:
    """Thin analyst/agent client for the control protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()

    def __enter__(self) -> "ControlClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request(self, line: str, body: str = "") -> list[str]:
        data = line.rstrip("\n") + "\n"
        if body:
            data += body.rstrip("\n") + "\n" + END + "\n"
        self.sock.sendall(data.encode("utf-8"))
        status = self._readline()
        lines = []
        while True:
            nxt = self._readline()
            if nxt == END:
                break
            lines.append(nxt)
        if status.startswith("ERR"):
            raise ProtocolError(status[4:])
        if status != "OK":
            raise ProtocolError(f"unexpected reply {status!r}")
        return lines

    def _readline(self) -> str:
        raw = self.rfile.readline()
        if not raw:
            raise ProtocolError("connection closed by aggregator")
        return raw.decode("utf-8").rstrip("\n")

    def snapshot(self) -> dict[int, tuple]:
        """Query board view, so a remote agent can subscribe like a local one."""
        out = {}
        chunk: list[str] = []
        for line in self.request("QUERIES"):
            if line != "---":
                chunk.append(line)
                continue
            text = "\n".join(chunk)
            chunk = []
            try:
                query, _ = parse_query_block(text)
                params: ExecutionParams = parse_params(text)
                rev = int(next(ln.split("=", 1)[1] for ln in text.splitlines() if ln.startswith("revision=")))
            except (StreamPrivError, ValueError, StopIteration) as exc:
                log.warning("skipping malformed query entry: %s", exc)
                continue
            out[query.query_id] = (query, params, rev)
        return out


class AggregatorService:
    """Background loop that drains relays and advances windows on wall time."""

    def __init__(self, aggregator: Aggregator, relays: Sequence, poll_ms: int = 200,
                 sink: Callable[[WindowEstimate], None] | None = None,
                 clock: Callable[[], int] = now_ms, lock: threading.Lock | None = None):
        self.aggregator = aggregator
        self.relays = relays
        self.poll_ms = poll_ms
        self.sink = sink
        self.clock = clock
        self.lock = lock or threading.Lock()
        self._stop = threading.Event()

    def step(self) -> list[WindowEstimate]:
        now = self.clock()
        with self.lock:
            self.aggregator.poll(self.relays, now)
            out = self.aggregator.advance(now)
        for est in out:
            if self.sink:
                self.sink(est)
        return out

    def run(self) -> None:
        while not self._stop.is_set():
            try:
                self.step()
            except (OSError, ConnectionError) as exc:
                log.warning("relay poll failed: %s", exc)
            self._stop.wait(self.poll_ms / 1000.0)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.run, name="aggregator", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()
