"""XOR-split encryption of answers, the share wire format, and relays.

Serialized message (big-endian, the XOR of all share bodies)::

    query_id u64 | stratum_id u16 | timestamp_ms u64 | n_buckets u16 |
    payload ceil(n/8) bytes, MSB-first | crc32 u32 over everything before it

Share frame::

    b"PA" | version u8 = 1 | message_id 16B | share_index u8 | n_proxies u8 |
    body_len u32 | body
"""

from __future__ import annotations

import logging
import secrets
import socket
import socketserver
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BackpressureError, CorruptMessageError, MalformedShareError, MissingSharesError

log = logging.getLogger(__name__)

MAGIC = b"PA"
VERSION = 1
MESSAGE_ID_LEN = 16
_MSG_HEADER = struct.Struct(">QHQH")
_CRC = struct.Struct(">I")
_FRAME_HEADER = struct.Struct(">2sB16sBBI")
_LEN = struct.Struct(">I")
DRAIN = b"DRAIN"
ACK_OK, ACK_FULL, ACK_MALFORMED = 0, 1, 2


@dataclass(frozen=True)
class PlainMessage:
    query_id: int
    stratum_id: int
    timestamp_ms: int
    n_buckets: int
    payload: bytes  # packed answer bits, MSB-first, zero padded

    @classmethod
    def from_bits(cls, query_id: int, bits: Sequence[int], stratum_id: int = 0,
                  timestamp_ms: int = 0) -> "PlainMessage":
        packed = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes() if len(bits) else b""
        return cls(query_id, stratum_id, timestamp_ms, len(bits), packed)

    @property
    def bits(self) -> tuple[int, ...]:
        arr = np.unpackbits(np.frombuffer(self.payload, dtype=np.uint8))[: self.n_buckets]
        return tuple(int(b) for b in arr)


@dataclass(frozen=True)
class ShareMessage:
    message_id: bytes
    share_index: int
    n_proxies: int
    body: bytes


def serialize_message(msg: PlainMessage) -> bytes:
    if len(msg.payload) != (msg.n_buckets + 7) // 8:
        raise ValueError("payload length does not match bucket count")
    head = _MSG_HEADER.pack(msg.query_id, msg.stratum_id, msg.timestamp_ms, msg.n_buckets) + msg.payload
    return head + _CRC.pack(zlib.crc32(head))


def deserialize_message(data: bytes) -> PlainMessage:
    if len(data) < _MSG_HEADER.size + _CRC.size:
        raise CorruptMessageError(f"message too short ({len(data)} bytes)")
    qid, stratum, ts, n = _MSG_HEADER.unpack_from(data)
    expected = _MSG_HEADER.size + (n + 7) // 8 + _CRC.size
    if len(data) != expected:
        raise CorruptMessageError(f"message is {len(data)} bytes, bucket count implies {expected}")
    head = data[: -_CRC.size]
    (crc,) = _CRC.unpack_from(data, len(head))
    if crc != zlib.crc32(head):
        raise CorruptMessageError("checksum mismatch")
    return PlainMessage(qid, stratum, ts, n, bytes(head[_MSG_HEADER.size:]))


def encode_frame(share: ShareMessage) -> bytes:
    return _FRAME_HEADER.pack(MAGIC, VERSION, share.message_id, share.share_index,
                              share.n_proxies, len(share.body)) + share.body


def decode_frame(frame: bytes) -> ShareMessage:
    if len(frame) < _FRAME_HEADER.size:
        raise MalformedShareError("frame shorter than header")
    magic, version, mid, idx, n, body_len = _FRAME_HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise MalformedShareError("bad frame magic")
    if version != VERSION:
        raise MalformedShareError(f"unsupported frame version {version}")
    if n < 2 or not 1 <= idx <= n:
        raise MalformedShareError(f"share index {idx} of {n} out of range")
    if body_len == 0:
        raise MalformedShareError("empty share body")
    if len(frame) != _FRAME_HEADER.size + body_len:
        raise MalformedShareError("declared body length mismatch")
    return ShareMessage(mid, idx, n, bytes(frame[_FRAME_HEADER.size:]))


def _random_bytes(n: int, rng: np.random.Generator | None) -> bytes:
    return secrets.token_bytes(n) if rng is None else rng.bytes(n)


def split_encrypt(msg: PlainMessage, n_proxies: int = 2,
                  rng: np.random.Generator | None = None) -> list[ShareMessage]:
    """Split ``msg`` into ``n_proxies`` shares whose XOR is the serialized message.

    Share 1 carries the ciphertext, shares 2..n the key strings.  Without an
    explicit ``rng`` keys and the message id come from the OS CSPRNG.
    """
    if n_proxies < 2:
        raise ValueError("XOR splitting needs at least two proxies")
    plain = serialize_message(msg)
    size = len(plain)
    acc = int.from_bytes(plain, "big")
    mid = _random_bytes(MESSAGE_ID_LEN, rng)
    keys = []
    for i in range(2, n_proxies + 1):
        key = _random_bytes(size, rng)
        acc ^= int.from_bytes(key, "big")
        keys.append(ShareMessage(mid, i, n_proxies, key))
    return [ShareMessage(mid, 1, n_proxies, acc.to_bytes(size, "big")), *keys]


def xor_bodies(bodies: Iterable[bytes]) -> bytes:
    bodies = list(bodies)
    size = len(bodies[0])
    acc = 0
    for b in bodies:
        if len(b) != size:
            raise MalformedShareError("share bodies differ in length")
        acc ^= int.from_bytes(b, "big")
    return acc.to_bytes(size, "big")


def join_decrypt(shares: Sequence[ShareMessage]) -> PlainMessage:
    if not shares:
        raise MissingSharesError("no shares", missing=[])
    mid, n = shares[0].message_id, shares[0].n_proxies
    if any(s.message_id != mid for s in shares):
        raise MalformedShareError("shares carry different message ids")
    if any(s.n_proxies != n for s in shares):
        raise MalformedShareError("shares disagree on the proxy count")
    seen = [s.share_index for s in shares]
    if len(set(seen)) != len(seen):
        raise MalformedShareError("duplicate share index")
    missing = sorted(set(range(1, n + 1)) - set(seen))
    if missing:
        raise MissingSharesError(f"missing shares {missing}", missing=missing)
    return deserialize_message(xor_bodies(s.body for s in shares))


# ------------------------------------------------------------------- relays


class Relay:
    """In-process relay topic: a bounded FIFO of opaque share frames.

    Frames hold no sender address, so draining them is the source-rewriting
    step.  A full buffer rejects with :class:`BackpressureError`.
    """

    def __init__(self, name: str = "answer", capacity: int = 1_000_000):
        self.name = name
        self.capacity = capacity
        self._buf: deque[bytes] = deque()
        self._lock = threading.Lock()
        self.forwarded_bytes = 0

    def forward(self, share: ShareMessage | bytes) -> None:
        frame = share if isinstance(share, (bytes, bytearray)) else encode_frame(share)
        frame = bytes(frame)
        _check_frame_length(frame)
        with self._lock:
            if len(self._buf) >= self.capacity:
                raise BackpressureError(f"relay {self.name} is full")
            self._buf.append(frame)
            self.forwarded_bytes += len(frame)

    def drain(self, max_items: int | None = None) -> list[bytes]:
        with self._lock:
            k = len(self._buf) if max_items is None else min(max_items, len(self._buf))
            return [self._buf.popleft() for _ in range(k)]

    def __len__(self) -> int:
        return len(self._buf)


def _check_frame_length(frame: bytes) -> None:
    """Length sanity only; bodies are opaque to relays."""
    if len(frame) < _FRAME_HEADER.size:
        raise MalformedShareError("frame shorter than header")
    (body_len,) = _LEN.unpack_from(frame, _FRAME_HEADER.size - _LEN.size)
    if body_len == 0 or len(frame) != _FRAME_HEADER.size + body_len:
        raise MalformedShareError("bad share body length")


def relay_forward(topic: Relay, share: ShareMessage | bytes) -> bool:
    topic.forward(share)
    return True


# ---------------------------------------------------- socket relay service


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def read_frame(sock: socket.socket, limit: int = 1 << 24) -> bytes:
    (n,) = _LEN.unpack(recv_exact(sock, _LEN.size))
    if n > limit:
        raise MalformedShareError(f"frame of {n} bytes exceeds limit")
    return recv_exact(sock, n)


class _RelayHandler(socketserver.BaseRequestHandler):
    def handle(self):
        relay: Relay = self.server.relay  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except (ConnectionError, OSError):
                return
            except MalformedShareError:
                return
            if frame.startswith(DRAIN):
                max_items = _LEN.unpack_from(frame, len(DRAIN))[0] if len(frame) >= len(DRAIN) + 4 else None
                items = relay.drain(max_items or None)
                sock.sendall(_LEN.pack(len(items)) + b"".join(_LEN.pack(len(f)) + f for f in items))
                continue
            try:
                relay.forward(frame)
                status = ACK_OK
            except BackpressureError:
                status = ACK_FULL
            except MalformedShareError:
                status = ACK_MALFORMED
            sock.sendall(bytes([status]))


class RelayServer(socketserver.ThreadingTCPServer):
    """Serves one relay topic over TCP with length-prefixed frames.

    Producers send share frames and get a one-byte status back (0 ok,
    1 full, 2 malformed).  A ``DRAIN`` + u32 max request returns a u32 count
    followed by that many length-prefixed frames.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], relay: Relay):
        super().__init__(address, _RelayHandler)
        self.relay = relay

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name=f"relay-{self.relay.name}", daemon=True)
        t.start()
        return t


class RelayClient:
    """Socket-side stand-in for :class:`Relay` used by agents and the aggregator."""

    def __init__(self, host: str, port: int, name: str | None = None, timeout: float = 5.0):
        self.address = (host, port)
        self.name = name or f"{host}:{port}"
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _conn(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def forward(self, share: ShareMessage | bytes) -> None:
        frame = share if isinstance(share, (bytes, bytearray)) else encode_frame(share)
        with self._lock:
            try:
                sock = self._conn()
                send_frame(sock, bytes(frame))
                status = recv_exact(sock, 1)[0]
            except OSError as exc:
                self.close()
                raise ConnectionError(f"relay {self.name} unreachable: {exc}") from exc
        if status == ACK_FULL:
            raise BackpressureError(f"relay {self.name} is full")
        if status == ACK_MALFORMED:
            raise MalformedShareError(f"relay {self.name} rejected a malformed share")

    def drain(self, max_items: int | None = None) -> list[bytes]:
        with self._lock:
            try:
                sock = self._conn()
                send_frame(sock, DRAIN + _LEN.pack(max_items or 0))
                (count,) = _LEN.unpack(recv_exact(sock, 4))
                return [read_frame(sock) for _ in range(count)]
            except OSError as exc:
                self.close()
                raise ConnectionError(f"relay {self.name} unreachable: {exc}") from exc


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)
