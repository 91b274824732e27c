"""Length-prefixed TCP framing, message codecs, batching and object pools.

Every frame is ``length u32 | type u8 | payload`` (little-endian) with
``length == len(payload) + 1``. The query-state payload is defined in
:mod:`relayann.distsearch`; the others live here.
"""

from __future__ import annotations

import enum
import logging
import queue
import selectors
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .vecdata import ELEM_CODES, ELEM_DTYPES, ELEM_FROM_CODE

log = logging.getLogger(__name__)

_PREFIX = struct.Struct("<IB")
MAX_FRAME = 16 << 20
MAX_BATCH_BYTES = 64 << 10
FLUSH_INTERVAL = 100e-6


class MsgType(enum.IntEnum):
    QUERY = 1
    STATE = 2
    RESULT = 3
    ACK = 4
    PING = 5


_KNOWN_TYPES = frozenset(int(t) for t in MsgType)


class ProtocolError(ValueError):
    """A payload does not parse as the message its frame type announces."""


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if not payload:
        raise ProtocolError("frames need a non-empty payload")
    if len(payload) + 1 > MAX_FRAME:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the frame limit")
    return _PREFIX.pack(len(payload) + 1, msg_type) + payload


@dataclass
class DecoderStats:
    frames: int = 0
    unknown_type: int = 0
    empty_payload: int = 0
    oversized: int = 0

    @property
    def errors(self) -> int:
        return self.unknown_type + self.empty_payload + self.oversized


class FrameDecoder:
    """Incremental decoder; accepts the byte stream in arbitrary fragments.

    Bad frames are skipped by their declared length and counted, so the
    stream stays aligned whenever the sender framed it consistently.
    """

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self.stats = DecoderStats()
        self._buf = bytearray()
        self._skip = 0

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        buf = self._buf
        if self._skip:
            drop = min(self._skip, len(data))
            self._skip -= drop
            data = memoryview(data)[drop:]
        buf += data
        out = []
        pos = 0
        while len(buf) - pos >= 4:
            (length,) = struct.unpack_from("<I", buf, pos)
            if length == 0 or length > self.max_frame:
                # length 0 cannot even hold a type byte
                if length == 0:
                    self.stats.empty_payload += 1
                else:
                    self.stats.oversized += 1
                pos += 4
                avail = len(buf) - pos
                take = min(avail, length)
                pos += take
                self._skip = length - take
                continue
            if len(buf) - pos < 4 + length:
                break
            msg_type = buf[pos + 4]
            payload = bytes(buf[pos + 5 : pos + 4 + length])
            pos += 4 + length
            if msg_type not in _KNOWN_TYPES:
                self.stats.unknown_type += 1
            elif not payload:
                self.stats.empty_payload += 1
            else:
                self.stats.frames += 1
                out.append((msg_type, payload))
        del buf[:pos]
        return out


# ---------------------------------------------------------------------------
# message payloads (the query state codec lives in distsearch)


def pack_addr(addr: str) -> bytes:
    raw = addr.encode()
    if len(raw) > 0xFFFF:
        raise ProtocolError("address too long")
    return struct.pack("<H", len(raw)) + raw


def unpack_addr(buf, pos: int) -> tuple[str, int]:
    if pos + 2 > len(buf):
        raise ProtocolError("truncated address")
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise ProtocolError("truncated address")
    try:
        return bytes(buf[pos : pos + n]).decode(), pos + n
    except UnicodeDecodeError as exc:
        raise ProtocolError("address is not utf-8") from exc


def pack_embedding(vec: np.ndarray) -> bytes:
    kind = next(k for k, dt in ELEM_DTYPES.items() if dt == vec.dtype.newbyteorder("="))
    return struct.pack("<HB", len(vec), ELEM_CODES[kind]) + np.ascontiguousarray(vec, ELEM_DTYPES[kind].newbyteorder("<")).tobytes()


def unpack_embedding(buf, pos: int) -> tuple[np.ndarray, int]:
    if pos + 3 > len(buf):
        raise ProtocolError("truncated embedding header")
    dim, code = struct.unpack_from("<HB", buf, pos)
    pos += 3
    if code not in ELEM_FROM_CODE or dim == 0:
        raise ProtocolError(f"bad embedding header (dim={dim}, code={code})")
    dt = ELEM_DTYPES[ELEM_FROM_CODE[code]].newbyteorder("<")
    end = pos + dim * dt.itemsize
    if end > len(buf):
        raise ProtocolError("truncated embedding")
    return np.frombuffer(buf, dtype=dt, count=dim, offset=pos).astype(dt.newbyteorder("=")), end


_QUERY_PARAMS = struct.Struct("<HHH")


@dataclass
class QueryMessage:
    query_id: int
    client_addr: str
    k: int
    L: int
    W: int
    embedding: np.ndarray

    def encode(self) -> bytes:
        return (struct.pack("<Q", self.query_id) + pack_addr(self.client_addr)
                + _QUERY_PARAMS.pack(self.k, self.L, self.W) + pack_embedding(self.embedding))

    @classmethod
    def decode(cls, buf: bytes) -> "QueryMessage":
        if len(buf) < 8:
            raise ProtocolError("truncated query")
        (qid,) = struct.unpack_from("<Q", buf, 0)
        addr, pos = unpack_addr(buf, 8)
        if pos + _QUERY_PARAMS.size > len(buf):
            raise ProtocolError("truncated query parameters")
        k, L, W = _QUERY_PARAMS.unpack_from(buf, pos)
        emb, pos = unpack_embedding(buf, pos + _QUERY_PARAMS.size)
        if pos != len(buf):
            raise ProtocolError("trailing bytes after query")
        return cls(qid, addr, k, L, W, emb)


RESULT_ERROR = 0xFFFF  # result count marking an aborted query
_RESULT_HEAD = struct.Struct("<QH")
_COUNTERS = struct.Struct("<IIII")
_ENTRY = np.dtype([("id", "<u4"), ("dist", "<f4")])


@dataclass
class ResultMessage:
    query_id: int
    ids: np.ndarray
    dists: np.ndarray
    # hops, inter-partition hops, distance comparisons, disk reads
    counters: tuple[int, int, int, int] = (0, 0, 0, 0)
    error: bool = False

    def encode(self) -> bytes:
        count = RESULT_ERROR if self.error else len(self.ids)
        entries = np.empty(0 if self.error else len(self.ids), dtype=_ENTRY)
        if not self.error:
            entries["id"], entries["dist"] = self.ids, self.dists
        return _RESULT_HEAD.pack(self.query_id, count) + entries.tobytes() + _COUNTERS.pack(*self.counters)

    @classmethod
    def decode(cls, buf: bytes) -> "ResultMessage":
        if len(buf) < _RESULT_HEAD.size + _COUNTERS.size:
            raise ProtocolError("truncated result")
        qid, count = _RESULT_HEAD.unpack_from(buf)
        error = count == RESULT_ERROR
        n = 0 if error else count
        if len(buf) != _RESULT_HEAD.size + n * _ENTRY.itemsize + _COUNTERS.size:
            raise ProtocolError("result length does not match its count")
        entries = np.frombuffer(buf, dtype=_ENTRY, count=n, offset=_RESULT_HEAD.size)
        counters = _COUNTERS.unpack_from(buf, len(buf) - _COUNTERS.size)
        return cls(qid, entries["id"].astype(np.int64), entries["dist"].astype(np.float32), counters, error)


def encode_ack(query_id: int) -> bytes:
    return struct.pack("<Q", query_id)


def decode_ack(buf: bytes) -> int:
    if len(buf) != 8:
        raise ProtocolError("ack payload must be 8 bytes")
    return struct.unpack("<Q", buf)[0]


def make_query_id(client_id: int, seq: int) -> int:
    return ((client_id & 0xFFFFFFFF) << 32) | (seq & 0xFFFFFFFF)


def split_query_id(query_id: int) -> tuple[int, int]:
    return query_id >> 32, query_id & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# object pools


@dataclass
class PoolStats:
    allocations: int = 0  # objects ever created by the factory
    transient: int = 0    # acquisitions served past the pool's capacity
    acquired: int = 0
    released: int = 0


class ObjectPool:
    """Thread-safe free list of reusable objects.

    ``acquire`` never blocks: when the free list is empty it builds a
    transient object and bumps ``stats.transient``. ``release`` resets the
    object and keeps it unless the pool is already full.
    """

    def __init__(self, factory: Callable[[], object], reset: Callable[[object], None] | None = None,
                 capacity: int = 64, prefill: bool = True):
        self._factory = factory
        self._reset = reset
        self.capacity = capacity
        self.stats = PoolStats()
        self._lock = threading.Lock()
        self._free: deque = deque()
        if prefill:
            for _ in range(capacity):
                self._free.append(self._new())

    def _new(self):
        self.stats.allocations += 1
        return self._factory()

    def acquire(self):
        with self._lock:
            self.stats.acquired += 1
            if self._free:
                return self._free.pop()
            self.stats.transient += 1
            obj = self._new()
        log.debug("pool exhausted; transient allocation")
        return obj

    def release(self, obj) -> None:
        if self._reset is not None:
            self._reset(obj)
        with self._lock:
            self.stats.released += 1
            if len(self._free) < self.capacity:
                self._free.append(obj)

    @property
    def free(self) -> int:
        with self._lock:
            return len(self._free)


# ---------------------------------------------------------------------------
# connections, batching and the receive loop


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


def connect(addr: str, retries: int = 20, backoff: float = 0.05, max_backoff: float = 1.0) -> socket.socket:
    """Open a TCP connection with Nagle off, retrying with exponential backoff."""
    delay = backoff
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection(parse_addr(addr), timeout=5.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
            return sock
        except OSError:
            if attempt == retries:
                raise
            time.sleep(delay)
            delay = min(delay * 2, max_backoff)
    raise AssertionError("unreachable")


def listen(addr: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(parse_addr(addr))
    sock.listen(128)
    return sock


@dataclass
class BatcherStats:
    frames: int = 0
    writes: int = 0
    bytes: int = 0
    failed_frames: int = 0


class Batcher:
    """One sending thread for the whole process.

    Frames queue up per destination and are written when a destination has
    ``max_batch_bytes`` pending or its oldest frame is ``flush_interval``
    old. Destinations are ``host:port`` strings; connections open lazily
    and persist. A failed connection drops its frames and reports them to
    ``on_failure(dest, frames)``; frames for that destination fail fast
    until ``retry_after`` seconds have passed, then a reconnect is tried.
    """

    def __init__(self, max_batch_bytes: int = MAX_BATCH_BYTES, flush_interval: float = FLUSH_INTERVAL,
                 queue_size: int = 4096, on_failure: Callable[[str, list[bytes]], None] | None = None,
                 connect_retries: int = 20, retry_after: float = 1.0):
        self.max_batch_bytes = max_batch_bytes
        self.flush_interval = flush_interval
        self.on_failure = on_failure
        self.connect_retries = connect_retries
        self.retry_after = retry_after
        self.stats = BatcherStats()
        self._q: queue.Queue = queue.Queue(maxsize=queue_size)
        self._conns: dict[str, socket.socket] = {}
        self._pending: dict[str, list[bytes]] = {}
        self._pending_bytes: dict[str, int] = {}
        self._first: dict[str, float] = {}
        # destinations whose last connect failed, and when to try them again
        self._dead: dict[str, float] = {}
        self._thread = threading.Thread(target=self._run, name="batcher", daemon=True)
        self._closing = False

    def start(self) -> "Batcher":
        self._thread.start()
        return self

    def send(self, dest: str, frame: bytes) -> None:
        """Enqueue; blocks while the outgoing queue is full."""
        self._q.put((dest, frame))

    def close(self, timeout: float = 5.0) -> None:
        self._closing = True
        self._q.put(None)
        self._thread.join(timeout)
        for sock in self._conns.values():
            try:
                sock.close()
            except OSError:
                pass

    def _run(self) -> None:
        while True:
            wait = None
            if self._first:
                oldest = min(self._first.values())
                wait = max(0.0, oldest + self.flush_interval - time.perf_counter())
            try:
                item = self._q.get(timeout=wait) if wait is None or wait > 0 else self._q.get_nowait()
            except queue.Empty:
                item = ()
            if item is None:
                for dest in list(self._pending):
                    self._flush(dest)
                return
            if item:
                dest, frame = item
                self._pending.setdefault(dest, []).append(frame)
                self._pending_bytes[dest] = self._pending_bytes.get(dest, 0) + len(frame)
                self._first.setdefault(dest, time.perf_counter())
                self.stats.frames += 1
                if self._pending_bytes[dest] >= self.max_batch_bytes:
                    self._flush(dest)
            now = time.perf_counter()
            for dest, t0 in list(self._first.items()):
                if now - t0 >= self.flush_interval:
                    self._flush(dest)

    def _flush(self, dest: str) -> None:
        frames = self._pending.pop(dest, [])
        self._pending_bytes.pop(dest, None)
        self._first.pop(dest, None)
        if not frames:
            return
        if dest in self._dead:
            if time.monotonic() < self._dead[dest]:
                self._fail(dest, frames)
                return
            del self._dead[dest]
        # write in chunks of at most max_batch_bytes (a single larger frame goes alone)
        chunks: list[list[bytes]] = [[]]
        size = 0
        for fr in frames:
            if chunks[-1] and size + len(fr) > self.max_batch_bytes:
                chunks.append([])
                size = 0
            chunks[-1].append(fr)
            size += len(fr)
        sent = 0
        try:
            sock = self._conns.get(dest)
            if sock is None:
                sock = self._conns[dest] = connect(dest, retries=self.connect_retries)
            for chunk in chunks:
                data = b"".join(chunk)
                sock.sendall(data)
                sent += 1
                self.stats.writes += 1
                self.stats.bytes += len(data)
        except OSError as exc:
            log.error("connection to %s failed: %s", dest, exc)
            self._dead[dest] = time.monotonic() + self.retry_after
            sock = self._conns.pop(dest, None)
            if sock is not None:
                sock.close()
            self._fail(dest, [fr for chunk in chunks[sent:] for fr in chunk])

    def _fail(self, dest: str, frames: list[bytes]) -> None:
        self.stats.failed_frames += len(frames)
        if self.on_failure is not None:
            self.on_failure(dest, frames)


class Receiver:
    """Accepts connections on one listening socket and decodes their frames.

    ``handler(msg_type, payload)`` runs on the receiver thread for every
    well-formed frame; exceptions it raises are counted in
    ``handler_errors`` and never stop the loop.
    """

    def __init__(self, addr: str, handler: Callable[[int, bytes], None]):
        self._listener = listen(addr)
        self.addr = "%s:%d" % self._listener.getsockname()[:2]
        self.handler = handler
        self.handler_errors = 0
        self._decoders: dict[socket.socket, FrameDecoder] = {}
        self._closed_stats = DecoderStats()
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._listener, selectors.EVENT_READ)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="receiver", daemon=True)

    def start(self) -> "Receiver":
        self._thread.start()
        return self

    @property
    def stats(self) -> DecoderStats:
        total = DecoderStats(**vars(self._closed_stats))
        for dec in list(self._decoders.values()):
            for k, v in vars(dec.stats).items():
                setattr(total, k, getattr(total, k) + v)
        return total

    def close(self) -> None:
        self._stop.set()
        self._thread.join(2.0)

    def _run(self) -> None:
        try:
            while not self._stop.is_set():
                for key, _ in self._sel.select(timeout=0.05):
                    sock = key.fileobj
                    if sock is self._listener:
                        conn, _ = self._listener.accept()
                        conn.setblocking(False)
                        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                        self._decoders[conn] = FrameDecoder()
                        self._sel.register(conn, selectors.EVENT_READ)
                        continue
                    try:
                        data = sock.recv(1 << 20)
                    except (BlockingIOError, InterruptedError):
                        continue
                    except OSError:
                        data = b""
                    if not data:
                        self._drop(sock)
                        continue
                    for msg_type, payload in self._decoders[sock].feed(data):
                        try:
                            self.handler(msg_type, payload)
                        except Exception:
                            self.handler_errors += 1
                            log.exception("frame handler failed")
        finally:
            for sock in list(self._decoders):
                self._drop(sock)
            self._sel.unregister(self._listener)
            self._listener.close()
            self._sel.close()

    def _drop(self, sock: socket.socket) -> None:
        dec = self._decoders.pop(sock)
        for k, v in vars(dec.stats).items():
            setattr(self._closed_stats, k, getattr(self._closed_stats, k) + v)
        self._sel.unregister(sock)
        sock.close()
