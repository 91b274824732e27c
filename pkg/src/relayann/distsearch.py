"""The traveling query state and the distributed beam-search state machine.

A query runs on whichever server owns the best unexplored nodes of its
beam. Each step either explores the frontier nodes that are local, hands
the whole state to the server owning the best frontier node, or finishes
by reranking the explored list.

Wire layout of a serialized state (little-endian)::

    query_id u64 | addr_len u16 | client_addr | k u16 | L u16 | W u16
    | hops u32 | inter_hops u32 | comparisons u32 | disk_reads u32
    | servers_seen 32 bytes | flags u8 | beam_len u16 | results_len u32
    | beam_len x (id u32, approx dist f32, explored u8)
    | results_len x (id u32, exact dist f32)
    | [dim u16 | elem code u8 | embedding]   when FLAG_EMBEDDING is set
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .diskindex import ReadEngine
from .pq import build_query_lut
from .search import (Finished, Handoff, Metrics, SearchContext, SearchParams, SearchState, explore,
                     next_frontier, start_state)
from .transport import ObjectPool, ProtocolError, ResultMessage, pack_addr, pack_embedding, unpack_addr, \
    unpack_embedding

log = logging.getLogger(__name__)

SERVERS_SEEN_BYTES = 32
STATE_BUDGET = 8192  # bytes a state may occupy on the wire at L <= 400
FLAG_EMBEDDING = 0x01
FLAG_HANDOFF = 0x02

_HEAD = struct.Struct("<HHHIIII32sBHI")
_BEAM_ENTRY = np.dtype([("id", "<u4"), ("dist", "<f4"), ("explored", "u1")])
_RESULT_ENTRY = np.dtype([("id", "<u4"), ("dist", "<f4")])


@dataclass(eq=False)
class QueryState(SearchState):
    """A :class:`SearchState` plus routing and embedding-cache bookkeeping."""

    query_id: int = 0
    client_addr: str = ""
    servers_seen: bytearray = field(default_factory=lambda: bytearray(SERVERS_SEEN_BYTES))
    flags: int = 0
    embedding: np.ndarray | None = None  # query in its stored element kind

    def has_seen(self, partition: int) -> bool:
        return bool(self.servers_seen[partition >> 3] & (1 << (partition & 7)))

    def mark_seen(self, partition: int) -> None:
        self.servers_seen[partition >> 3] |= 1 << (partition & 7)

    def reset(self) -> None:
        self.query = None
        self.beam.ids = self.beam.ids[:0]
        self.beam.dists = self.beam.dists[:0]
        self.beam.explored = self.beam.explored[:0]
        self.results.ids = self.results.ids[:0]
        self.results.dists = self.results.dists[:0]
        self.metrics = Metrics()
        self.arrived_by_handoff = False
        self.lut = None
        self.key = None
        self.query_id = 0
        self.client_addr = ""
        self.servers_seen[:] = bytes(SERVERS_SEEN_BYTES)
        self.flags = 0
        self.embedding = None


class Continue:
    """Outcome of a step that explored local nodes; call :func:`advance` again."""


CONTINUE = Continue()


def new_query_state(params: SearchParams, query_id: int, client_addr: str, embedding: np.ndarray,
                    state: QueryState | None = None) -> QueryState:
    if state is None:
        state = QueryState(params)
    else:
        state.reset()
        state.params = params
        state.beam.capacity = params.L
    state.query_id = query_id
    state.client_addr = client_addr
    state.embedding = embedding
    state.query = np.ascontiguousarray(embedding, dtype=np.float32)
    return state


def advance(ctx: SearchContext, state: QueryState, engine: ReadEngine) -> Continue | Handoff | Finished:
    """One blocking step of the distributed search on ``ctx``'s server."""
    action = next_frontier(ctx, state)
    if isinstance(action, Handoff):
        # the receiving server counts its first exploration as the inter-partition hop
        state.arrived_by_handoff = True
        return action
    if isinstance(action, Finished):
        return action
    token = object()
    state.metrics.disk_reads += engine.submit(token, action)
    while True:
        for tok, res in engine.poll(timeout=0.001):
            if tok is token:
                if isinstance(res, BaseException):
                    raise res
                explore(ctx, state, action, res)
                return CONTINUE


def attach_embedding_if_needed(state: QueryState, dest: int) -> bool:
    """Flag the embedding for the outgoing frame iff ``dest`` has never received it."""
    if state.has_seen(dest):
        state.flags &= ~FLAG_EMBEDDING
        return False
    state.flags |= FLAG_EMBEDDING
    state.mark_seen(dest)
    return True


def finish(state: QueryState, outcome: Finished) -> ResultMessage:
    m = state.metrics
    return ResultMessage(state.query_id, outcome.ids.astype(np.int64), outcome.dists.astype(np.float32),
                         (m.hops, m.inter_partition_hops, m.distance_comparisons, m.disk_reads))


def state_size(beam_len: int, results_len: int, addr_len: int, embedding_bytes: int = 0) -> int:
    size = 8 + 2 + addr_len + _HEAD.size + beam_len * _BEAM_ENTRY.itemsize + results_len * _RESULT_ENTRY.itemsize
    if embedding_bytes:
        size += 3 + embedding_bytes
    return size


def serialize_state(state: QueryState) -> bytes:
    if state.arrived_by_handoff:
        state.flags |= FLAG_HANDOFF
    else:
        state.flags &= ~FLAG_HANDOFF
    p, m = state.params, state.metrics
    nb, nr = len(state.beam), len(state.results)
    beam = np.empty(nb, dtype=_BEAM_ENTRY)
    beam["id"], beam["dist"], beam["explored"] = state.beam.ids, state.beam.dists, state.beam.explored
    res = np.empty(nr, dtype=_RESULT_ENTRY)
    res["id"], res["dist"] = state.results.ids, state.results.dists
    parts = [
        struct.pack("<Q", state.query_id),
        pack_addr(state.client_addr),
        _HEAD.pack(p.k, p.L, p.W, m.hops, m.inter_partition_hops, m.distance_comparisons, m.disk_reads,
                   bytes(state.servers_seen), state.flags, nb, nr),
        beam.tobytes(),
        res.tobytes(),
    ]
    if state.flags & FLAG_EMBEDDING:
        if state.embedding is None:
            raise ValueError("embedding flagged for transmission but not present")
        parts.append(pack_embedding(state.embedding))
    return b"".join(parts)


class StateBuffers:
    """Reusable per-object arrays that deserialization fills in place."""

    __slots__ = ("beam_ids", "beam_dists", "beam_explored", "res_ids", "res_dists")

    def __init__(self, beam_cap: int = 512, res_cap: int = 1024):
        self.beam_ids = np.empty(beam_cap, np.int64)
        self.beam_dists = np.empty(beam_cap, np.float32)
        self.beam_explored = np.empty(beam_cap, bool)
        self.res_ids = np.empty(res_cap, np.int64)
        self.res_dists = np.empty(res_cap, np.float32)


@dataclass
class CodecStats:
    buffer_growths: int = 0  # reallocations of pooled buffers (0 in steady state)
    malformed: int = 0


class StatePool(ObjectPool):
    """Pool of :class:`QueryState` objects with attached :class:`StateBuffers`."""

    def __init__(self, capacity: int = 256, beam_cap: int = 512, res_cap: int = 1024):
        self.codec = CodecStats()
        self._beam_cap, self._res_cap = beam_cap, res_cap
        super().__init__(self._make, QueryState.reset, capacity)

    def _make(self) -> QueryState:
        st = QueryState(SearchParams(1, 1, 1))
        st.key = None
        st._buffers = StateBuffers(self._beam_cap, self._res_cap)
        return st


def _buffers(state: QueryState, nb: int, nr: int, stats: CodecStats | None) -> StateBuffers:
    bufs = getattr(state, "_buffers", None)
    if bufs is None or len(bufs.beam_ids) < nb or len(bufs.res_ids) < nr:
        if stats is not None and bufs is not None:
            stats.buffer_growths += 1
        cap_b = max(nb, 512 if bufs is None else 2 * len(bufs.beam_ids))
        cap_r = max(nr, 1024 if bufs is None else 2 * len(bufs.res_ids))
        bufs = state._buffers = StateBuffers(cap_b, cap_r)
    return bufs


def deserialize_state(buf: bytes, pool: StatePool | None = None) -> QueryState:
    """Parse a state payload into a pooled (or fresh) :class:`QueryState`.

    Raises :class:`ProtocolError` on malformed input; a pooled object is
    returned to the pool in that case.
    """
    stats = pool.codec if pool is not None else None
    state = pool.acquire() if pool is not None else QueryState(SearchParams(1, 1, 1))
    try:
        _fill_state(state, buf, stats)
    except (ProtocolError, ValueError, struct.error) as exc:
        if stats is not None:
            stats.malformed += 1
        if pool is not None:
            pool.release(state)
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(str(exc)) from exc
    return state


def _fill_state(state: QueryState, buf: bytes, stats: CodecStats | None) -> None:
    if len(buf) < 8:
        raise ProtocolError("truncated state")
    (qid,) = struct.unpack_from("<Q", buf, 0)
    addr, pos = unpack_addr(buf, 8)
    if pos + _HEAD.size > len(buf):
        raise ProtocolError("truncated state header")
    k, L, W, hops, ip, cmps, reads, seen, flags, nb, nr = _HEAD.unpack_from(buf, pos)
    pos += _HEAD.size
    params = SearchParams(k, L, W)  # validates
    if nb > L:
        raise ProtocolError(f"beam of {nb} entries exceeds L={L}")
    end = pos + nb * _BEAM_ENTRY.itemsize + nr * _RESULT_ENTRY.itemsize
    if end > len(buf):
        raise ProtocolError("truncated state entries")
    beam = np.frombuffer(buf, dtype=_BEAM_ENTRY, count=nb, offset=pos)
    res = np.frombuffer(buf, dtype=_RESULT_ENTRY, count=nr, offset=pos + nb * _BEAM_ENTRY.itemsize)
    emb = None
    if flags & FLAG_EMBEDDING:
        emb, end = unpack_embedding(buf, end)
    if end != len(buf):
        raise ProtocolError("trailing bytes after state")

    bufs = _buffers(state, nb, nr, stats)
    bi, bd, bx = bufs.beam_ids[:nb], bufs.beam_dists[:nb], bufs.beam_explored[:nb]
    bi[:] = beam["id"]
    bd[:] = beam["dist"]
    np.not_equal(beam["explored"], 0, out=bx)
    ri, rd = bufs.res_ids[:nr], bufs.res_dists[:nr]
    ri[:] = res["id"]
    rd[:] = res["dist"]

    state.params = params
    state.beam.capacity = L
    state.beam.ids, state.beam.dists, state.beam.explored = bi, bd, bx
    state.results.ids, state.results.dists = ri, rd
    m = state.metrics
    m.hops, m.inter_partition_hops, m.distance_comparisons, m.disk_reads = hops, ip, cmps, reads
    state.query_id = qid
    state.client_addr = addr
    state.servers_seen[:] = seen
    state.flags = flags
    state.arrived_by_handoff = bool(flags & FLAG_HANDOFF)
    state.embedding = emb
    state.query = None
    state.lut = None


# ---------------------------------------------------------------------------
# per-server embedding cache


class EmbeddingCache:
    """query_id -> (embedding, LUT) kept until the client's ACK or a TTL.

    ``receipts`` counts embeddings that arrived over the wire per query id;
    more than one for any query means a redundant transmission.
    """

    def __init__(self, ttl: float = 30.0):
        self.ttl = ttl
        self._lock = threading.Lock()
        self._entries: dict[int, tuple[np.ndarray, np.ndarray | None, float]] = {}
        self.receipts: dict[int, int] = {}
        self.max_receipts = 0
        self.evicted_by_ack = 0
        self.expired = 0

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, query_id: int, embedding: np.ndarray, lut: np.ndarray | None = None,
            received: bool = True) -> None:
        with self._lock:
            self._entries[query_id] = (embedding, lut, time.monotonic() + self.ttl)
            if received:
                n = self.receipts.get(query_id, 0) + 1
                self.receipts[query_id] = n
                self.max_receipts = max(self.max_receipts, n)

    def set_lut(self, query_id: int, lut: np.ndarray) -> None:
        with self._lock:
            entry = self._entries.get(query_id)
            if entry is not None:
                self._entries[query_id] = (entry[0], lut, entry[2])

    def get(self, query_id: int) -> tuple[np.ndarray, np.ndarray | None] | None:
        with self._lock:
            entry = self._entries.get(query_id)
        return None if entry is None else (entry[0], entry[1])

    def ack(self, query_id: int) -> None:
        with self._lock:
            if self._entries.pop(query_id, None) is not None:
                self.evicted_by_ack += 1
            self.receipts.pop(query_id, None)

    def expire(self, now: float | None = None) -> int:
        now = time.monotonic() if now is None else now
        with self._lock:
            dead = [q for q, (_, _, t) in self._entries.items() if t <= now]
            for q in dead:
                del self._entries[q]
                self.receipts.pop(q, None)
            self.expired += len(dead)
        return len(dead)


def bind_query(ctx: SearchContext, state: QueryState, cache: EmbeddingCache) -> None:
    """Restore an arriving state's query vector and LUT from the frame or the cache."""
    if state.flags & FLAG_EMBEDDING:
        cache.put(state.query_id, state.embedding)
        lut = None
    else:
        hit = cache.get(state.query_id)
        if hit is None:
            raise LookupError(f"query {state.query_id:#x}: embedding not cached on this server")
        state.embedding, lut = hit
    state.query = np.ascontiguousarray(state.embedding, dtype=np.float32)
    if lut is None:
        lut = build_query_lut(ctx.codebook, state.query)
        cache.set_lut(state.query_id, lut)
    state.lut = lut


def start_query(ctx: SearchContext, state: QueryState, cache: EmbeddingCache) -> None:
    """Seed a new query on the server that received it from the client."""
    start_state(ctx, state)
    state.mark_seen(ctx.partition_id)
    cache.put(state.query_id, state.embedding, state.lut)


# ---------------------------------------------------------------------------
# in-process cluster driver


@dataclass
class DistributedResult:
    ids: np.ndarray
    dists: np.ndarray
    metrics: Metrics
    explored: np.ndarray
    handoffs: int
    state_bytes: list[int]
    embedding_sends: dict[int, int]  # destination partition -> count


def run_distributed(ctxs: list[SearchContext], engines: list[ReadEngine], query: np.ndarray,
                    params: SearchParams, start_partition: int = 0, query_id: int = 0,
                    caches: list[EmbeddingCache] | None = None,
                    pools: list[StatePool] | None = None) -> DistributedResult:
    """Drive one query across per-partition contexts, serializing every handoff.

    Uses the same step, handoff and codec logic as a server process; handy
    for exact-equivalence checks without sockets.
    """
    P = len(ctxs)
    caches = caches or [EmbeddingCache() for _ in range(P)]
    here = start_partition
    state = new_query_state(params, query_id, "local", np.asarray(query))
    start_query(ctxs[here], state, caches[here])
    handoffs = 0
    sizes: list[int] = []
    sends: dict[int, int] = {}
    explored: list[np.ndarray] = []
    while True:
        before = len(state.results)
        outcome = advance(ctxs[here], state, engines[here])
        if outcome is CONTINUE:
            explored.append(state.results.ids[before:].copy())
            continue
        if isinstance(outcome, Finished):
            msg = finish(state, outcome)
            metrics = Metrics(*msg.counters)
            if pools is not None and getattr(state, "_buffers", None) is not None:
                pools[here].release(state)
            seq = np.concatenate(explored) if explored else np.empty(0, np.int64)
            return DistributedResult(msg.ids, msg.dists, metrics, seq, handoffs, sizes, sends)
        dest = outcome.partition
        if not 0 <= dest < P:
            raise ValueError(f"unknown partition {dest}")
        if attach_embedding_if_needed(state, dest):
            sends[dest] = sends.get(dest, 0) + 1
        wire = serialize_state(state)
        sizes.append(len(wire))
        if pools is not None and getattr(state, "_buffers", None) is not None:
            pools[here].release(state)
        state = deserialize_state(wire, pools[dest] if pools is not None else None)
        bind_query(ctxs[dest], state, caches[dest])
        here = dest
        handoffs += 1
