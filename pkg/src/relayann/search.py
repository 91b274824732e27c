"""Disk-based beam search and the per-worker fixed-concurrency scheduler.

A query is driven by :func:`query_steps`, a generator that yields the ids it
wants read from disk and receives the decoded records back. The same step
logic serves the single-server search, the scatter-gather shards and the
distributed state machine: with a partition map attached, the generator
returns a handoff as soon as none of the frontier lives on this server.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable

import numba
import numpy as np

from .diskindex import ReadEngine, RecordBatch
from .headindex import HeadIndex, route
from .pq import PQCodebook, approx_dists, build_query_lut
from .vecdata import distances_to

log = logging.getLogger(__name__)

MAX_PARAM = 0xFFFF  # k, L and W travel as 16-bit fields
_MAX_EPOCH = np.iinfo(np.int64).max - 1


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    L: int = 128
    W: int = 8

    def __post_init__(self) -> None:
        if not 1 <= self.k <= self.L:
            raise ValueError(f"need 1 <= k <= L, got k={self.k}, L={self.L}")
        if not 1 <= self.W <= self.L:
            raise ValueError(f"need 1 <= W <= L, got W={self.W}, L={self.L}")
        if self.L > MAX_PARAM:
            raise ValueError("L does not fit the 16-bit wire field")


class Beam:
    """Bounded candidate pool sorted ascending by (approx distance, id)."""

    __slots__ = ("capacity", "ids", "dists", "explored")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.ids = np.empty(0, dtype=np.int64)
        self.dists = np.empty(0, dtype=np.float32)
        self.explored = np.empty(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    def insert(self, ids: np.ndarray, dists: np.ndarray) -> None:
        """Merge new (not already present) candidates and keep the best ``capacity``."""
        if len(ids) == 0:
            return
        all_ids = np.concatenate([self.ids, ids.astype(np.int64)])
        all_d = np.concatenate([self.dists, dists.astype(np.float32)])
        all_x = np.concatenate([self.explored, np.zeros(len(ids), dtype=bool)])
        order = np.lexsort((all_ids, all_d))[: self.capacity]
        self.ids, self.dists, self.explored = all_ids[order], all_d[order], all_x[order]

    def frontier(self, width: int) -> np.ndarray:
        """Ids of the ``width`` best unexplored entries."""
        return self.ids[np.flatnonzero(~self.explored)[:width]]

    def mark_explored(self, ids: np.ndarray) -> None:
        self.explored |= np.isin(self.ids, ids)

    def converged(self) -> bool:
        return bool(self.explored.all())


class ResultList:
    """Exact distances of every explored node, in exploration order.

    Doubles as the explored-id filter: a node in here is never read again.
    """

    __slots__ = ("ids", "dists")

    def __init__(self):
        self.ids = np.empty(0, dtype=np.int64)
        self.dists = np.empty(0, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    def append(self, ids: np.ndarray, dists: np.ndarray) -> None:
        # concatenate casts to the existing dtypes
        self.ids = np.concatenate([self.ids, ids], dtype=np.int64, casting="same_kind")
        self.dists = np.concatenate([self.dists, dists], dtype=np.float32, casting="same_kind")


def rerank(results: ResultList, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest exact distances, ties by id."""
    order = np.lexsort((results.ids, results.dists))[:k]
    return results.ids[order], results.dists[order]


@dataclass
class Metrics:
    hops: int = 0
    inter_partition_hops: int = 0
    distance_comparisons: int = 0
    disk_reads: int = 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.hops, self.inter_partition_hops, self.distance_comparisons, self.disk_reads)

    def __iadd__(self, other: "Metrics") -> "Metrics":
        self.hops += other.hops
        self.inter_partition_hops += other.inter_partition_hops
        self.distance_comparisons += other.distance_comparisons
        self.disk_reads += other.disk_reads
        return self


@dataclass(eq=False)
class SearchState:
    """Everything needed to continue a beam search on any server."""

    params: SearchParams
    query: np.ndarray | None = None
    beam: Beam = None
    results: ResultList = field(default_factory=ResultList)
    metrics: Metrics = field(default_factory=Metrics)
    # set on handoff; the next exploration is then counted as an inter-partition hop
    arrived_by_handoff: bool = False
    lut: np.ndarray | None = field(default=None, repr=False)
    key: object = None

    def __post_init__(self) -> None:
        if self.beam is None:
            self.beam = Beam(self.params.L)


@dataclass
class SearchContext:
    """Per-server read-only search data.

    ``partition_of`` maps global node id -> partition id; ``None`` means
    every node is local (single server or an independent shard).
    """

    codebook: PQCodebook
    codes: np.ndarray
    head: HeadIndex | None = None
    entry_point: int = 0
    partition_of: np.ndarray | None = None
    partition_id: int = 0
    num_entry_points: int = 2

    def __post_init__(self) -> None:
        self._scratch = threading.local()

    def scratch(self) -> tuple[np.ndarray, int]:
        """This thread's seen-mark array and a fresh epoch for it."""
        sc = self._scratch
        mark = getattr(sc, "mark", None)
        if mark is None or sc.epoch >= _MAX_EPOCH:
            mark = sc.mark = np.zeros(self.codes.shape[0], dtype=np.int64)
            sc.epoch = 0
        sc.epoch += 1
        return mark, sc.epoch

    def entry_points(self, query: np.ndarray) -> np.ndarray:
        if self.head is None:
            return np.array([self.entry_point], dtype=np.int64)
        return route(self.head, query, self.num_entry_points)


@dataclass(frozen=True)
class Finished:
    ids: np.ndarray
    dists: np.ndarray


@dataclass(frozen=True)
class Handoff:
    partition: int


def start_state(ctx: SearchContext, state: SearchState) -> None:
    """Build the query LUT and seed the beam with the routed entry points."""
    q = state.query = np.ascontiguousarray(state.query, dtype=np.float32)
    state.lut = build_query_lut(ctx.codebook, q)
    seeds = np.unique(ctx.entry_points(q))
    state.beam.insert(seeds, approx_dists(state.lut, ctx.codes[seeds]))


def next_frontier(ctx: SearchContext, state: SearchState) -> np.ndarray | Finished | Handoff:
    """Decide the next step: local ids to explore, a handoff, or the final answer."""
    frontier = state.beam.frontier(state.params.W)
    if len(frontier) == 0:
        ids, dists = rerank(state.results, state.params.k)
        return Finished(ids, dists)
    if ctx.partition_of is None:
        return frontier
    owners = ctx.partition_of[frontier]
    local = frontier[owners == ctx.partition_id]
    if len(local):
        return local
    return Handoff(int(owners[0]))


@numba.njit(cache=True)
def _expand(beam_ids, beam_d, beam_x, explored, nbr_slots, degrees, result_ids, codes, lut, L,
            mark, epoch):
    """Mark ``explored`` in the beam, PQ-score unseen neighbors and merge.

    Returns the new beam arrays and the number of PQ evaluations. A neighbor
    is unseen if it is neither in the beam nor in the result list. ``mark``
    is per-thread scratch: entries equal to ``epoch`` are seen this call.
    """
    nb = beam_ids.shape[0]
    bx = beam_x.copy()
    for i in range(nb):
        mark[beam_ids[i]] = epoch
        for j in range(explored.shape[0]):
            if beam_ids[i] == explored[j]:
                bx[i] = True
                break
    for i in range(result_ids.shape[0]):
        mark[result_ids[i]] = epoch
    fbuf = np.empty(1, np.float32)
    ubuf = fbuf.view(np.uint32)
    total = 0
    for r in range(degrees.shape[0]):
        total += degrees[r]
    keys = np.empty(total, np.uint64)
    nc = 0
    m = codes.shape[1]
    for r in range(degrees.shape[0]):
        for j in range(degrees[r]):
            c = nbr_slots[r, j]
            if mark[c] == epoch:
                continue
            mark[c] = epoch
            acc = np.float32(0.0)
            for sub in range(m):
                acc += lut[sub, codes[c, sub]]
            # non-negative float32 bit patterns sort like the values
            fbuf[0] = acc
            keys[nc] = (np.uint64(ubuf[0]) << np.uint64(32)) | np.uint64(c)
            nc += 1
    keys = np.sort(keys[:nc])
    total = min(L, nb + nc)
    out_i = np.empty(total, np.int64)
    out_d = np.empty(total, np.float32)
    out_x = np.empty(total, np.bool_)
    a = 0
    b = 0
    low = np.uint64(0xFFFFFFFF)
    for t in range(total):
        take_a = b >= nc
        if not take_a and a < nb:
            kb = keys[b]
            fbuf[0] = beam_d[a]
            ka = (np.uint64(ubuf[0]) << np.uint64(32)) | np.uint64(beam_ids[a])
            take_a = ka < kb
        if take_a:
            out_i[t] = beam_ids[a]
            out_d[t] = beam_d[a]
            out_x[t] = bx[a]
            a += 1
        else:
            out_i[t] = np.int64(keys[b] & low)
            ubuf[0] = np.uint32(keys[b] >> np.uint64(32))
            out_d[t] = fbuf[0]
            out_x[t] = False
            b += 1
    return out_i, out_d, out_x, nc


def explore(ctx: SearchContext, state: SearchState, ids: np.ndarray, records: RecordBatch) -> None:
    """One hop: exact distances for ``ids``, then PQ-scored neighbor insertion."""
    if records.node_ids is not ids and not np.array_equal(records.node_ids, ids):
        raise ValueError("record batch does not match the requested ids")
    exact = distances_to(records.embeddings.astype(np.float32), state.query)
    state.results.append(ids, exact)
    beam = state.beam
    mark, epoch = ctx.scratch()
    beam.ids, beam.dists, beam.explored, evaluated = _expand(
        beam.ids, beam.dists, beam.explored, ids, records.neighbor_slots, records.degrees,
        state.results.ids, ctx.codes, state.lut, beam.capacity, mark, epoch)
    m = state.metrics
    m.distance_comparisons += len(ids) + evaluated
    m.hops += 1
    if state.arrived_by_handoff:
        m.inter_partition_hops += 1
        state.arrived_by_handoff = False


QuerySteps = Generator[np.ndarray, "RecordBatch | BaseException", "Finished | Handoff"]


def query_steps(ctx: SearchContext, state: SearchState) -> QuerySteps:
    """Advance ``state`` until it finishes or must move to another server."""
    while True:
        action = next_frontier(ctx, state)
        if isinstance(action, Handoff):
            # the receiving server counts its first exploration as the inter-partition hop
            state.arrived_by_handoff = True
            return action
        if isinstance(action, Finished):
            return action
        records = yield action
        if isinstance(records, BaseException):
            raise records
        explore(ctx, state, action, records)


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    metrics: Metrics
    explored: np.ndarray  # node ids in exploration order
    latency_us: float = 0.0


def beam_search_local(ctx: SearchContext, engine: ReadEngine, query: np.ndarray,
                      params: SearchParams) -> SearchResult:
    """Run one query to completion on this server, waiting on each read."""
    t0 = time.perf_counter()
    state = SearchState(params, query=np.asarray(query))
    start_state(ctx, state)
    steps = query_steps(ctx, state)
    token = object()
    try:
        ids = next(steps)
        while True:
            state.metrics.disk_reads += engine.submit(token, ids)
            result = None
            while result is None:
                for tok, res in engine.poll(timeout=0.001):
                    if tok is token:
                        result = res
            ids = steps.send(result)
    except StopIteration as stop:
        outcome = stop.value
    if isinstance(outcome, Handoff):
        raise RuntimeError("beam_search_local reached a remote node; attach no partition map")
    return SearchResult(outcome.ids, outcome.dists, state.metrics, state.results.ids.copy(),
                        (time.perf_counter() - t0) * 1e6)


def best_first_search(ctx: SearchContext, engine: ReadEngine, query: np.ndarray, k: int = 10,
                      L: int = 128) -> SearchResult:
    """Beam search exploring one node per hop."""
    return beam_search_local(ctx, engine, query, SearchParams(k=k, L=L, W=1))


# ---------------------------------------------------------------------------
# scheduler


STOP = object()


class Worker:
    """Keeps up to ``active_limit`` query executions in flight on one thread.

    ``prepare`` turns a queue item into a started :class:`SearchState` (or
    ``None`` to skip it); ``complete`` receives each state with its outcome
    (:class:`Finished`, :class:`Handoff` or an exception). In ``batch`` mode
    new work is only pulled once every active query has completed.
    """

    def __init__(self, ctx: SearchContext, engine: ReadEngine, source: queue.Queue,
                 prepare: Callable, complete: Callable, active_limit: int = 8, batch: bool = False,
                 idle_wait: float = 0.05, io_wait: float = 0.002):
        self.ctx = ctx
        self.engine = engine
        self.source = source
        self.prepare = prepare
        self.complete = complete
        self.active_limit = active_limit
        self.batch = batch
        self.idle_wait = idle_wait
        self.io_wait = io_wait
        self.max_active_seen = 0
        self._tokens = itertools.count()

    def run(self) -> None:
        active: dict[int, tuple[QuerySteps, SearchState]] = {}
        ready: deque = deque()
        closed = False
        while True:
            if not closed and len(active) < self.active_limit and not (self.batch and active):
                while len(active) < self.active_limit:
                    try:
                        if active or ready:
                            item = self.source.get_nowait()
                        else:
                            item = self.source.get(timeout=self.idle_wait)
                    except queue.Empty:
                        break
                    if item is STOP:
                        closed = True
                        break
                    try:
                        state = self.prepare(item)
                    except Exception as exc:  # bad query: report, keep serving
                        log.warning("dropping query: %s", exc)
                        continue
                    if state is None:
                        continue
                    token = next(self._tokens)
                    active[token] = (query_steps(self.ctx, state), state)
                    ready.append((token, None))
                self.max_active_seen = max(self.max_active_seen, len(active))
            if closed and not active:
                return
            while ready:
                token, value = ready.popleft()
                steps, state = active[token]
                try:
                    ids = steps.send(value)
                except StopIteration as stop:
                    del active[token]
                    self.complete(state, stop.value)
                    continue
                except Exception as exc:
                    del active[token]
                    self.complete(state, exc)
                    continue
                state.metrics.disk_reads += self.engine.submit(token, ids)
            if active:
                for token, result in self.engine.poll(timeout=self.io_wait):
                    ready.append((token, result))


def scheduler_run(ctx: SearchContext, engines: list[ReadEngine], queries: np.ndarray,
                  params: SearchParams, queries_per_worker: int = 8, batch: bool = False,
                  queue_size: int = 1024) -> tuple[list[SearchResult], float]:
    """Search every query with ``len(engines)`` workers; returns results in query order and seconds elapsed."""
    source: queue.Queue = queue.Queue(maxsize=queue_size)
    results: list[SearchResult | None] = [None] * len(queries)
    starts: dict[int, float] = {}
    lock = threading.Lock()

    def prepare(i: int) -> SearchState:
        starts[i] = time.perf_counter()
        state = SearchState(params, query=np.asarray(queries[i]))
        state.key = i
        start_state(ctx, state)
        return state

    def complete(state: SearchState, outcome) -> None:
        if isinstance(outcome, BaseException):
            raise outcome
        if isinstance(outcome, Handoff):
            raise RuntimeError("scheduler_run context must not carry a partition map")
        i = state.key
        with lock:
            results[i] = SearchResult(outcome.ids, outcome.dists, state.metrics, state.results.ids.copy(),
                                      (time.perf_counter() - starts[i]) * 1e6)

    workers = [Worker(ctx, eng, source, prepare, complete, queries_per_worker, batch) for eng in engines]

    def feed(items: Iterable[int]) -> None:
        for i in items:
            source.put(i)
        for _ in workers:
            source.put(STOP)

    t0 = time.perf_counter()
    feeder = threading.Thread(target=feed, args=(range(len(queries)),), daemon=True)
    feeder.start()
    threads = [threading.Thread(target=w.run, name=f"worker-{i}") for i, w in enumerate(workers[1:], 1)]
    for t in threads:
        t.start()
    workers[0].run()
    for t in threads:
        t.join()
    feeder.join()
    return results, time.perf_counter() - t0

