"""Server process: one partition of a batann cluster or one scatter-gather shard.

Threads: a receiver decoding frames into pooled objects, ``workers`` search
workers (each a :class:`~relayann.search.Worker` with its own read engine)
and one batcher writing outgoing frames.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import signal
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diskindex import (DiskIndex, FakeReadEngine, MemoryDevice, ReadEngine, SyncReadEngine,
                        ThreadedReadEngine, build_disk_index, read_nodes)
from .distsearch import (Continue, EmbeddingCache, advance, QueryState, StatePool, attach_embedding_if_needed,
                         bind_query, deserialize_state, finish, new_query_state, serialize_state, start_query)
from .graph import build_vamana
from .headindex import HeadIndex
from .partition import PartitionMap
from .pq import PQCodebook, encode, load_codes, save_codes, train_pq
from .search import STOP, Finished, Handoff, SearchContext, SearchParams, Worker, start_state
from .transport import (FLUSH_INTERVAL, MAX_BATCH_BYTES, Batcher, MsgType, ProtocolError, QueryMessage, Receiver,
                        ResultMessage, decode_ack, encode_frame, unpack_addr)
from .vecdata import VectorDataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ServerConfig:
    partition_id: int
    listen: str
    peers: list[str]             # listen address of every partition, by id
    index: str
    pq: str
    codes: str
    mode: str = "batann"         # or "scatter"
    head: str | None = None
    partition_map: str | None = None
    shard_ids: str | None = None  # scatter: local id -> global id
    entry_point: int = 0          # scatter: shard medoid (local id)
    elem_kind: str = "u8"
    workers: int = 8
    queries_per_worker: int = 8
    num_entry_points: int = 2
    device: str = "file"          # file | memory | fake
    fake_latency_us: float = 100.0
    io_threads: int = 4
    max_batch_bytes: int = MAX_BATCH_BYTES
    flush_interval_us: float = FLUSH_INTERVAL * 1e6
    queue_size: int = 1024
    pool_size: int = 256
    cache_ttl: float = 30.0
    drain_timeout: float = 2.0
    fingerprint: str | None = None
    stats: str | None = None      # JSON written on shutdown
    role: str = "server"

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ServerConfig":
        return cls.from_dict(parse_config(Path(path).read_text()))

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "ServerConfig":
        kinds = {f: t for f, t in cls.__annotations__.items()}
        kw: dict = {}
        for key, value in raw.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            t = kinds[key]
            if key == "peers":
                kw[key] = [p.strip() for p in value.split(",") if p.strip()]
            elif t == "int":
                kw[key] = int(value)
            elif t == "float":
                kw[key] = float(value)
            else:
                kw[key] = value
        for required in ("partition_id", "listen", "peers", "index", "pq", "codes"):
            if required not in kw:
                raise ConfigError(f"config is missing {required!r}")
        cfg = cls(**kw)
        if cfg.role != "server":
            raise ConfigError(f"role={cfg.role!r} cannot be served; only role=server")
        if cfg.mode not in ("batann", "scatter"):
            raise ConfigError(f"mode must be batann or scatter, got {cfg.mode!r}")
        if cfg.device not in ("file", "memory", "fake"):
            raise ConfigError(f"device must be file, memory or fake, got {cfg.device!r}")
        if not 0 <= cfg.partition_id < len(cfg.peers):
            raise ConfigError("partition_id has no entry in peers")
        if cfg.mode == "batann" and (cfg.head is None or cfg.partition_map is None):
            raise ConfigError("batann mode needs head and partition_map")
        return cfg

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if value is None:
                continue
            if key == "peers":
                value = ",".join(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def artifact_fingerprint(num_points: int, dim: int, assignments: np.ndarray | None) -> str:
    """Short digest tying a server's artifacts to one build of the corpus."""
    h = hashlib.sha256(struct.pack("<II", num_points, dim))
    if assignments is not None:
        h.update(np.ascontiguousarray(assignments, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# scatter-gather shards


@dataclass
class ShardInfo:
    partition_id: int
    num_points: int
    medoid: int  # local id
    index: str
    pq: str
    codes: str
    ids: str


def build_scatter_gather_indexes(dataset: VectorDataset, partition_map: PartitionMap, out_dir: str | os.PathLike,
                                 R: int = 32, L_build: int = 64, alpha: float = 1.2, pq_subspaces: int = 32,
                                 seed: int = 0) -> list[ShardInfo]:
    """Independent graph, PQ, and disk index over each partition's points only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards = []
    for p in range(partition_map.num_partitions):
        gids = partition_map.members(p).astype(np.int64)
        if len(gids) == 0:
            raise ValueError(f"partition {p} is empty")
        local = dataset.subset(gids)
        graph = build_vamana(local, R=R, L_build=L_build, alpha=alpha, seed=seed)
        cb = train_pq(local, m=min(pq_subspaces, local.dim), seed=seed)
        base = out / f"shard{p}"
        info = ShardInfo(p, len(gids), int(graph.medoid), f"{base}.disk", f"{base}.pq", f"{base}.codes",
                         f"{base}.ids")
        graph.save(f"{base}.graph")
        cb.save(info.pq)
        save_codes(info.codes, encode(cb, local))
        gids.astype("<u4").tofile(info.ids)
        build_disk_index(graph, local, None, 0, info.index)
        Path(f"{base}.json").write_text(json.dumps(asdict(info)))
        shards.append(info)
        log.info("shard %d: %d points, mean degree %.1f", p, len(gids), graph.degrees.mean())
    return shards


def load_shard_info(path: str | os.PathLike) -> ShardInfo:
    return ShardInfo(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# server


@dataclass
class ServerStats:
    queries: int = 0
    states_in: int = 0
    acks: int = 0
    pings: int = 0
    results: int = 0
    errors: int = 0
    handoffs: int = 0
    embeddings_sent: int = 0
    malformed: int = 0
    unexpected: int = 0
    rejected_draining: int = 0
    # work done on this server, for conservation checks against client sums
    hops: int = 0
    inter_partition_hops: int = 0
    distance_comparisons: int = 0
    disk_reads: int = 0
    extra: dict = field(default_factory=dict)


class Server:
    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.stats = ServerStats()
        self._lock = threading.Lock()
        self._load()
        self.cache = EmbeddingCache(cfg.cache_ttl)
        self.pool = StatePool(cfg.pool_size)
        self.states: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
        self._inflight = 0
        self._draining = threading.Event()
        self._stopped = threading.Event()
        self.batcher = Batcher(cfg.max_batch_bytes, cfg.flush_interval_us * 1e-6, on_failure=self._send_failed)
        self.receiver: Receiver | None = None
        self.workers: list[Worker] = []
        self._threads: list[threading.Thread] = []

    # -- setup

    def _load(self) -> None:
        cfg = self.cfg
        self.codebook = PQCodebook.load(cfg.pq)
        self.codes = load_codes(cfg.codes)
        self.index = DiskIndex(cfg.index, device=MemoryDevice(cfg.index) if cfg.device != "file" else None)
        meta = self.index.meta
        if meta.dim != self.codebook.dim:
            raise ConfigError("index and codebook dimensions differ")
        if meta.elem_kind != cfg.elem_kind:
            raise ConfigError(f"index holds {meta.elem_kind} vectors, config says {cfg.elem_kind}")
        self.global_ids = None
        if cfg.mode == "batann":
            pmap = PartitionMap.load(cfg.partition_map)
            head = HeadIndex.load(cfg.head, cfg.elem_kind)
            if pmap.num_partitions != len(cfg.peers):
                raise ConfigError(f"partition map has {pmap.num_partitions} partitions, peers list {len(cfg.peers)}")
            if self.codes.shape[0] != pmap.num_points:
                raise ConfigError("PQ codes and partition map cover different corpora")
            if head.vectors.dim != meta.dim:
                raise ConfigError("head index dimension differs from the disk index")
            if not np.array_equal(self.index.sector_map.nodes, pmap.members(cfg.partition_id)):
                raise ConfigError("disk index nodes do not match this partition of the map")
            fp = artifact_fingerprint(pmap.num_points, meta.dim, pmap.assignments)
            self.ctx = SearchContext(self.codebook, self.codes, head, 0, pmap.assignments.astype(np.int64),
                                     cfg.partition_id, cfg.num_entry_points)
            self.num_partitions = pmap.num_partitions
        else:
            self.global_ids = np.fromfile(cfg.shard_ids, dtype="<u4").astype(np.int64)
            if self.codes.shape[0] != len(self.global_ids) or meta.num_local != len(self.global_ids):
                raise ConfigError("shard codes, ids and index sizes differ")
            fp = artifact_fingerprint(len(self.global_ids), meta.dim, None)
            self.ctx = SearchContext(self.codebook, self.codes, None, cfg.entry_point)
            self.num_partitions = len(cfg.peers)
        self.fingerprint = fp
        if cfg.fingerprint is not None and cfg.fingerprint != fp:
            raise ConfigError(f"artifact fingerprint {fp} does not match configured {cfg.fingerprint}")
        self._warmup()

    def _warmup(self) -> None:
        # compile or load every jitted kernel before the server answers pings
        engine = SyncReadEngine(self.index)
        query = read_nodes(engine, self.index.sector_map.nodes[:1]).embeddings[0]
        state = new_query_state(SearchParams(10, 16, 4), 0, "127.0.0.1:1", query)
        start_query(self.ctx, state, EmbeddingCache())
        while isinstance(advance(self.ctx, state, engine), Continue):
            pass
        deserialize_state(serialize_state(state))

    def _engine(self) -> ReadEngine:
        cfg = self.cfg
        if cfg.device == "fake":
            return FakeReadEngine(self.index, cfg.fake_latency_us * 1e-6, spin=False)
        if cfg.device == "memory":
            return SyncReadEngine(self.index)
        return ThreadedReadEngine(self.index, cfg.io_threads)

    # -- lifecycle

    def start(self) -> "Server":
        self.receiver = Receiver(self.cfg.listen, self._on_frame).start()
        self.batcher.start()
        for i in range(self.cfg.workers):
            w = Worker(self.ctx, self._engine(), self.states, self._prepare, self._complete,
                       self.cfg.queries_per_worker, idle_wait=0.02, io_wait=0.001)
            self.workers.append(w)
            t = threading.Thread(target=w.run, name=f"worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("partition %d (%s) listening on %s, fingerprint %s", self.cfg.partition_id, self.cfg.mode,
                 self.receiver.addr, self.fingerprint)
        return self

    @property
    def addr(self) -> str:
        return self.receiver.addr

    def request_stop(self) -> None:
        self._draining.set()

    def wait(self) -> None:
        """Serve until :meth:`request_stop`, then drain and shut down."""
        last_sweep = time.monotonic()
        while not self._draining.wait(0.2):
            if time.monotonic() - last_sweep > 1.0:
                self.cache.expire()
                last_sweep = time.monotonic()
        self.shutdown()

    def shutdown(self) -> None:
        if self._stopped.is_set():
            return
        self._draining.set()
        deadline = time.monotonic() + self.cfg.drain_timeout
        while time.monotonic() < deadline:
            with self._lock:
                busy = self._inflight
            if busy == 0 and self.states.empty():
                break
            time.sleep(0.01)
        for _ in self.workers:
            try:
                self.states.put(STOP, timeout=0.5)
            except queue.Full:
                break
        for t in self._threads:
            t.join(0.5)
        self.batcher.close()
        if self.receiver is not None:
            self.receiver.close()
        self._stopped.set()
        self.write_stats()

    def snapshot(self) -> dict:
        s = asdict(self.stats)
        dec = self.receiver.stats if self.receiver is not None else None
        s["extra"] = {
            "fingerprint": self.fingerprint,
            "decoder_errors": dec.errors if dec else 0,
            "handler_errors": self.receiver.handler_errors if self.receiver else 0,
            "max_embedding_receipts": self.cache.max_receipts,
            "cache_entries": len(self.cache),
            "cache_evicted_by_ack": self.cache.evicted_by_ack,
            "pool_allocations": self.pool.stats.allocations,
            "pool_transient": self.pool.stats.transient,
            "batcher_writes": self.batcher.stats.writes,
            "batcher_frames": self.batcher.stats.frames,
            "failed_frames": self.batcher.stats.failed_frames,
            "max_active_per_worker": max((w.max_active_seen for w in self.workers), default=0),
        }
        return s

    def write_stats(self) -> None:
        if self.cfg.stats:
            Path(self.cfg.stats).write_text(json.dumps(self.snapshot()))

    # -- receiver thread

    def _on_frame(self, msg_type: int, payload: bytes) -> None:
        try:
            if msg_type == MsgType.QUERY:
                msg = QueryMessage.decode(payload)
                if self._draining.is_set():
                    self.stats.rejected_draining += 1
                    self._send_error(msg.query_id, msg.client_addr)
                    return
                self.stats.queries += 1
                self._enqueue(("query", msg))
            elif msg_type == MsgType.STATE:
                st = deserialize_state(payload, self.pool)
                self.stats.states_in += 1
                self._enqueue(("state", st))
            elif msg_type == MsgType.ACK:
                self.cache.ack(decode_ack(payload))
                self.stats.acks += 1
            elif msg_type == MsgType.PING:
                addr, _ = unpack_addr(payload, 0)
                self.stats.pings += 1
                self.batcher.send(addr, encode_frame(MsgType.PING, payload))
            else:
                self.stats.unexpected += 1
        except (ProtocolError, ValueError) as exc:
            self.stats.malformed += 1
            log.warning("malformed %s frame: %s", MsgType(msg_type).name, exc)

    def _enqueue(self, item) -> None:
        with self._lock:
            self._inflight += 1
        self.states.put(item)  # blocks when full: backpressure on the sockets

    # -- worker threads

    def _prepare(self, item):
        kind, obj = item
        try:
            if kind == "query":
                params = SearchParams(obj.k, obj.L, obj.W)
                state = new_query_state(params, obj.query_id, obj.client_addr, obj.embedding, self.pool.acquire())
                state.key = self._snapshot_metrics(state)
                if self.cfg.mode == "batann":
                    start_query(self.ctx, state, self.cache)
                else:
                    start_state(self.ctx, state)
                return state
            state = obj
            bind_query(self.ctx, state, self.cache)
            state.key = self._snapshot_metrics(state)
            return state
        except Exception as exc:
            log.warning("cannot start query: %s", exc)
            qid = obj.query_id
            addr = obj.client_addr
            if kind == "state":
                self.pool.release(obj)
            self._send_error(qid, addr)
            self._done()
            return None

    @staticmethod
    def _snapshot_metrics(state: QueryState) -> tuple[int, int, int, int]:
        return state.metrics.as_tuple()

    def _account(self, state: QueryState) -> None:
        before = state.key or (0, 0, 0, 0)
        now = state.metrics.as_tuple()
        with self._lock:
            s = self.stats
            s.hops += now[0] - before[0]
            s.inter_partition_hops += now[1] - before[1]
            s.distance_comparisons += now[2] - before[2]
            s.disk_reads += now[3] - before[3]

    def _complete(self, state: QueryState, outcome) -> None:
        try:
            self._account(state)
            if isinstance(outcome, Finished):
                msg = finish(state, outcome)
                if self.global_ids is not None:
                    msg.ids = self.global_ids[msg.ids]
                self.batcher.send(state.client_addr, encode_frame(MsgType.RESULT, msg.encode()))
                with self._lock:
                    self.stats.results += 1
            elif isinstance(outcome, Handoff):
                dest = outcome.partition
                if not 0 <= dest < self.num_partitions or dest == self.cfg.partition_id:
                    raise ValueError(f"handoff to unknown partition {dest}")
                sent_embedding = attach_embedding_if_needed(state, dest)
                frame = encode_frame(MsgType.STATE, serialize_state(state))
                self.batcher.send(self.cfg.peers[dest], frame)
                with self._lock:
                    self.stats.handoffs += 1
                    self.stats.embeddings_sent += int(sent_embedding)
            else:
                raise outcome
        except Exception as exc:
            log.warning("query %#x aborted: %s", state.query_id, exc)
            self._send_error(state.query_id, state.client_addr)
        finally:
            self.pool.release(state)
            self._done()

    def _done(self) -> None:
        with self._lock:
            self._inflight -= 1

    def _send_error(self, query_id: int, client_addr: str) -> None:
        msg = ResultMessage(query_id, np.empty(0, np.int64), np.empty(0, np.float32), error=True)
        with self._lock:
            self.stats.errors += 1
        try:
            self.batcher.send(client_addr, encode_frame(MsgType.RESULT, msg.encode()))
        except Exception:  # no route back to the client
            log.exception("cannot report error for query %#x", query_id)

    def _send_failed(self, dest: str, frames: list[bytes]) -> None:
        log.error("%d frames to %s lost", len(frames), dest)


def serve(cfg: ServerConfig) -> int:
    """Run a server until SIGTERM/SIGINT; returns the process exit code."""
    server = Server(cfg).start()

    def on_signal(signum, frame):
        log.info("signal %d: draining", signum)
        server.request_stop()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    server.wait()
    return 0
