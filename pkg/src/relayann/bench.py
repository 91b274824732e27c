"""Client driver and experiment harness for local clusters.

A :class:`Client` sends QUERY frames, collects RESULT frames and ACKs the
servers. :class:`LocalCluster` runs one server process per partition on
localhost. The ``run_*`` functions produce the rows of the fixed CSV
schema in :data:`CSV_FIELDS`.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import signal
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .diskindex import build_disk_index
from .graph import VamanaGraph
from .node import ServerConfig, artifact_fingerprint, load_shard_info
from .partition import PartitionMap
from .search import SearchParams
from .transport import (Batcher, MsgType, ProtocolError, QueryMessage, Receiver, ResultMessage, encode_ack,
                        encode_frame, make_query_id, pack_addr, unpack_addr)
from .vecdata import GroundTruth, VectorDataset, recall_at_k

log = logging.getLogger(__name__)

CSV_FIELDS = ["mode", "P", "W", "L", "k", "recall_at_10", "qps", "mean_lat_us", "p50_us", "p90_us", "p99_us",
              "mean_hops", "mean_ip_hops", "mean_cmps", "mean_ios", "failed"]
_CSV_TYPES = {"mode": str, "P": int, "W": int, "L": int, "k": int, "failed": int}


@dataclass
class QueryOutcome:
    query_id: int
    sent: float
    done: float | None = None
    ids: np.ndarray | None = None
    dists: np.ndarray | None = None
    counters: np.ndarray = field(default_factory=lambda: np.zeros(4, np.int64))
    responses: int = 0
    expected: int = 1
    error: bool = False

    @property
    def latency_us(self) -> float:
        return (self.done - self.sent) * 1e6 if self.done is not None else float("nan")


class Client:
    """Talks to a cluster given the listen address of every server.

    In batann mode each query goes to one server (round robin by the
    caller); in scatter mode it goes to all of them and the per-shard
    top-k lists are merged by exact distance.
    """

    def __init__(self, servers: list[str], client_id: int | None = None, listen: str = "127.0.0.1:0",
                 flush_interval: float = 50e-6):
        self.servers = list(servers)
        self.client_id = client_id if client_id is not None else (os.getpid() ^ int(time.time())) & 0xFFFFFFFF
        self.receiver = Receiver(listen, self._on_frame).start()
        self.addr = self.receiver.addr
        self.batcher = Batcher(flush_interval=flush_interval, connect_retries=3).start()
        self._seq = 0
        self._cv = threading.Condition()
        self._outcomes: dict[int, QueryOutcome] = {}
        self._open = 0
        self._ponged: set[int] = set()
        self._ack_all = True
        self.duplicates = 0
        self.unknown = 0
        self.malformed = 0

    def close(self) -> None:
        self.batcher.close()
        self.receiver.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def ping_all(self, timeout: float = 30.0, resend: float = 1.0) -> None:
        """Block until every server answered a PING, re-pinging the silent ones."""
        with self._cv:
            self._ponged = set()
        deadline = time.monotonic() + timeout
        while True:
            with self._cv:
                missing = [i for i in range(len(self.servers)) if i not in self._ponged]
            if not missing:
                return
            left = deadline - time.monotonic()
            if left <= 0:
                raise TimeoutError(f"{len(missing)} servers did not answer")
            for i in missing:
                payload = pack_addr(self.addr) + struct.pack("<H", i)
                self.batcher.send(self.servers[i], encode_frame(MsgType.PING, payload))
            with self._cv:
                self._cv.wait_for(lambda: len(self._ponged) == len(self.servers), min(left, resend))

    def submit(self, embedding: np.ndarray, params: SearchParams, targets: Iterable[int]) -> int:
        targets = list(targets)
        qid = make_query_id(self.client_id, self._seq)
        self._seq += 1
        frame = encode_frame(MsgType.QUERY, QueryMessage(qid, self.addr, params.k, params.L, params.W,
                                                         np.asarray(embedding)).encode())
        with self._cv:
            self._outcomes[qid] = QueryOutcome(qid, time.perf_counter(), expected=len(targets))
            self._open += 1
        for t in targets:
            self.batcher.send(self.servers[t], frame)
        return qid

    def outcome(self, qid: int) -> QueryOutcome:
        return self._outcomes[qid]

    def wait(self, qids: list[int], timeout: float) -> list[QueryOutcome]:
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                if all(self._outcomes[q].done is not None for q in qids):
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self._cv.wait(min(left, 0.1))
            return [self._outcomes[q] for q in qids]

    def _on_frame(self, msg_type: int, payload: bytes) -> None:
        if msg_type == MsgType.PING:
            _, off = unpack_addr(payload, 0)
            with self._cv:
                if len(payload) >= off + 2:
                    self._ponged.add(struct.unpack_from("<H", payload, off)[0])
                self._cv.notify_all()
            return
        if msg_type != MsgType.RESULT:
            self.unknown += 1
            return
        try:
            msg = ResultMessage.decode(payload)
        except ProtocolError:
            self.malformed += 1
            return
        now = time.perf_counter()
        with self._cv:
            out = self._outcomes.get(msg.query_id)
            if out is None:
                self.unknown += 1
                return
            if out.done is not None or out.responses >= out.expected:
                self.duplicates += 1
                return
            out.responses += 1
            out.counters += np.asarray(msg.counters, dtype=np.int64)
            if msg.error:
                out.error = True
            else:
                if out.ids is None:
                    out.ids, out.dists = msg.ids, msg.dists
                else:
                    out.ids = np.concatenate([out.ids, msg.ids])
                    out.dists = np.concatenate([out.dists, msg.dists])
            finished = out.responses == out.expected
            if finished:
                out.done = now
                self._open -= 1
                if out.expected > 1 and out.ids is not None:
                    order = np.lexsort((out.ids, out.dists))
                    out.ids, out.dists = out.ids[order], out.dists[order]
                self._cv.notify_all()
        if finished and out.expected == 1:
            # release the embedding caches of every server the state may have visited
            ack = encode_frame(MsgType.ACK, encode_ack(msg.query_id))
            for s in self.servers:
                self.batcher.send(s, ack)


def _targets(mode: str, i: int, P: int) -> range:
    return range(P) if mode == "scatter" else range(i % P, i % P + 1)


@dataclass
class RunReport:
    mode: str
    P: int
    params: SearchParams
    outcomes: list[QueryOutcome]
    elapsed: float
    recall: float = float("nan")

    @property
    def completed(self) -> list[QueryOutcome]:
        return [o for o in self.outcomes if o.done is not None and not o.error]

    @property
    def failed(self) -> int:
        return len(self.outcomes) - len(self.completed)

    @property
    def qps(self) -> float:
        return len(self.completed) / self.elapsed if self.elapsed > 0 else 0.0

    def latencies_us(self) -> np.ndarray:
        return np.array([o.latency_us for o in self.completed], dtype=np.float64)

    def latency_summary(self) -> dict[str, float]:
        lat = self.latencies_us()
        if len(lat) == 0:
            return {"mean": float("nan"), "p50": float("nan"), "p90": float("nan"), "p99": float("nan")}
        return {"mean": float(lat.mean()), "p50": float(np.percentile(lat, 50)),
                "p90": float(np.percentile(lat, 90)), "p99": float(np.percentile(lat, 99))}

    def counter_means(self) -> np.ndarray:
        done = self.completed
        if not done:
            return np.full(4, np.nan)
        return np.mean([o.counters for o in done], axis=0)

    def counter_totals(self) -> np.ndarray:
        return np.sum([o.counters for o in self.completed], axis=0) if self.completed else np.zeros(4, np.int64)

    def row(self) -> dict:
        lat = self.latency_summary()
        hops, ip, cmps, ios = self.counter_means()
        row = {"mode": self.mode, "P": self.P, "W": self.params.W, "L": self.params.L, "k": self.params.k,
                "recall_at_10": self.recall, "qps": self.qps, "mean_lat_us": lat["mean"], "p50_us": lat["p50"],
                "p90_us": lat["p90"], "p99_us": lat["p99"], "mean_hops": hops, "mean_ip_hops": ip,
                "mean_cmps": cmps, "mean_ios": ios, "failed": self.failed}
        return {k: float(v) if isinstance(v, np.floating) else v for k, v in row.items()}


def _recall(outcomes: list[QueryOutcome], gt: GroundTruth | None, indices: list[int], k: int) -> float:
    if gt is None:
        return float("nan")
    ids, dists, rows = [], [], []
    for o, i in zip(outcomes, indices):
        if o.done is None or o.error:
            ids.append(np.empty(0, np.int64))
            dists.append(np.empty(0, np.float32))
        else:
            ids.append(o.ids[:k])
            dists.append(o.dists[:k])
        rows.append(i)
    sub = GroundTruth(gt.ids[rows], gt.dists[rows])
    return recall_at_k(ids, sub, min(k, 10), result_dists=dists)


def run_throughput(client: Client, queries: np.ndarray, params: SearchParams, mode: str = "batann",
                   gt: GroundTruth | None = None, timeout: float = 30.0) -> RunReport:
    """Issue every query at once (round robin over servers) and wait for all results."""
    P = len(client.servers)
    t0 = time.perf_counter()
    qids = [client.submit(q, params, _targets(mode, i, P)) for i, q in enumerate(queries)]
    outs = client.wait(qids, timeout + 0.0)
    done = [o.done for o in outs if o.done is not None]
    elapsed = (max(done) if done else time.perf_counter()) - t0
    rep = RunReport(mode, P, params, outs, elapsed)
    rep.recall = _recall(outs, gt, list(range(len(queries))), params.k)
    return rep


def run_latency(client: Client, queries: np.ndarray, params: SearchParams, send_rate: float,
                mode: str = "batann", arrivals: str = "fixed", seed: int = 0, gt: GroundTruth | None = None,
                timeout: float = 30.0) -> RunReport:
    """Open-loop arrivals at ``send_rate`` queries/s (fixed spacing or Poisson)."""
    P = len(client.servers)
    n = len(queries)
    if n == 0 or send_rate <= 0:
        return RunReport(mode, P, params, [], 0.0)
    if arrivals == "poisson":
        gaps = np.random.default_rng(seed).exponential(1.0 / send_rate, n)
    elif arrivals == "fixed":
        gaps = np.full(n, 1.0 / send_rate)
    else:
        raise ValueError(f"arrivals must be fixed or poisson, got {arrivals!r}")
    offsets = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
    qids = []
    t0 = time.perf_counter()
    for i, q in enumerate(queries):
        target = t0 + offsets[i]
        while True:
            left = target - time.perf_counter()
            if left <= 0:
                break
            time.sleep(left if left > 0.002 else 0)
        qids.append(client.submit(q, params, _targets(mode, i, P)))
    outs = client.wait(qids, timeout)
    done = [o.done for o in outs if o.done is not None]
    elapsed = (max(done) if done else time.perf_counter()) - t0
    rep = RunReport(mode, P, params, outs, elapsed)
    rep.recall = _recall(outs, gt, list(range(n)), params.k)
    return rep


# ---------------------------------------------------------------------------
# local clusters


def free_ports(n: int) -> list[int]:
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


class LocalCluster:
    """One ``relayann serve`` process per config, on localhost."""

    def __init__(self, configs: list[ServerConfig], workdir: str | os.PathLike, log_level: str = "WARNING"):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.configs = configs
        self.log_level = log_level
        self.procs: list[subprocess.Popen] = []
        self.exit_codes: list[int | None] = []

    @property
    def addrs(self) -> list[str]:
        return [c.listen for c in self.configs]

    def start(self, ready_timeout: float = 60.0) -> "LocalCluster":
        for cfg in self.configs:
            path = self.workdir / f"server{cfg.partition_id}.conf"
            if cfg.stats is None:
                cfg.stats = str(self.workdir / f"server{cfg.partition_id}.stats.json")
            path.write_text(cfg.to_text())
            errlog = open(self.workdir / f"server{cfg.partition_id}.log", "w")
            self.procs.append(subprocess.Popen(
                [sys.executable, "-m", "relayann.cli", "--log-level", self.log_level, "serve", "--config", str(path)],
                stdout=errlog, stderr=subprocess.STDOUT))
        with Client(self.addrs) as c:
            try:
                c.ping_all(ready_timeout)
            except TimeoutError:
                self.stop()
                raise
        return self

    def stop(self, timeout: float = 10.0) -> list[int | None]:
        for p in self.procs:
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        codes = []
        for p in self.procs:
            try:
                codes.append(p.wait(timeout))
            except subprocess.TimeoutExpired:
                p.kill()
                codes.append(p.wait())
        self.exit_codes = codes
        return codes

    def stats(self) -> list[dict]:
        out = []
        for cfg in self.configs:
            path = Path(cfg.stats)
            out.append(json.loads(path.read_text()) if path.exists() else {})
        return out

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def batann_configs(workdir: str | os.PathLike, graph: VamanaGraph, dataset: VectorDataset, pmap: PartitionMap,
                   pq_path: str, codes_path: str, head_path: str, pmap_path: str, **overrides) -> list[ServerConfig]:
    """Write per-partition disk indexes (reused if present) and return server configs."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    P = pmap.num_partitions
    ports = free_ports(P)
    peers = [f"127.0.0.1:{p}" for p in ports]
    fp = artifact_fingerprint(pmap.num_points, dataset.dim, pmap.assignments)
    configs = []
    for p in range(P):
        index = workdir / f"part{p}.disk"
        if not index.exists():
            build_disk_index(graph, dataset, pmap, p, index)
        configs.append(ServerConfig(partition_id=p, listen=peers[p], peers=peers, index=str(index), pq=pq_path,
                                    codes=codes_path, head=head_path, partition_map=pmap_path,
                                    elem_kind=dataset.elem_kind, fingerprint=fp, **overrides))
    return configs


def scatter_configs(shard_dir: str | os.PathLike, P: int, elem_kind: str = "u8", **overrides) -> list[ServerConfig]:
    ports = free_ports(P)
    peers = [f"127.0.0.1:{p}" for p in ports]
    configs = []
    for p in range(P):
        info = load_shard_info(Path(shard_dir) / f"shard{p}.json")
        configs.append(ServerConfig(partition_id=p, listen=peers[p], peers=peers, index=info.index, pq=info.pq,
                                    codes=info.codes, mode="scatter", shard_ids=info.ids, entry_point=info.medoid,
                                    elem_kind=elem_kind, **overrides))
    return configs


# ---------------------------------------------------------------------------
# sweeps and CSV


@dataclass
class SweepSpec:
    queries: np.ndarray
    gt: GroundTruth | None
    # (mode, P) -> server configs for a fresh cluster
    cluster_configs: Callable[[str, int], list[ServerConfig]]
    workdir: str
    Ls: list[int] = field(default_factory=lambda: [20, 40, 80])
    Ws: list[int] = field(default_factory=lambda: [1, 8])
    Ps: list[int] = field(default_factory=lambda: [1])
    modes: list[str] = field(default_factory=lambda: ["batann"])
    k: int = 10
    timeout: float = 30.0


def run_sweep(spec: SweepSpec) -> list[dict]:
    """One throughput run per (mode, P, W, L); a cluster is started per (mode, P)."""
    rows = []
    for mode in spec.modes:
        for P in spec.Ps:
            configs = spec.cluster_configs(mode, P)
            with LocalCluster(configs, Path(spec.workdir) / f"{mode}-P{P}") as cluster:
                with Client(cluster.addrs) as client:
                    for W in spec.Ws:
                        for L in spec.Ls:
                            params = SearchParams(k=spec.k, L=L, W=W)
                            rep = run_throughput(client, spec.queries, params, mode, spec.gt, spec.timeout)
                            rows.append(rep.row())
                            log.info("%s", rows[-1])
    return rows


def write_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in CSV_FIELDS})


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [{k: _CSV_TYPES.get(k, float)(v) for k, v in row.items()} for row in reader]
