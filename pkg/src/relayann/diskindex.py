"""Sector-packed per-partition disk index and the read engines that serve it.

Record layout (little-endian)::

    node_id u32 | embedding dim*elem | degree u32 | R x u32 neighbor ids (padded)

Records never straddle a 4096-byte sector; as many whole records as fit are
packed per sector in ascending node-id order. Neighbor ids are global, so
edges that leave the partition survive.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import mmap
import os
import queue
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .graph import VamanaGraph
from .partition import PartitionMap
from .vecdata import ELEM_CODES, ELEM_DTYPES, ELEM_FROM_CODE, VectorDataset

log = logging.getLogger(__name__)

SECTOR = 4096
MAGIC = b"RLYDISK1"
_HEADER = struct.Struct("<8sIIIII")  # magic, num_local, dim, elem code, R, num_sectors
_MAP_ENTRY = np.dtype([("node", "<u4"), ("sector", "<u4"), ("offset", "<u4")])


class DiskIndexError(RuntimeError):
    pass


def record_size(dim: int, elem_kind: str, R: int) -> int:
    return 4 + dim * ELEM_DTYPES[elem_kind].itemsize + 4 + 4 * R


def record_dtype(dim: int, elem_kind: str, R: int) -> np.dtype:
    return np.dtype([
        ("node", "<u4"),
        ("emb", ELEM_DTYPES[elem_kind].newbyteorder("<"), (dim,)),
        ("deg", "<u4"),
        ("nbrs", "<u4", (R,)),
    ])


@dataclass
class DiskNodeRecord:
    node_id: int
    embedding: np.ndarray
    neighbors: np.ndarray


@dataclass
class ReadPlan:
    node_ids: np.ndarray     # in request order
    sectors: np.ndarray      # distinct sectors, ascending
    byte_starts: np.ndarray  # per node: offset of its record in the concatenated sectors


class RecordBatch:
    """Records fetched by one submission, in request order."""

    __slots__ = ("node_ids", "_recs", "degrees", "neighbor_slots")

    def __init__(self, node_ids: np.ndarray, recs: np.ndarray):
        self.node_ids = node_ids
        self._recs = recs
        # plain contiguous copies: field views of a record array are slow to hand to compiled code
        self.degrees = recs["deg"].astype(np.int64)
        self.neighbor_slots = np.ascontiguousarray(recs["nbrs"])  # (len, R); entries past each degree are padding

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def embeddings(self) -> np.ndarray:
        return self._recs["emb"]

    def __getitem__(self, node_id: int) -> DiskNodeRecord:
        hit = np.flatnonzero(self.node_ids == node_id)
        if len(hit) == 0:
            raise KeyError(node_id)
        r = self._recs[hit[0]]
        return DiskNodeRecord(int(node_id), r["emb"], r["nbrs"][: r["deg"]].astype(np.int64))

    def __iter__(self):
        return iter(int(i) for i in self.node_ids)

    def __contains__(self, node_id) -> bool:
        return bool(np.any(self.node_ids == node_id))

    def to_dict(self) -> dict[int, DiskNodeRecord]:
        return {i: self[i] for i in self}


@dataclass
class SectorMap:
    """Local node id -> (sector index, byte offset within the sector)."""

    nodes: np.ndarray  # ascending global ids
    sectors: np.ndarray
    offsets: np.ndarray
    _slot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        size = int(self.nodes.max()) + 1 if len(self.nodes) else 0
        self._slot = np.full(size, -1, dtype=np.int64)
        self._slot[self.nodes] = np.arange(len(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def slot(self, node_id: int) -> int:
        if 0 <= node_id < len(self._slot):
            return int(self._slot[node_id])
        return -1

    def slots(self, node_ids: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`slot`."""
        inside = (node_ids >= 0) & (node_ids < len(self._slot))
        out = np.full(len(node_ids), -1, dtype=np.int64)
        out[inside] = self._slot[node_ids[inside]]
        return out

    def is_local(self, node_id: int) -> bool:
        return self.slot(node_id) >= 0

    def locate(self, node_id: int) -> tuple[int, int]:
        s = self.slot(node_id)
        if s < 0:
            raise DiskIndexError(f"node {node_id} is not stored in this partition")
        return int(self.sectors[s]), int(self.offsets[s])

    def save(self, path: str | os.PathLike) -> None:
        arr = np.empty(len(self.nodes), dtype=_MAP_ENTRY)
        arr["node"], arr["sector"], arr["offset"] = self.nodes, self.sectors, self.offsets
        with open(path, "wb") as f:
            f.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SectorMap":
        arr = np.fromfile(path, dtype=_MAP_ENTRY)
        return cls(arr["node"].astype(np.int64), arr["sector"].astype(np.int64), arr["offset"].astype(np.int64))


@dataclass
class DiskIndexMeta:
    num_local: int
    dim: int
    elem_kind: str
    max_degree: int
    num_sectors: int

    @property
    def record_size(self) -> int:
        return record_size(self.dim, self.elem_kind, self.max_degree)


def sector_map_path(index_path: str | os.PathLike) -> str:
    return os.fspath(index_path) + ".smap"


def build_disk_index(graph: VamanaGraph, dataset: VectorDataset, partition_map: PartitionMap | None,
                     partition_id: int, out_path: str | os.PathLike,
                     local_ids: np.ndarray | None = None) -> SectorMap:
    """Write the partition's records to ``out_path`` and its sector map sidecar.

    ``local_ids`` overrides the partition map (used by shard-local indexes
    whose ids are already local).
    """
    if local_ids is None:
        if partition_map is None:
            local_ids = np.arange(dataset.num_points, dtype=np.int64)
        else:
            local_ids = partition_map.members(partition_id).astype(np.int64)
    local_ids = np.sort(np.asarray(local_ids, dtype=np.int64))
    if len(local_ids) == 0:
        raise DiskIndexError(f"partition {partition_id} is empty")
    R = graph.max_degree
    rsize = record_size(dataset.dim, dataset.elem_kind, R)
    if rsize > SECTOR:
        raise DiskIndexError(f"record of {rsize} bytes exceeds the {SECTOR}-byte sector")
    per_sector = SECTOR // rsize
    n = len(local_ids)
    num_sectors = -(-n // per_sector)
    slots = np.arange(n)
    sectors = slots // per_sector
    offsets = (slots % per_sector) * rsize

    rec = record_dtype(dataset.dim, dataset.elem_kind, R)
    body = np.zeros(num_sectors * SECTOR, dtype=np.uint8)
    recs = np.zeros(n, dtype=rec)
    recs["node"] = local_ids
    recs["emb"] = dataset.data[local_ids]
    recs["deg"] = graph.degrees[local_ids]
    nb = graph.adjacency[local_ids]
    recs["nbrs"] = np.where(nb >= 0, nb, 0)
    raw = recs.view(np.uint8).reshape(n, rsize)
    for i in range(per_sector):
        rows = raw[i::per_sector]
        starts = (np.arange(len(rows)) * SECTOR + i * rsize)
        idx = starts[:, None] + np.arange(rsize)[None, :]
        body[idx] = rows

    header = bytearray(SECTOR)
    _HEADER.pack_into(header, 0, MAGIC, n, dataset.dim, ELEM_CODES[dataset.elem_kind], R, num_sectors)
    with open(out_path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())
    smap = SectorMap(local_ids, sectors.astype(np.int64), offsets.astype(np.int64))
    smap.save(sector_map_path(out_path))
    log.info("disk index %s: %d nodes, %d per sector, %d sectors", out_path, n, per_sector, num_sectors)
    return smap


def read_meta(path: str | os.PathLike) -> DiskIndexMeta:
    with open(path, "rb") as f:
        head = f.read(SECTOR)
    if len(head) < _HEADER.size:
        raise DiskIndexError(f"{path}: truncated header")
    magic, n, dim, code, R, ns = _HEADER.unpack_from(head)
    if magic != MAGIC:
        raise DiskIndexError(f"{path}: bad magic {magic!r}")
    return DiskIndexMeta(n, dim, ELEM_FROM_CODE[code], R, ns)


@numba.njit(cache=True)
def _plan(ids, slot_of, slot_sector, slot_offset, sectors_out, starts_out):
    """Distinct sectors (ascending) and each node's byte start in their concatenation.

    Returns the number of distinct sectors, or ``-(i + 1)`` when ``ids[i]``
    is not local.
    """
    k = ids.shape[0]
    sec = np.empty(k, np.int64)
    for i in range(k):
        nid = ids[i]
        if nid < 0 or nid >= slot_of.shape[0] or slot_of[nid] < 0:
            return -(i + 1)
        sec[i] = slot_sector[slot_of[nid]]
    uniq = np.unique(sec)
    for i in range(uniq.shape[0]):
        sectors_out[i] = uniq[i]
    for i in range(k):
        pos = np.searchsorted(uniq, sec[i])
        starts_out[i] = pos * 4096 + slot_offset[slot_of[ids[i]]]
    return uniq.shape[0]


@numba.njit(cache=True)
def _gather(raw, sector_base, starts, node_ids, out):
    """Copy each record out of ``raw`` and check its stored node id.

    ``sector_base[j]`` is where the plan's j-th sector begins in ``raw``.
    Returns -1 on success, else the index of the first mismatched record
    (or of one that would run past the end of ``raw``).
    """
    size = out.shape[1]
    for i in range(out.shape[0]):
        src = sector_base[starts[i] // 4096] + starts[i] % 4096
        if src + size > raw.shape[0]:
            return i
        out[i, :] = raw[src : src + size]
        stored = (np.int64(out[i, 0]) | (np.int64(out[i, 1]) << 8) | (np.int64(out[i, 2]) << 16)
                  | (np.int64(out[i, 3]) << 24))
        if stored != node_ids[i]:
            return i
    return -1


# ---------------------------------------------------------------------------
# devices: synchronous sector access


class FileDevice:
    """Positional sector reads from the index file.

    ``direct`` requests O_DIRECT (unbuffered) reads; ``None`` tries it and
    falls back to buffered I/O where the filesystem refuses it.
    """

    def __init__(self, path: str | os.PathLike, direct: bool | None = None):
        self.path = os.fspath(path)
        self.direct = False
        flags = os.O_RDONLY
        if direct is not False and hasattr(os, "O_DIRECT"):
            try:
                fd = os.open(self.path, flags | os.O_DIRECT)
                buf = mmap.mmap(-1, SECTOR)
                os.preadv(fd, [buf], 0)
                self.fd = fd
                self.direct = True
            except OSError:
                if direct:
                    raise
        if not self.direct:
            self.fd = os.open(self.path, flags)
        self._local = threading.local()

    def _buffer(self) -> mmap.mmap:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = self._local.buf = mmap.mmap(-1, SECTOR)
        return buf

    def read_sector(self, sector: int) -> bytes:
        off = SECTOR * (1 + sector)
        if self.direct:
            buf = self._buffer()
            got = os.preadv(self.fd, [buf], off)
            data = bytes(buf[:got])
        else:
            data = os.pread(self.fd, SECTOR, off)
        if len(data) != SECTOR:
            raise DiskIndexError(f"short read of sector {sector} from {self.path}")
        return data

    def close(self) -> None:
        os.close(self.fd)


class MemoryDevice:
    """In-memory copy of an index file; the deterministic fake device.

    ``array`` exposes the whole file so records can be gathered without
    copying sectors first.
    """

    def __init__(self, path_or_bytes):
        if isinstance(path_or_bytes, (bytes, bytearray)):
            self._raw = bytes(path_or_bytes)
        else:
            with open(path_or_bytes, "rb") as f:
                self._raw = f.read()
        self.array = np.frombuffer(self._raw, dtype=np.uint8)
        self.direct = False

    def read_sector(self, sector: int) -> bytes:
        off = SECTOR * (1 + sector)
        data = self._raw[off : off + SECTOR]
        if len(data) != SECTOR:
            raise DiskIndexError(f"sector {sector} out of range")
        return data

    def close(self) -> None:
        pass


class DiskIndex:
    """An open partition index: metadata, sector map and a device."""

    def __init__(self, path: str | os.PathLike, device=None, sector_map: SectorMap | None = None):
        self.path = os.fspath(path)
        self.meta = read_meta(path)
        self.sector_map = sector_map or SectorMap.load(sector_map_path(path))
        if len(self.sector_map) != self.meta.num_local:
            raise DiskIndexError("sector map does not match index header")
        self.device = device if device is not None else FileDevice(path)
        self._rec = record_dtype(self.meta.dim, self.meta.elem_kind, self.meta.max_degree)
        self._per_sector = SECTOR // self._rec.itemsize

    def is_local(self, node_id: int) -> bool:
        return self.sector_map.is_local(node_id)

    def plan(self, node_ids) -> ReadPlan:
        """Locate the requested nodes and coalesce them into distinct sectors."""
        ids = np.asarray(node_ids, dtype=np.int64)
        if ids.ndim != 1:
            ids = ids.reshape(-1)
        smap = self.sector_map
        sectors = np.empty(len(ids), dtype=np.int64)
        starts = np.empty(len(ids), dtype=np.int64)
        ns = _plan(ids, smap._slot, smap.sectors, smap.offsets, sectors, starts)
        if ns < 0:
            raise DiskIndexError(f"node {ids[-ns - 1]} is not stored in this partition")
        return ReadPlan(ids, sectors[:ns], starts)

    def read_plan(self, plan: ReadPlan) -> RecordBatch:
        raw = getattr(self.device, "array", None)
        if raw is not None:
            base = (plan.sectors + 1) * SECTOR
        else:
            raw = np.frombuffer(b"".join([self.device.read_sector(s) for s in plan.sectors.tolist()]),
                                dtype=np.uint8)
            base = np.arange(len(plan.sectors), dtype=np.int64) * SECTOR
        out = np.empty((len(plan.node_ids), self._rec.itemsize), dtype=np.uint8)
        bad = _gather(raw, base, plan.byte_starts, plan.node_ids, out)
        recs = out.view(self._rec).reshape(-1)
        if bad >= 0:
            raise DiskIndexError(f"sector map points node {plan.node_ids[bad]} at a record of node "
                                 f"{recs['node'][bad]} or past the end of the index")
        return RecordBatch(plan.node_ids, recs)

    def close(self) -> None:
        self.device.close()


# ---------------------------------------------------------------------------
# read engines: asynchronous submit / poll


class ReadEngine:
    """Submit batches of node reads and collect completions by token.

    One engine belongs to one worker; ``submit`` never waits for the device
    and ``poll`` hands back ``(token, RecordBatch)`` pairs only for
    submitted requests. Sector reads are coalesced within a submission and
    counted in ``io_count``.
    """

    def __init__(self, index: DiskIndex):
        self.index = index
        self.io_count = 0
        self.pending = 0

    def submit(self, token, node_ids) -> int:
        """Queue the reads; returns the number of sector reads issued."""
        plan = self.index.plan(node_ids)
        n = len(plan.sectors)
        self.io_count += n
        self.pending += 1
        self._submit(token, plan)
        return n

    def poll(self, timeout: float = 0.0) -> list:
        done = self._poll(timeout)
        self.pending -= len(done)
        return done

    def _submit(self, token, plan) -> None:
        raise NotImplementedError

    def _poll(self, timeout: float) -> list:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SyncReadEngine(ReadEngine):
    """Reads at submit time; completions are available immediately."""

    def __init__(self, index: DiskIndex):
        super().__init__(index)
        self._done: list = []

    def _submit(self, token, plan) -> None:
        try:
            self._done.append((token, self.index.read_plan(plan)))
        except OSError as exc:
            self._done.append((token, exc))

    def _poll(self, timeout: float) -> list:
        done, self._done = self._done, []
        return done


class FakeReadEngine(ReadEngine):
    """Deterministic device model: every submission completes ``latency`` seconds later.

    Concurrent submissions overlap fully, like an SSD queue with ample depth.
    ``spin`` busy-waits for exact timing; without it ``poll`` sleeps, which
    is coarser but leaves the CPU to other threads and processes.
    """

    def __init__(self, index: DiskIndex, latency: float = 100e-6, spin: bool = True):
        super().__init__(index)
        self.latency = latency
        self.spin = spin
        self._heap: list = []
        self._seq = itertools.count()

    def _submit(self, token, plan) -> None:
        try:
            result = self.index.read_plan(plan)
        except OSError as exc:
            result = exc
        heapq.heappush(self._heap, (time.perf_counter() + self.latency, next(self._seq), token, result))

    def _poll(self, timeout: float) -> list:
        now = time.perf_counter()
        if self._heap and self._heap[0][0] > now and timeout > 0:
            wait = min(self._heap[0][0] - now, timeout)
            if self.spin:
                _spin_until(now + wait)
            else:
                time.sleep(wait)
            now = time.perf_counter()
        done = []
        while self._heap and self._heap[0][0] <= now:
            _, _, token, result = heapq.heappop(self._heap)
            done.append((token, result))
        return done


def _spin_until(deadline: float) -> None:
    # sleep() granularity is far coarser than device latencies of ~100us
    while time.perf_counter() < deadline:
        pass


class ThreadedReadEngine(ReadEngine):
    """File-backed engine: sector reads run on a small I/O thread pool."""

    def __init__(self, index: DiskIndex, io_threads: int = 4):
        super().__init__(index)
        self._pool = ThreadPoolExecutor(max_workers=io_threads, thread_name_prefix="io")
        self._done: queue.SimpleQueue = queue.SimpleQueue()

    def _submit(self, token, plan) -> None:
        def work():
            try:
                result = self.index.read_plan(plan)
            except OSError as exc:
                result = exc
            self._done.put((token, result))

        self._pool.submit(work)

    def _poll(self, timeout: float) -> list:
        done = []
        try:
            done.append(self._done.get(timeout=timeout) if timeout > 0 else self._done.get_nowait())
        except queue.Empty:
            return done
        while True:
            try:
                done.append(self._done.get_nowait())
            except queue.Empty:
                return done

    def close(self) -> None:
        self._pool.shutdown(wait=True)


def read_nodes(engine: ReadEngine, node_ids) -> RecordBatch:
    """Blocking convenience wrapper: submit one request and wait for it."""
    token = object()
    engine.submit(token, node_ids)
    while True:
        for tok, result in engine.poll(timeout=0.01):
            if tok is token:
                if isinstance(result, Exception):
                    raise result
                return result
