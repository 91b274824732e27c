"""Node-to-server assignment of the global graph.

Three partitioners are provided: balanced k-means, balanced k-means followed
by greedy cut-reducing moves over the search graph, and a seeded random
round-robin baseline.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .graph import VamanaGraph
from .pq import _assign, kmeans
from .vecdata import VectorDataset

log = logging.getLogger(__name__)

MAX_PARTITIONS = 256
KMEANS_SAMPLE = 50_000

_HEADER = struct.Struct("<II")


@dataclass
class PartitionMap:
    assignments: np.ndarray  # (n,) uint8
    num_partitions: int

    def __post_init__(self) -> None:
        _check_p(self.num_partitions)
        self.assignments = np.ascontiguousarray(self.assignments, dtype=np.uint8)

    @property
    def num_points(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_partitions)

    def members(self, partition_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == partition_id).astype(np.int32)

    def cut_edges(self, graph: VamanaGraph) -> int:
        """Number of undirected graph edges whose endpoints sit on different partitions."""
        u, v = _undirected_edges(graph)
        return int(np.count_nonzero(self.assignments[u] != self.assignments[v]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(self.num_points, self.num_partitions))
            f.write(self.assignments.tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PartitionMap":
        with open(path, "rb") as f:
            raw = f.read()
        n, p = _HEADER.unpack_from(raw)
        if len(raw) != _HEADER.size + n:
            raise ValueError(f"{path}: partition map size does not match header")
        assign = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).copy()
        if n and assign.max() >= p:
            raise ValueError(f"{path}: partition id out of range")
        return cls(assign, p)


def _check_p(P: int) -> None:
    if P < 1:
        raise ValueError("need at least one partition")
    if P > MAX_PARTITIONS:
        raise ValueError(f"at most {MAX_PARTITIONS} partitions fit 8-bit ids, got {P}")


def balance_cap(num_points: int, P: int, epsilon: float) -> int:
    return int(math.floor((1.0 + epsilon) * math.ceil(num_points / P) + 1e-9))


def partition_random(num_points: int, P: int, seed: int = 0) -> PartitionMap:
    """Round-robin over a seeded permutation; sizes differ by at most one."""
    _check_p(P)
    perm = np.random.default_rng(seed).permutation(num_points)
    assign = np.empty(num_points, dtype=np.uint8)
    assign[perm] = np.arange(num_points) % P
    return PartitionMap(assign, P)


def partition_balanced_kmeans(dataset: VectorDataset, P: int, epsilon: float = 0.05, seed: int = 0,
                              iters: int = 20) -> PartitionMap:
    """k-means into ``P`` clusters, then evict the farthest members of overfull clusters.

    Evicted points go to their nearest cluster that still has room, so every
    partition ends with at most ``(1+epsilon) * ceil(n/P)`` points.
    """
    _check_p(P)
    n = dataset.num_points
    if P > n:
        raise ValueError(f"P={P} exceeds num_points={n}")
    if P == 1:
        return PartitionMap(np.zeros(n, dtype=np.uint8), 1)
    x = dataset.as_float()
    rng = np.random.default_rng(seed)
    sample = x if n <= KMEANS_SAMPLE else x[np.sort(rng.choice(n, KMEANS_SAMPLE, replace=False))]
    cents = kmeans(sample, P, iters, rng)
    labels = np.empty(n, dtype=np.int64)
    own = np.empty(n, dtype=np.float32)
    _assign(x, cents, labels, own)

    cap = balance_cap(n, P, epsilon)
    counts = np.bincount(labels, minlength=P)
    for c in np.argsort(-counts, kind="stable"):
        excess = counts[c] - cap
        if excess <= 0:
            continue
        members = np.flatnonzero(labels == c)
        # farthest first; ties by id
        evict = members[np.lexsort((members, -own[members]))][:excess]
        dc = ((x[evict, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        for row, p in enumerate(evict):
            for target in np.lexsort((np.arange(P), dc[row])):
                if target != c and counts[target] < cap:
                    labels[p] = target
                    counts[target] += 1
                    counts[c] -= 1
                    break
    return PartitionMap(labels.astype(np.uint8), P)


def _undirected_edges(graph: VamanaGraph) -> tuple[np.ndarray, np.ndarray]:
    src, dst = graph.edges()
    a = np.minimum(src, dst).astype(np.int64)
    b = np.maximum(src, dst).astype(np.int64)
    key = np.unique(a * graph.num_points + b)
    return (key // graph.num_points).astype(np.int32), (key % graph.num_points).astype(np.int32)


def _csr(graph: VamanaGraph) -> tuple[np.ndarray, np.ndarray]:
    u, v = _undirected_edges(graph)
    both_u = np.concatenate([u, v])
    both_v = np.concatenate([v, u])
    order = np.argsort(both_u, kind="stable")
    indptr = np.zeros(graph.num_points + 1, dtype=np.int64)
    np.cumsum(np.bincount(both_u, minlength=graph.num_points), out=indptr[1:])
    return indptr, both_v[order].astype(np.int32)


@numba.njit(cache=True)
def _refine_pass(indptr, indices, assign, counts, cap, order, P):
    """One sweep of single-node moves with positive cut gain; returns total gain."""
    local = np.zeros(P, np.int64)
    gain_total = 0
    for t in range(order.shape[0]):
        v = order[t]
        lo = indptr[v]
        hi = indptr[v + 1]
        if lo == hi:
            continue
        for e in range(lo, hi):
            local[assign[indices[e]]] += 1
        src = assign[v]
        best = src
        best_gain = 0
        for p in range(P):
            if p == src or counts[p] >= cap:
                continue
            g = local[p] - local[src]
            if g > best_gain:
                best_gain = g
                best = p
        if best != src:
            assign[v] = best
            counts[src] -= 1
            counts[best] += 1
            gain_total += best_gain
        for e in range(lo, hi):
            local[assign[indices[e]]] = 0
    return gain_total


def partition_graph_aware(graph: VamanaGraph, dataset: VectorDataset, P: int, epsilon: float = 0.05,
                          seed: int = 0, max_passes: int = 10) -> PartitionMap:
    """Balanced k-means seed refined by greedy moves that shrink the edge cut.

    A node moves to the partition holding most of its (undirected) neighbors
    when that strictly lowers the cut and the target is below the balance
    cap. Passes stop once a pass improves the cut by less than 0.1%.
    """
    seed_map = partition_balanced_kmeans(dataset, P, epsilon, seed)
    if P == 1:
        return seed_map
    indptr, indices = _csr(graph)
    assign = seed_map.assignments.astype(np.int64)
    counts = np.bincount(assign, minlength=P).astype(np.int64)
    cap = balance_cap(dataset.num_points, P, epsilon)
    cut = seed_map.cut_edges(graph)
    rng = np.random.default_rng(seed)
    for i in range(max_passes):
        if cut == 0:
            break
        order = rng.permutation(dataset.num_points).astype(np.int64)
        gain = _refine_pass(indptr, indices, assign, counts, cap, order, P)
        cut -= gain
        log.debug("refine pass %d: gain %d, cut %d", i, gain, cut)
        if gain < 0.001 * (cut + gain):
            break
    return PartitionMap(assign.astype(np.uint8), P)
