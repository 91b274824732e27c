"""Vamana search-graph construction (greedy search + robust prune, two passes)."""

from __future__ import annotations

import logging
import os
import struct
from collections import deque
from dataclasses import dataclass

import numba
import numpy as np

from .vecdata import VectorDataset, distances_to

log = logging.getLogger(__name__)

MEDOID_SAMPLE = 100_000

_GRAPH_HEADER = struct.Struct("<III")


@dataclass
class VamanaGraph:
    """Padded adjacency: row ``i`` holds ``degrees[i]`` valid neighbor ids."""

    adjacency: np.ndarray  # (n, R) int32, -1 padded
    degrees: np.ndarray  # (n,) int32
    medoid: int

    @property
    def num_points(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def max_degree(self) -> int:
        return int(self.adjacency.shape[1])

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node, : self.degrees[node]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed edge list as (src, dst) arrays."""
        src = np.repeat(np.arange(self.num_points, dtype=np.int32), self.degrees)
        mask = np.arange(self.max_degree)[None, :] < self.degrees[:, None]
        return src, self.adjacency[mask]

    def to_bytes(self) -> bytes:
        parts = [_GRAPH_HEADER.pack(self.num_points, self.max_degree, self.medoid)]
        for i in range(self.num_points):
            nb = self.neighbors(i)
            parts.append(struct.pack("<I", len(nb)))
            parts.append(nb.astype("<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VamanaGraph":
        n, r, medoid = _GRAPH_HEADER.unpack_from(raw)
        adj = np.full((n, r), -1, dtype=np.int32)
        deg = np.zeros(n, dtype=np.int32)
        off = _GRAPH_HEADER.size
        for i in range(n):
            (d,) = struct.unpack_from("<I", raw, off)
            off += 4
            if d > r:
                raise ValueError(f"node {i} has degree {d} > R={r}")
            adj[i, :d] = np.frombuffer(raw, dtype="<u4", count=d, offset=off)
            deg[i] = d
            off += 4 * d
        if off != len(raw):
            raise ValueError("trailing bytes in graph file")
        return cls(adj, deg, int(medoid))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VamanaGraph":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def medoid(dataset: VectorDataset, seed: int = 0) -> int:
    """Id of the point nearest the dataset centroid (ties by lowest id).

    The centroid is estimated on a uniform sample for corpora above
    ``MEDOID_SAMPLE`` points; the nearest point is still searched exhaustively.
    """
    if dataset.num_points == 0:
        raise ValueError("medoid of an empty dataset")
    base = dataset.as_float()
    if dataset.num_points > MEDOID_SAMPLE:
        rng = np.random.default_rng(seed)
        sample = base[np.sort(rng.choice(dataset.num_points, MEDOID_SAMPLE, replace=False))]
    else:
        sample = base
    centroid = sample.astype(np.float64).mean(axis=0).astype(np.float32)
    # argmin returns the first (lowest id) minimum
    return int(np.argmin(distances_to(base, centroid)))


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _dist(data, a, q):
    s = numba.float32(0.0)
    for j in range(data.shape[1]):
        t = data[a, j] - q[j]
        s += t * t
    return s


@numba.njit(cache=True, inline="always")
def _dist_pts(data, a, b):
    s = numba.float32(0.0)
    for j in range(data.shape[1]):
        t = data[a, j] - data[b, j]
        s += t * t
    return s


@numba.njit(cache=True, inline="always")
def _before(da, ia, db, ib):
    return da < db or (da == db and ia < ib)


@numba.njit(cache=True)
def _greedy_search(data, adj, deg, start, q, L, mark, epoch, out_ids, out_dists):
    """Best-first search with a pool of L; returns number of visited nodes.

    Visited (expanded) nodes are written to out_ids/out_dists in visit order.
    ``mark`` holds the epoch at which a node entered the pool.
    """
    pool_ids = np.empty(L + 1, np.int32)
    pool_d = np.empty(L + 1, np.float32)
    pool_x = np.zeros(L + 1, np.bool_)
    size = 1
    pool_ids[0] = start
    pool_d[0] = _dist(data, start, q)
    mark[start] = epoch
    nvis = 0
    while nvis < out_ids.shape[0]:
        best = -1
        for i in range(size):
            if not pool_x[i]:
                best = i
                break
        if best < 0:
            break
        pool_x[best] = True
        node = pool_ids[best]
        out_ids[nvis] = node
        out_dists[nvis] = pool_d[best]
        nvis += 1
        for e in range(deg[node]):
            nb = adj[node, e]
            if mark[nb] == epoch:
                continue
            mark[nb] = epoch
            d = _dist(data, nb, q)
            if size == L and not _before(d, nb, pool_d[L - 1], pool_ids[L - 1]):
                continue
            pos = size if size < L else L - 1
            while pos > 0 and _before(d, nb, pool_d[pos - 1], pool_ids[pos - 1]):
                pool_ids[pos] = pool_ids[pos - 1]
                pool_d[pos] = pool_d[pos - 1]
                pool_x[pos] = pool_x[pos - 1]
                pos -= 1
            pool_ids[pos] = nb
            pool_d[pos] = d
            pool_x[pos] = False
            if size < L:
                size += 1
    return nvis


@numba.njit(cache=True)
def _robust_prune(data, node, cand_ids, cand_d, ncand, alpha, R, out):
    """Keep nearest survivor, drop x with alpha*d(kept, x) <= d(node, x); returns count kept.

    Candidates must be sorted ascending by (distance to node, id).
    """
    alive = np.ones(ncand, np.bool_)
    kept = 0
    for i in range(ncand):
        if not alive[i]:
            continue
        c = cand_ids[i]
        if c == node:
            continue
        out[kept] = c
        kept += 1
        if kept == R:
            break
        for j in range(i + 1, ncand):
            if alive[j] and alpha * _dist_pts(data, c, cand_ids[j]) <= cand_d[j]:
                alive[j] = False
    return kept


@numba.njit(cache=True)
def _sort_candidates(ids, d, n):
    order = np.argsort(d[:n], kind="mergesort")
    sid = ids[:n][order]
    sd = d[:n][order]
    # stable sort by distance then fix id order within equal-distance runs
    i = 0
    while i < n:
        j = i + 1
        while j < n and sd[j] == sd[i]:
            j += 1
        if j - i > 1:
            sid[i:j] = np.sort(sid[i:j])
        i = j
    return sid, sd


@numba.njit(cache=True)
def _dedup_sorted(ids, d, n):
    # candidates arrive sorted by (d, id); duplicates are adjacent only within a tie run
    out_i = np.empty(n, np.int32)
    out_d = np.empty(n, np.float32)
    m = 0
    for i in range(n):
        dup = False
        k = m - 1
        while k >= 0 and out_d[k] == d[i]:
            if out_i[k] == ids[i]:
                dup = True
                break
            k -= 1
        if not dup:
            out_i[m] = ids[i]
            out_d[m] = d[i]
            m += 1
    return out_i, out_d, m


@numba.njit(cache=True)
def _build_pass(data, adj, deg, order, start, L, R, alpha, mark, epoch0):
    n = data.shape[0]
    vis_ids = np.empty(n if n < 64 * L else 64 * L, np.int32)
    vis_d = np.empty(vis_ids.shape[0], np.float32)
    cand_ids = np.empty(vis_ids.shape[0] + R + 1, np.int32)
    cand_d = np.empty(vis_ids.shape[0] + R + 1, np.float32)
    newnb = np.empty(R, np.int32)
    epoch = epoch0
    for t in range(order.shape[0]):
        p = order[t]
        epoch += 1
        nvis = _greedy_search(data, adj, deg, start, data[p], L, mark, epoch, vis_ids, vis_d)
        nc = 0
        for i in range(nvis):
            if vis_ids[i] != p:
                cand_ids[nc] = vis_ids[i]
                cand_d[nc] = vis_d[i]
                nc += 1
        for e in range(deg[p]):
            cand_ids[nc] = adj[p, e]
            cand_d[nc] = _dist_pts(data, p, adj[p, e])
            nc += 1
        sid, sd = _sort_candidates(cand_ids, cand_d, nc)
        sid, sd, nc = _dedup_sorted(sid, sd, nc)
        k = _robust_prune(data, p, sid, sd, nc, alpha, R, newnb)
        adj[p, :k] = newnb[:k]
        adj[p, k:] = -1
        deg[p] = k
        for e in range(k):
            j = newnb[e]
            present = False
            for f in range(deg[j]):
                if adj[j, f] == p:
                    present = True
                    break
            if present:
                continue
            if deg[j] < R:
                adj[j, deg[j]] = p
                deg[j] += 1
                continue
            # overflow: re-prune j's list plus p
            m = deg[j] + 1
            tmp_i = np.empty(m, np.int32)
            tmp_d = np.empty(m, np.float32)
            for f in range(deg[j]):
                tmp_i[f] = adj[j, f]
                tmp_d[f] = _dist_pts(data, j, adj[j, f])
            tmp_i[m - 1] = p
            tmp_d[m - 1] = _dist_pts(data, j, p)
            si, sdd = _sort_candidates(tmp_i, tmp_d, m)
            buf = np.empty(R, np.int32)
            kk = _robust_prune(data, j, si, sdd, m, alpha, R, buf)
            adj[j, :kk] = buf[:kk]
            adj[j, kk:] = -1
            deg[j] = kk
    return epoch


def robust_prune(node: int, candidates, R: int, alpha: float, data: np.ndarray) -> list[int]:
    """Robust-prune ``candidates`` ((id, dist) pairs sorted by dist) for ``node``."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    cands = [(int(i), float(d)) for i, d in candidates if int(i) != node]
    cands.sort(key=lambda c: (c[1], c[0]))
    ids = np.array([c[0] for c in cands], dtype=np.int32)
    d = np.array([c[1] for c in cands], dtype=np.float32)
    out = np.empty(max(R, 1), dtype=np.int32)
    k = _robust_prune(data, node, ids, d, len(ids), np.float32(alpha), R, out)
    return out[:k].tolist()


def greedy_search(graph: VamanaGraph, data: np.ndarray, query: np.ndarray, L: int,
                  start: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Expanded nodes of an exact-distance best-first search, in visit order."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    n = graph.num_points
    mark = np.zeros(n, dtype=np.int64)
    cap = n
    ids = np.empty(cap, np.int32)
    d = np.empty(cap, np.float32)
    s = graph.medoid if start is None else start
    nvis = _greedy_search(data, graph.adjacency, graph.degrees, s,
                          np.ascontiguousarray(query, dtype=np.float32), L, mark, 1, ids, d)
    return ids[:nvis].copy(), d[:nvis].copy()


def build_vamana(dataset: VectorDataset, R: int = 64, L_build: int = 128, alpha: float = 1.2,
                 seed: int = 0) -> VamanaGraph:
    """Two-pass Vamana build: alpha=1.0 then ``alpha``, seeded insertion order.

    Nodes left unreachable from the medoid by pruning get one repair in-edge.
    """
    if R < 2:
        raise ValueError("R must be at least 2")
    if L_build < R:
        raise ValueError("L_build must be >= R")
    n = dataset.num_points
    if n < 1:
        raise ValueError("cannot build a graph over an empty dataset")
    data = dataset.as_float()
    start = medoid(dataset, seed)
    adj = np.full((n, R), -1, dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    if n == 1:
        return VamanaGraph(adj, deg, start)
    rng = np.random.default_rng(seed)
    mark = np.zeros(n, dtype=np.int64)
    epoch = 0
    for pass_alpha in (1.0, alpha):
        order = rng.permutation(n).astype(np.int32)
        epoch = _build_pass(data, adj, deg, order, start, L_build, R, np.float32(pass_alpha), mark, epoch)
        log.debug("vamana pass alpha=%.2f done, mean degree %.1f", pass_alpha, deg.mean())
    fixed = _connect_unreachable(data, adj, deg, start)
    if fixed:
        log.debug("added in-edges for %d nodes unreachable from the medoid", fixed)
    return VamanaGraph(adj, deg, start)


def _reach(adj: np.ndarray, deg: np.ndarray, roots, seen: np.ndarray) -> None:
    todo = deque(int(r) for r in roots)
    while todo:
        v = todo.popleft()
        for nb in adj[v, : deg[v]]:
            if not seen[nb]:
                seen[nb] = True
                todo.append(int(nb))


def _connect_unreachable(data: np.ndarray, adj: np.ndarray, deg: np.ndarray, start: int) -> int:
    """Give each node that pruning left without a path from ``start`` an in-edge.

    The new edge comes from the nearest reachable node with a free slot, so
    no existing edge is removed and the degree bound still holds.
    """
    n, R = adj.shape
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    _reach(adj, deg, [start], seen)
    fixed = 0
    for u in np.flatnonzero(~seen):
        if seen[u]:
            continue
        d = distances_to(data, data[u])
        cand = np.flatnonzero(seen & (deg < R))
        if len(cand) == 0:
            raise RuntimeError("no reachable node has a free adjacency slot")
        v = cand[np.lexsort((cand, d[cand]))[0]]
        adj[v, deg[v]] = u
        deg[v] += 1
        seen[u] = True
        _reach(adj, deg, [u], seen)
        fixed += 1
    return fixed
