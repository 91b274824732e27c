"""Replicated in-memory routing index over a small uniform sample of the corpus."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .graph import VamanaGraph, _greedy_search, build_vamana
from .vecdata import VectorDataset, dataset_from_bytes, dataset_to_bytes

MAGIC = b"RLYHEAD1"
_SECTION = struct.Struct("<8sQQ")


@dataclass
class HeadIndex:
    sample_ids: np.ndarray  # global ids, ascending
    vectors: VectorDataset
    graph: VamanaGraph

    def __post_init__(self) -> None:
        self._data = self.vectors.as_float()

    def __len__(self) -> int:
        return len(self.sample_ids)

    def save(self, path: str | os.PathLike) -> None:
        sections = {
            b"ids": self.sample_ids.astype("<u4").tobytes(),
            b"graph": self.graph.to_bytes(),
            b"vectors": dataset_to_bytes(self.vectors),
        }
        table_size = 12 + _SECTION.size * len(sections)
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<I", len(sections)))
            off = table_size
            for name, blob in sections.items():
                f.write(_SECTION.pack(name, off, len(blob)))
                off += len(blob)
            for blob in sections.values():
                f.write(blob)

    @classmethod
    def load(cls, path: str | os.PathLike, elem_kind: str) -> "HeadIndex":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a head index file")
        (count,) = struct.unpack_from("<I", raw, 8)
        sections = {}
        for i in range(count):
            name, off, size = _SECTION.unpack_from(raw, 12 + i * _SECTION.size)
            sections[name.rstrip(b"\0")] = raw[off : off + size]
        ids = np.frombuffer(sections[b"ids"], dtype="<u4").astype(np.int64)
        graph = VamanaGraph.from_bytes(sections[b"graph"])
        vectors = dataset_from_bytes(sections[b"vectors"], elem_kind)
        return cls(ids, vectors, graph)


def build_head_index(dataset: VectorDataset, fraction: float = 0.01, R_head: int = 32, L_head: int = 64,
                     seed: int = 0) -> HeadIndex:
    if dataset.num_points == 0:
        raise ValueError("cannot sample an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    size = max(1, math.ceil(fraction * dataset.num_points - 1e-9))
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(dataset.num_points, size, replace=False)).astype(np.int64)
    vectors = dataset.subset(ids)
    graph = build_vamana(vectors, R=R_head, L_build=max(L_head, R_head), alpha=1.2, seed=seed)
    return HeadIndex(ids, vectors, graph)


def route(head: HeadIndex, query: np.ndarray, num_entry_points: int = 2) -> np.ndarray:
    """Global ids of the best sample points for ``query``, nearest first."""
    if num_entry_points < 1:
        raise ValueError("num_entry_points must be >= 1")
    L = max(2 * num_entry_points, 16)
    n = len(head)
    cap = n
    ids = np.empty(cap, np.int32)
    d = np.empty(cap, np.float32)
    # route() may run on several worker threads; use a private mark array
    mark = np.zeros(n, dtype=np.int64)
    nvis = _greedy_search(head._data, head.graph.adjacency, head.graph.degrees, head.graph.medoid,
                          np.ascontiguousarray(query, dtype=np.float32), L, mark, 1, ids, d)
    ids, d = ids[:nvis], d[:nvis]
    order = np.lexsort((ids, d))[:num_entry_points]
    return head.sample_ids[ids[order]]
