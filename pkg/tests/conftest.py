from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from relayann.diskindex import DiskIndex, FakeReadEngine, MemoryDevice, SyncReadEngine, build_disk_index
from relayann.graph import VamanaGraph, build_vamana
from relayann.bench import batann_configs
from relayann.headindex import HeadIndex, build_head_index
from relayann.partition import PartitionMap, partition_graph_aware, partition_random
from relayann.node import Server
from relayann.pq import PQCodebook, encode, save_codes, train_pq
from relayann.search import SearchContext
from relayann.vecdata import GroundTruth, VectorDataset, brute_force_knn, generate_dataset


def split_corpus(num_points: int, num_queries: int, dim: int, seed: int, elem_kind: str = "u8",
                 mode: str = "clustered") -> tuple[VectorDataset, VectorDataset]:
    """Base and query sets drawn from one generated distribution."""
    ds = generate_dataset(num_points + num_queries, dim, elem_kind, mode, seed)
    return ds.subset(np.arange(num_points)), ds.subset(np.arange(num_points, num_points + num_queries))


@dataclass
class Corpus:
    base: VectorDataset
    queries: VectorDataset
    graph: VamanaGraph
    codebook: PQCodebook
    codes: np.ndarray
    head: HeadIndex
    gt: GroundTruth


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    """3K points in 32 dims with every artifact the search layers need."""
    base, queries = split_corpus(3000, 100, 32, seed=7)
    graph = build_vamana(base, R=16, L_build=32, alpha=1.2, seed=0)
    cb = train_pq(base, m=8, seed=0)
    return Corpus(base, queries, graph, cb, encode(cb, base), build_head_index(base, 0.02, 16, 32, seed=0),
                  brute_force_knn(base, queries, 10))


@dataclass
class SingleServer:
    index_path: str
    ctx: SearchContext

    def engine(self, kind: str = "sync", latency: float = 100e-6):
        idx = DiskIndex(self.index_path, device=MemoryDevice(self.index_path))
        return SyncReadEngine(idx) if kind == "sync" else FakeReadEngine(idx, latency)


@pytest.fixture(scope="session")
def single(corpus, tmp_path_factory) -> SingleServer:
    path = str(tmp_path_factory.mktemp("single") / "all.disk")
    build_disk_index(corpus.graph, corpus.base, None, 0, path)
    return SingleServer(path, SearchContext(corpus.codebook, corpus.codes, corpus.head))


@dataclass
class Partitioned:
    pmap: PartitionMap
    paths: list[str]
    ctxs: list[SearchContext]

    def engines(self) -> list[SyncReadEngine]:
        return [SyncReadEngine(DiskIndex(p, device=MemoryDevice(p))) for p in self.paths]


@pytest.fixture(scope="session")
def partitioned(corpus, tmp_path_factory) -> Partitioned:
    """The corpus graph split over three graph-aware partitions."""
    out = tmp_path_factory.mktemp("parts")
    pm = partition_graph_aware(corpus.graph, corpus.base, 3, seed=0)
    paths = []
    for p in range(3):
        paths.append(str(out / f"p{p}.disk"))
        build_disk_index(corpus.graph, corpus.base, pm, p, paths[-1])
    ctxs = [SearchContext(corpus.codebook, corpus.codes, corpus.head, partition_of=pm.assignments, partition_id=p)
            for p in range(3)]
    return Partitioned(pm, paths, ctxs)


@pytest.fixture(scope="session")
def artifacts(corpus, partitioned, tmp_path_factory):
    out = tmp_path_factory.mktemp("artifacts")
    corpus.codebook.save(out / "pq")
    save_codes(out / "codes", corpus.codes)
    corpus.head.save(out / "head")
    partitioned.pmap.save(out / "pmap3")
    one = partition_random(corpus.base.num_points, 1)
    one.save(out / "pmap1")
    return {"dir": out, "pq": str(out / "pq"), "codes": str(out / "codes"), "head": str(out / "head"),
            "pmap3": partitioned.pmap, "pmap1": one}


def batann_cluster(artifacts, corpus, P, **overrides) -> list:
    """Server configs over the corpus artifacts; P is 1 or 3."""
    pmap = artifacts[f"pmap{P}"]
    return batann_configs(artifacts["dir"] / f"P{P}", corpus.graph, corpus.base, pmap, artifacts["pq"],
                          artifacts["codes"], artifacts["head"], str(artifacts["dir"] / f"pmap{P}"),
                          device="memory", workers=2, **overrides)


class InProcess:
    """Servers started in this process, shut down on exit."""

    def __init__(self, configs):
        self.servers = [Server(c).start() for c in configs]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        for s in self.servers:
            s.shutdown()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
