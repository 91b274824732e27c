import os

import numpy as np
import pytest

from relayann.diskindex import (SECTOR, DiskIndex, DiskIndexError, FakeReadEngine, FileDevice, MemoryDevice,
                                SectorMap, SyncReadEngine, ThreadedReadEngine, build_disk_index, read_meta,
                                read_nodes, record_size, sector_map_path)
from relayann.graph import VamanaGraph
from relayann.partition import partition_random
from relayann.vecdata import generate_dataset


def _random_graph(n: int, R: int, seed: int = 0) -> VamanaGraph:
    rng = np.random.default_rng(seed)
    adj = np.full((n, R), -1, np.int32)
    deg = rng.integers(0, R + 1, n).astype(np.int32)
    for i in range(n):
        adj[i, : deg[i]] = rng.choice(n, deg[i], replace=n < deg[i])
    return VamanaGraph(adj, deg, 0)


@pytest.fixture
def index_128(tmp_path):
    ds = generate_dataset(25, 128, seed=0)
    g = _random_graph(25, 64)
    path = tmp_path / "full.disk"
    build_disk_index(g, ds, None, 0, path)
    return ds, g, path


def test_record_arithmetic_and_packing(index_128):
    ds, g, path = index_128
    assert record_size(128, "u8", 64) == 4 + 128 + 4 + 256 == 392
    assert SECTOR // 392 == 10
    meta = read_meta(path)
    assert meta.num_sectors == 3
    assert os.path.getsize(path) == SECTOR * (1 + 3)
    raw = path.read_bytes()
    for node in (0, 9, 10, 24):
        sector, slot = divmod(node, 10)
        off = SECTOR * (1 + sector) + slot * 392
        assert int.from_bytes(raw[off : off + 4], "little") == node
        assert raw[off + 4 : off + 132] == ds.data[node].tobytes()
        assert int.from_bytes(raw[off + 132 : off + 136], "little") == g.degrees[node]


def test_single_node_partition(tmp_path):
    ds = generate_dataset(4, 16, seed=1)
    pm = partition_random(4, 4, seed=0)
    path = tmp_path / "p.disk"
    smap = build_disk_index(_random_graph(4, 3), ds, pm, 2, path)
    assert len(smap) == 1
    assert read_meta(path).num_sectors == 1
    assert os.path.getsize(path) == 2 * SECTOR


def test_empty_partition_rejected(tmp_path):
    ds = generate_dataset(3, 4, seed=1)
    pm = partition_random(3, 4, seed=0)
    empty = int(np.flatnonzero(pm.counts == 0)[0])
    with pytest.raises(DiskIndexError):
        build_disk_index(_random_graph(3, 2), ds, pm, empty, tmp_path / "e.disk")


def test_full_round_trip_scan(tmp_path, corpus):
    pm = partition_random(corpus.base.num_points, 3, seed=1)
    for p in range(3):
        path = tmp_path / f"p{p}.disk"
        build_disk_index(corpus.graph, corpus.base, pm, p, path)
        idx = DiskIndex(path)
        members = pm.members(p)
        batch = read_nodes(SyncReadEngine(idx), members)
        np.testing.assert_array_equal(batch.embeddings, corpus.base.data[members])
        for node in members[:50]:
            np.testing.assert_array_equal(batch[node].neighbors, corpus.graph.neighbors(node))
        idx.close()


def test_empty_request_counts_no_io(index_128):
    _, _, path = index_128
    eng = SyncReadEngine(DiskIndex(path))
    assert len(read_nodes(eng, [])) == 0
    assert eng.io_count == 0


def test_same_sector_coalesces(index_128):
    _, _, path = index_128
    eng = SyncReadEngine(DiskIndex(path))
    batch = read_nodes(eng, [3, 7])
    assert eng.io_count == 1
    assert list(batch) == [3, 7]
    read_nodes(eng, [3, 11, 21])
    assert eng.io_count == 4


@pytest.mark.parametrize("engine_cls", [FakeReadEngine, ThreadedReadEngine])
def test_async_reads_match_sync(tmp_path, corpus, engine_cls):
    path = tmp_path / "all.disk"
    build_disk_index(corpus.graph, corpus.base, None, 0, path)
    idx = DiskIndex(path)
    sync = SyncReadEngine(idx)
    eng = engine_cls(idx)
    rng = np.random.default_rng(3)
    tokens = {}
    for t in range(20):
        ids = rng.choice(corpus.base.num_points, 8, replace=False)
        eng.submit(t, ids)
        tokens[t] = ids
    got = {}
    while len(got) < 20:
        for tok, res in eng.poll(timeout=0.01):
            got[tok] = res
    for t, ids in tokens.items():
        ref = read_nodes(sync, ids)
        np.testing.assert_array_equal(got[t].node_ids, ids)
        np.testing.assert_array_equal(got[t].embeddings, ref.embeddings)
        np.testing.assert_array_equal(got[t].neighbor_slots, ref.neighbor_slots)
    assert eng.pending == 0
    eng.close()


def test_fake_engine_latency_and_overlap(index_128):
    _, _, path = index_128
    eng = FakeReadEngine(DiskIndex(path, device=MemoryDevice(path)), latency=2e-3)
    eng.submit("a", [0])
    eng.submit("b", [15])
    assert eng.poll() == []
    done = []
    while len(done) < 2:
        done += eng.poll(timeout=0.01)
    assert [t for t, _ in done] == ["a", "b"]


def test_non_local_node_rejected(tmp_path, corpus):
    pm = partition_random(corpus.base.num_points, 2, seed=0)
    path = tmp_path / "p0.disk"
    build_disk_index(corpus.graph, corpus.base, pm, 0, path)
    idx = DiskIndex(path)
    remote = int(pm.members(1)[0])
    assert not idx.is_local(remote)
    with pytest.raises(DiskIndexError):
        idx.plan([int(pm.members(0)[0]), remote])
    with pytest.raises(DiskIndexError):
        idx.plan([corpus.base.num_points + 5])


def test_file_and_memory_devices_agree(index_128):
    _, _, path = index_128
    fdev = FileDevice(path)
    mdev = MemoryDevice(path)
    for s in range(3):
        assert fdev.read_sector(s) == mdev.read_sector(s)
    with pytest.raises(DiskIndexError):
        mdev.read_sector(3)
    fdev.close()


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.disk"
    p.write_bytes(b"\0" * SECTOR)
    with pytest.raises(DiskIndexError):
        read_meta(p)


def test_record_batch_lookup(index_128):
    ds, g, path = index_128
    batch = read_nodes(SyncReadEngine(DiskIndex(path)), [5, 2])
    assert 5 in batch and 3 not in batch
    rec = batch[2]
    np.testing.assert_array_equal(rec.embedding, ds.data[2])
    np.testing.assert_array_equal(rec.neighbors, g.neighbors(2))
    assert set(batch.to_dict()) == {2, 5}
    with pytest.raises(KeyError):
        batch[3]


@pytest.mark.parametrize("memory", [False, True])
def test_corrupt_sector_map_detected(index_128, memory):
    _, _, path = index_128
    good = SectorMap.load(sector_map_path(path))
    offsets = good.offsets.copy()
    offsets[[3, 4]] = offsets[[4, 3]]
    idx = DiskIndex(path, device=MemoryDevice(path) if memory else None,
                    sector_map=SectorMap(good.nodes, good.sectors, offsets))
    read_nodes(SyncReadEngine(idx), [0, 1])
    with pytest.raises(DiskIndexError, match="node 3"):
        read_nodes(SyncReadEngine(idx), [1, 3])
    sectors = good.sectors.copy()
    sectors[5] = 999
    idx = DiskIndex(path, device=MemoryDevice(path) if memory else None,
                    sector_map=SectorMap(good.nodes, sectors, good.offsets))
    with pytest.raises(DiskIndexError):
        read_nodes(SyncReadEngine(idx), [5])
