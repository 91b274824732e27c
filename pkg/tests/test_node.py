from dataclasses import replace

import numpy as np
import pytest

from relayann.bench import Client, LocalCluster, run_throughput, scatter_configs
from relayann.graph import VamanaGraph
from relayann.node import (ConfigError, Server, ServerConfig, artifact_fingerprint, build_scatter_gather_indexes,
                           load_shard_info, parse_config)
from relayann.partition import partition_random
from relayann.search import SearchContext, SearchParams, beam_search_local
from relayann.transport import Batcher, MsgType, encode_frame

from conftest import InProcess, SingleServer, batann_cluster


def test_parse_config_text():
    raw = parse_config("# comment\n\npartition_id = 1  # trailing\nlisten=a:1\npeers=a:0, a:1\n")
    assert raw == {"partition_id": "1", "listen": "a:1", "peers": "a:0, a:1"}
    with pytest.raises(ConfigError):
        parse_config("no equals sign")


def test_config_round_trip_and_validation():
    base = {"partition_id": "0", "listen": "h:1", "peers": "h:1,h:2", "index": "i", "pq": "q", "codes": "c",
            "head": "h", "partition_map": "m", "workers": "3", "fake_latency_us": "50"}
    cfg = ServerConfig.from_dict(base)
    assert cfg.peers == ["h:1", "h:2"] and cfg.workers == 3 and cfg.fake_latency_us == 50.0
    assert ServerConfig.from_dict(parse_config(cfg.to_text())) == cfg
    for bad in [{"bogus": "1"}, {"role": "client"}, {"mode": "x"}, {"device": "tape"}, {"partition_id": "2"}]:
        with pytest.raises(ConfigError):
            ServerConfig.from_dict({**base, **bad})
    for key in ("listen", "head"):
        with pytest.raises(ConfigError):
            ServerConfig.from_dict({k: v for k, v in base.items() if k != key})


def test_fingerprint_mismatch_refuses_to_start(artifacts, corpus):
    cfg = batann_cluster(artifacts, corpus, 1)[0]
    with pytest.raises(ConfigError, match="fingerprint"):
        Server(replace(cfg, fingerprint="0" * 16))


def test_wrong_partition_index_refused(artifacts, corpus):
    cfgs = batann_cluster(artifacts, corpus, 3)
    with pytest.raises(ConfigError):
        Server(replace(cfgs[1], index=cfgs[0].index))


def test_fingerprint_depends_on_assignments():
    a = np.zeros(10, np.uint8)
    b = a.copy()
    b[3] = 1
    assert artifact_fingerprint(10, 4, a) != artifact_fingerprint(10, 4, b)
    assert artifact_fingerprint(10, 4, a) == artifact_fingerprint(10, 4, a.copy())


def test_single_partition_matches_local_search(artifacts, corpus, single):
    params = SearchParams(10, 32, 4)
    with InProcess(batann_cluster(artifacts, corpus, 1)) as cl, Client([s.addr for s in cl.servers]) as client:
        rep = run_throughput(client, corpus.queries.data, params)
    assert rep.failed == 0
    eng = single.engine()
    for q, out in zip(corpus.queries.data, rep.outcomes):
        ref = beam_search_local(single.ctx, eng, q, params)
        np.testing.assert_array_equal(out.ids, ref.ids)
        np.testing.assert_array_equal(out.dists, ref.dists)
        assert tuple(out.counters) == ref.metrics.as_tuple()


def test_three_partitions_exactly_once_and_conserved(artifacts, corpus):
    rng = np.random.default_rng(0)
    queries = corpus.base.data[rng.choice(corpus.base.num_points, 1000)]
    with InProcess(batann_cluster(artifacts, corpus, 3)) as cl:
        with Client([s.addr for s in cl.servers]) as client:
            rep = run_throughput(client, queries, SearchParams(10, 32, 4), timeout=60)
            assert client.duplicates == 0 and client.unknown == 0
    assert rep.failed == 0 and len(rep.completed) == 1000
    totals = rep.counter_totals()
    served = np.sum([[s.stats.hops, s.stats.inter_partition_hops, s.stats.distance_comparisons,
                      s.stats.disk_reads] for s in cl.servers], axis=0)
    np.testing.assert_array_equal(totals, served)
    assert totals[1] > 0
    assert sum(s.stats.results for s in cl.servers) == 1000
    assert max(s.cache.max_receipts for s in cl.servers) <= 1


def test_malformed_frames_counted_not_fatal(artifacts, corpus):
    with InProcess(batann_cluster(artifacts, corpus, 1)) as cl:
        srv = cl.servers[0]
        tx = Batcher().start()
        tx.send(srv.addr, encode_frame(MsgType.STATE, b"\x01\x02"))
        tx.send(srv.addr, encode_frame(MsgType.QUERY, b"\x00" * 5))
        tx.send(srv.addr, encode_frame(77, b"x"))
        tx.close()
        with Client([srv.addr]) as client:
            client.ping_all(10)
            rep = run_throughput(client, corpus.queries.data[:10], SearchParams(10, 16, 2))
        assert rep.failed == 0
        assert srv.stats.malformed == 2
        assert srv.receiver.stats.unknown_type == 1


def test_sigterm_drains_and_exits_cleanly(artifacts, corpus, tmp_path):
    cluster = LocalCluster(batann_cluster(artifacts, corpus, 1), tmp_path)
    with cluster:
        with Client(cluster.addrs) as client:
            rep = run_throughput(client, corpus.queries.data[:50], SearchParams(10, 32, 4))
    assert rep.failed == 0
    assert cluster.exit_codes == [0]
    stats = cluster.stats()[0]
    assert stats["results"] == 50 and stats["extra"]["decoder_errors"] == 0


def test_scatter_single_shard_equals_global_search(corpus, tmp_path):
    pm = partition_random(corpus.base.num_points, 1)
    (info,) = build_scatter_gather_indexes(corpus.base, pm, tmp_path, R=16, L_build=32, pq_subspaces=8)
    graph = VamanaGraph.load(tmp_path / "shard0.graph")
    np.testing.assert_array_equal(graph.adjacency, corpus.graph.adjacency)
    ctx = SearchContext(corpus.codebook, corpus.codes, None, corpus.graph.medoid)
    cfgs = scatter_configs(tmp_path, 1, device="memory", workers=2)
    params = SearchParams(10, 32, 4)
    eng = SingleServer(info.index, ctx).engine()
    with InProcess(cfgs) as cl, Client([s.addr for s in cl.servers]) as client:
        rep = run_throughput(client, corpus.queries.data, params, mode="scatter")
    for q, out in zip(corpus.queries.data, rep.outcomes):
        ref = beam_search_local(ctx, eng, q, params)
        np.testing.assert_array_equal(out.ids, ref.ids)


def test_scatter_shards_cover_corpus(corpus, partitioned, tmp_path):
    shards = build_scatter_gather_indexes(corpus.base, partitioned.pmap, tmp_path, R=16, L_build=32,
                                          pq_subspaces=8)
    all_ids = []
    for p, info in enumerate(shards):
        assert load_shard_info(tmp_path / f"shard{p}.json") == info
        gids = np.fromfile(info.ids, dtype="<u4")
        np.testing.assert_array_equal(gids, partitioned.pmap.members(p))
        g = VamanaGraph.load(tmp_path / f"shard{p}.graph")
        assert g.adjacency.shape[0] == info.num_points
        assert g.adjacency.max() < info.num_points
        all_ids.append(gids)
    np.testing.assert_array_equal(np.sort(np.concatenate(all_ids)), np.arange(corpus.base.num_points))
    cfgs = scatter_configs(tmp_path, 3, device="memory", workers=2)
    with InProcess(cfgs) as cl, Client([s.addr for s in cl.servers]) as client:
        rep = run_throughput(client, corpus.queries.data, SearchParams(10, 48, 4), mode="scatter", gt=corpus.gt)
    assert rep.failed == 0 and rep.recall >= 0.9
    for out in rep.outcomes:
        assert len(out.ids) == 30 and np.all(np.diff(out.dists) >= 0)
