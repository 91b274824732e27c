import numpy as np
import pytest

from relayann.diskindex import DiskIndex, SyncReadEngine, build_disk_index
from relayann.graph import build_vamana
from relayann.pq import encode, train_pq
from relayann.search import (Beam, Finished, Handoff, ResultList, SearchContext, SearchParams, SearchState,
                             beam_search_local, best_first_search, next_frontier, rerank, scheduler_run,
                             start_state)
from relayann.vecdata import VectorDataset, brute_force_knn, generate_dataset, recall_at_k, sq_l2


def _queries(corpus, n, seed=0):
    """Perturbed corpus rows: same distribution, not stored points."""
    rng = np.random.default_rng(seed)
    rows = corpus.base.data[rng.choice(corpus.base.num_points, n, replace=False)].astype(np.int16)
    return np.clip(rows + rng.integers(-6, 7, rows.shape), 0, 255).astype(np.uint8)


def test_params_validation():
    SearchParams(10, 10, 10)
    for k, L, W in [(0, 10, 1), (11, 10, 1), (1, 10, 0), (1, 10, 11), (1, 70_000, 1)]:
        with pytest.raises(ValueError):
            SearchParams(k, L, W)


def test_beam_keeps_best_by_distance_then_id():
    beam = Beam(3)
    beam.insert(np.array([5, 1, 9]), np.array([2.0, 2.0, 1.0], np.float32))
    beam.insert(np.array([4]), np.array([0.5], np.float32))
    assert beam.ids.tolist() == [4, 9, 1]
    beam.mark_explored(np.array([9]))
    assert beam.frontier(2).tolist() == [4, 1]
    assert not beam.converged()


def test_single_point(tmp_path):
    ds = VectorDataset(np.array([[3, 4, 5, 6]], np.uint8), "u8")
    g = build_vamana(ds, R=2, L_build=4)
    cb = train_pq(ds, m=2, bits=1)
    build_disk_index(g, ds, None, 0, tmp_path / "one")
    ctx = SearchContext(cb, encode(cb, ds), None, 0)
    q = np.array([0, 0, 0, 0], np.uint8)
    res = beam_search_local(ctx, SyncReadEngine(DiskIndex(tmp_path / "one")), q, SearchParams(1, 1, 1))
    assert res.ids.tolist() == [0]
    assert res.dists.tolist() == [sq_l2(ds.data[0], q)]


def test_exhaustive_l_reaches_full_recall(tmp_path):
    ds = generate_dataset(100, 16, seed=3)
    q = generate_dataset(20, 16, seed=4)
    g = build_vamana(ds, R=8, L_build=16)
    cb = train_pq(ds, m=4, bits=4)
    build_disk_index(g, ds, None, 0, tmp_path / "d")
    ctx = SearchContext(cb, encode(cb, ds), None, g.medoid)
    eng = SyncReadEngine(DiskIndex(tmp_path / "d"))
    res = [beam_search_local(ctx, eng, qq, SearchParams(10, 100, 4)) for qq in q.data]
    gt = brute_force_knn(ds, q, 10)
    assert recall_at_k([r.ids for r in res], gt, 10, result_dists=[r.dists for r in res]) == 1.0
    # L = n with a connected graph explores every node
    assert all(len(r.explored) == 100 for r in res)


def test_w1_sequence_is_deterministic(corpus, single):
    eng = single.engine()
    for q in corpus.queries.data[:10]:
        a = beam_search_local(single.ctx, eng, q, SearchParams(10, 32, 1))
        b = beam_search_local(single.ctx, eng, q, SearchParams(10, 32, 1))
        np.testing.assert_array_equal(a.explored, b.explored)


def test_best_first_equals_w1(corpus, single):
    eng = single.engine()
    for q in corpus.queries.data[:20]:
        a = best_first_search(single.ctx, eng, q, k=10, L=40)
        b = beam_search_local(single.ctx, eng, q, SearchParams(10, 40, 1))
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.explored, b.explored)
        assert a.metrics == b.metrics
        assert a.metrics.hops == len(a.explored)


def test_result_list_has_no_duplicates(corpus, single):
    eng = single.engine()
    for q in corpus.queries.data[:20]:
        r = beam_search_local(single.ctx, eng, q, SearchParams(10, 48, 8))
        assert len(set(r.explored.tolist())) == len(r.explored)


def test_rerank_matches_restricted_brute_force(corpus, single):
    eng = single.engine()
    for q in corpus.queries.data[:20]:
        r = beam_search_local(single.ctx, eng, q, SearchParams(10, 32, 4))
        sub = corpus.base.subset(r.explored)
        ref = brute_force_knn(sub, q[None, :], 10)
        np.testing.assert_array_equal(r.dists, ref.dists[0])
        np.testing.assert_array_equal(np.sort(r.ids), np.sort(r.explored[ref.ids[0]]))


def test_rerank_sorts_small_list():
    rl = ResultList()
    rl.append(np.array([7, 2, 5]), np.array([3.0, 1.0, 3.0], np.float32))
    ids, dists = rerank(rl, 3)
    assert ids.tolist() == [2, 5, 7] and dists.tolist() == [1.0, 3.0, 3.0]


def test_recall_with_pq_beam(corpus, single):
    eng = single.engine()
    res = [beam_search_local(single.ctx, eng, q, SearchParams(10, 64, 8)) for q in corpus.queries.data]
    assert recall_at_k([r.ids for r in res], corpus.gt, 10, result_dists=[r.dists for r in res]) >= 0.9


def test_comparisons_and_reads_counted(corpus, single):
    eng = single.engine()
    r = beam_search_local(single.ctx, eng, corpus.queries.data[0], SearchParams(10, 32, 4))
    m = r.metrics
    assert m.hops >= len(r.explored) / 4
    assert m.distance_comparisons >= len(r.explored)
    assert 0 < m.disk_reads <= len(r.explored)
    assert m.inter_partition_hops == 0


def test_frontier_handoff_to_owner_of_best_node(corpus):
    ctx = SearchContext(corpus.codebook, corpus.codes, corpus.head,
                        partition_of=np.zeros(corpus.base.num_points, np.int64), partition_id=0)
    state = SearchState(SearchParams(10, 16, 2), query=corpus.queries.data[0])
    start_state(ctx, state)
    ids = state.beam.frontier(2)
    owners = np.zeros(corpus.base.num_points, np.int64)
    owners[ids[0]], owners[ids[1:]] = 3, 7
    ctx.partition_of = owners
    assert next_frontier(ctx, state) == Handoff(3)
    owners[ids[1:]] = 0
    np.testing.assert_array_equal(next_frontier(ctx, state), ids[1:])
    state.beam.mark_explored(state.beam.ids)
    assert isinstance(next_frontier(ctx, state), Finished)


def test_scheduler_single_query(corpus, single):
    results, _ = scheduler_run(single.ctx, [single.engine()], corpus.queries.data[:1], SearchParams(10, 32, 4))
    ref = beam_search_local(single.ctx, single.engine(), corpus.queries.data[0], SearchParams(10, 32, 4))
    np.testing.assert_array_equal(results[0].ids, ref.ids)


def test_scheduler_matches_sequential(corpus, single):
    queries = _queries(corpus, 1000)
    params = SearchParams(10, 32, 4)
    results, _ = scheduler_run(single.ctx, [single.engine(), single.engine()], queries, params)
    eng = single.engine()
    for q, r in zip(queries, results):
        ref = beam_search_local(single.ctx, eng, q, params)
        np.testing.assert_array_equal(r.ids, ref.ids)
        np.testing.assert_array_equal(r.explored, ref.explored)


def test_scheduler_overlaps_io(corpus, single):
    queries = _queries(corpus, 300, seed=1)
    params = SearchParams(10, 32, 4)
    _, t8 = scheduler_run(single.ctx, [single.engine("fake")], queries, params, queries_per_worker=8)
    _, t1 = scheduler_run(single.ctx, [single.engine("fake")], queries, params, queries_per_worker=1)
    assert t1 / t8 >= 2.0
