import shutil
import struct
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relayann.vecdata import (DatasetFormatError, GroundTruth, VectorDataset, brute_force_knn, distances_to,
                              generate_dataset, load_dataset, load_groundtruth, recall_at_k, save_dataset,
                              save_groundtruth, sq_l2)


def _write_bin(path, n, dim, body: bytes):
    path.write_bytes(struct.pack("<II", n, dim) + body)


def test_load_header_forced_shape(tmp_path):
    p = tmp_path / "two.u8bin"
    _write_bin(p, 2, 3, bytes([1, 2, 3, 4, 5, 6]))
    ds = load_dataset(p, "u8")
    assert (ds.num_points, ds.dim) == (2, 3)
    assert ds.data.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_load_empty_body(tmp_path):
    p = tmp_path / "empty.u8bin"
    _write_bin(p, 0, 128, b"")
    ds = load_dataset(p, "u8")
    assert ds.num_points == 0 and ds.dim == 128


@pytest.mark.parametrize("n,dim,body", [(2, 3, bytes(5)), (2, 3, bytes(7)), (1, 0, b"")])
def test_load_rejects_size_mismatch(tmp_path, n, dim, body):
    p = tmp_path / "bad.u8bin"
    _write_bin(p, n, dim, body)
    with pytest.raises(DatasetFormatError):
        load_dataset(p, "u8")


def test_load_unknown_kind(tmp_path):
    p = tmp_path / "x.bin"
    _write_bin(p, 1, 1, b"\0")
    with pytest.raises(ValueError):
        load_dataset(p, "f16")


@pytest.mark.skipif(shutil.which("od") is None, reason="needs od")
def test_slice_first_row_matches_external_dump(tmp_path):
    ds = generate_dataset(10_000 + 50, 128, "u8", seed=3)
    p = tmp_path / "sift_like.u8bin"
    save_dataset(p, ds)
    sliced = load_dataset(p, "u8", max_points=10_000)
    assert sliced.num_points == 10_000
    dump = subprocess.run(["od", "-An", "-v", "-tu1", "-j8", "-N128", str(p)], capture_output=True, text=True,
                          check=True).stdout
    assert sliced.data[0].tolist() == [int(x) for x in dump.split()]


@pytest.mark.parametrize("kind", ["u8", "i8", "f32"])
def test_dataset_file_round_trip(tmp_path, kind):
    ds = generate_dataset(40, 12, kind, seed=1)
    save_dataset(tmp_path / "d.bin", ds)
    back = load_dataset(tmp_path / "d.bin", kind)
    assert back.data.dtype == ds.data.dtype
    np.testing.assert_array_equal(back.data, ds.data)


def test_sq_l2_trivial():
    x = np.array([7, 1, 200], dtype=np.uint8)
    assert sq_l2(x, x) == 0
    assert sq_l2(np.array([0, 3]), np.array([4, 0])) == 25


def test_sq_l2_u8_no_wraparound():
    assert sq_l2(np.array([0], np.uint8), np.array([255], np.uint8)) == 255 ** 2


def test_sq_l2_matches_scalar_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.integers(0, 256, 128, dtype=np.uint8)
        b = rng.integers(0, 256, 128, dtype=np.uint8)
        ref = 0
        for x, y in zip(a.tolist(), b.tolist()):
            ref += (x - y) * (x - y)
        assert sq_l2(a, b) == ref


def test_sq_l2_dimension_mismatch():
    with pytest.raises(ValueError):
        sq_l2(np.zeros(3), np.zeros(4))


def test_distances_to_exact_for_u8():
    # 128 * 255^2 < 2^24, so float32 sums of u8 differences are exact
    rng = np.random.default_rng(1)
    base = rng.integers(0, 256, (50, 128), dtype=np.uint8)
    q = rng.integers(0, 256, 128, dtype=np.uint8)
    got = distances_to(base.astype(np.float32), q)
    assert got.tolist() == [sq_l2(row, q) for row in base]


def test_knn_single_point():
    ds = VectorDataset(np.array([[1, 2]], np.uint8), "u8")
    gt = brute_force_knn(ds, np.array([[4, 6]], np.uint8), 1)
    assert gt.ids.tolist() == [[0]] and gt.dists.tolist() == [[25.0]]


def test_knn_self_query():
    ds = generate_dataset(200, 8, "u8", mode="uniform", seed=2)
    gt = brute_force_knn(ds, ds, 1)
    assert gt.dists[:, 0].tolist() == [0.0] * 200
    # self is the lowest id among exact duplicates, and duplicates are rare here
    same = np.array([sq_l2(ds.data[i], ds.data[gt.ids[i, 0]]) for i in range(200)])
    assert (same == 0).all()


def test_knn_permutation_stable():
    ds = generate_dataset(10_000, 16, "u8", seed=4)
    q = generate_dataset(100, 16, "u8", seed=5).data
    gt = brute_force_knn(ds, q, 10)
    # reference: queries in reverse order against a shuffled copy of the base
    perm = np.random.default_rng(0).permutation(ds.num_points)
    shuffled = ds.subset(perm)
    ref = brute_force_knn(shuffled, q[::-1], 10)
    ref_ids = perm[ref.ids][::-1]
    np.testing.assert_array_equal(ref.dists[::-1], gt.dists)
    for row_got, row_ref, d in zip(gt.ids, ref_ids, gt.dists):
        # rows agree as (dist, id) sets; ids inside a tie may be ordered differently by the shuffle
        assert sorted(zip(d.tolist(), row_got.tolist())) == sorted(zip(d.tolist(), row_ref.tolist()))


def test_knn_ties_by_id():
    ds = VectorDataset(np.array([[1], [0], [1], [2]], np.uint8), "u8")
    gt = brute_force_knn(ds, np.array([[1]], np.uint8), 3)
    assert gt.ids.tolist() == [[0, 2, 1]]


def test_knn_bad_k():
    ds = generate_dataset(5, 4, seed=0)
    with pytest.raises(ValueError):
        brute_force_knn(ds, ds, 6)
    with pytest.raises(ValueError):
        brute_force_knn(ds, ds, 0)


def test_recall_trivial_cases():
    gt = GroundTruth(np.array([[1, 2]], np.int32), np.array([[1.0, 2.0]], np.float32))
    assert recall_at_k([[1, 2]], gt, 2) == 1.0
    assert recall_at_k([[5, 6]], gt, 2, result_dists=[[3.0, 4.0]]) == 0.0


def test_recall_counts_tie_at_kth_distance():
    gt = GroundTruth(np.array([[1, 2]], np.int32), np.array([[1.0, 2.0]], np.float32))
    assert recall_at_k([[1, 9]], gt, 2, result_dists=[[1.0, 2.0]]) == 1.0


def test_recall_recomputes_distances():
    ds = VectorDataset(np.array([[0], [3], [3], [9]], np.uint8), "u8")
    q = np.array([[0]], np.uint8)
    gt = brute_force_knn(ds, q, 2)
    # id 2 ties id 1 at the k-th distance
    assert recall_at_k([[0, 2]], gt, 2, dataset=ds, queries=q) == 1.0
    assert recall_at_k([[3, 2]], gt, 2, dataset=ds, queries=q) == 0.5


def test_groundtruth_file_round_trip(tmp_path):
    ds = generate_dataset(100, 8, seed=0)
    gt = brute_force_knn(ds, ds.data[:7], 5)
    save_groundtruth(tmp_path / "gt", gt)
    back = load_groundtruth(tmp_path / "gt")
    np.testing.assert_array_equal(back.ids, gt.ids)
    np.testing.assert_array_equal(back.dists, gt.dists)


@pytest.mark.parametrize("kind", ["u8", "i8", "f32"])
@pytest.mark.parametrize("mode", ["uniform", "clustered"])
def test_generator_seeded(kind, mode):
    a = generate_dataset(64, 16, kind, mode, seed=9)
    b = generate_dataset(64, 16, kind, mode, seed=9)
    c = generate_dataset(64, 16, kind, mode, seed=10)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=64).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.integers(0, 255), min_size=len(a), max_size=len(a)))))
def test_sq_l2_symmetric_and_nonnegative(pair):
    a, b = (np.array(v, np.uint8) for v in pair)
    assert sq_l2(a, b) == sq_l2(b, a) >= 0
