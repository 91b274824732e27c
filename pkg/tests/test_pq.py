import numpy as np
import pytest

from relayann.pq import (PQCodebook, approx_dist, approx_dists, build_query_lut, encode, load_codes, save_codes,
                         subspace_bounds, train_pq)
from relayann.vecdata import VectorDataset, generate_dataset, sq_l2


def test_repeated_vector_zero_error():
    row = np.arange(16, dtype=np.uint8) * 3
    ds = VectorDataset(np.tile(row, (50, 1)), "u8")
    cb = train_pq(ds, m=4, bits=2, kmeans_iters=3)
    b = cb.bounds
    for s in range(4):
        assert (cb.centroids[s] == row[b[s] : b[s + 1]]).all(axis=1).any()
    codes = encode(cb, ds)
    np.testing.assert_array_equal(cb.reconstruct(codes), ds.as_float())


def test_code_size_32_bytes():
    ds = generate_dataset(600, 128, seed=0)
    cb = train_pq(ds, m=32, bits=8, kmeans_iters=1)
    assert cb.code_size == 32
    assert encode(cb, ds).shape == (600, 32)


def test_two_cluster_means_recovered():
    rng = np.random.default_rng(0)
    m, width = 4, 3
    lo = rng.uniform(0, 10, (m, width))
    hi = lo + 100
    labels = rng.integers(0, 2, (400, m))
    x = np.where(labels[:, :, None] == 0, lo[None], hi[None]) + rng.normal(0, 1, (400, m, width))
    ds = VectorDataset(x.reshape(400, m * width).astype(np.float32), "f32")
    cb = train_pq(ds, m=m, bits=1, kmeans_iters=10)
    for s in range(m):
        pts = x[:, s, :]
        truth = np.stack([pts[labels[:, s] == c].mean(axis=0) for c in (0, 1)])
        got = cb.centroids[s][np.argsort(cb.centroids[s][:, 0])]
        np.testing.assert_allclose(got, truth, atol=1e-3)


def test_encode_centroid_concatenation():
    ds = generate_dataset(500, 16, seed=1)
    cb = train_pq(ds, m=4, bits=4, kmeans_iters=4)
    pick = np.array([[3, 0, 15, 7], [1, 1, 1, 1]])
    vecs = cb.reconstruct(pick)
    np.testing.assert_array_equal(encode(cb, vecs), pick)


def test_encode_is_exhaustively_optimal():
    ds = generate_dataset(3000, 32, seed=2)
    cb = train_pq(ds, m=8, bits=8, kmeans_iters=3)
    codes = encode(cb, ds)
    x = ds.as_float()
    b = cb.bounds
    for i in np.random.default_rng(0).choice(ds.num_points, 10, replace=False):
        for s in range(8):
            sub = x[i, b[s] : b[s + 1]]
            errs = ((cb.centroids[s] - sub) ** 2).sum(axis=1)
            assert errs[codes[i, s]] <= errs.min()


def test_encode_empty():
    ds = generate_dataset(300, 8, seed=0)
    cb = train_pq(ds, m=2, bits=4, kmeans_iters=1)
    assert encode(cb, np.empty((0, 8), np.float32)).shape == (0, 2)


def test_lut_zero_at_matching_centroid():
    ds = generate_dataset(500, 16, seed=3)
    cb = train_pq(ds, m=4, bits=4, kmeans_iters=2)
    j = 5
    q = cb.reconstruct(np.full((1, 4), j))[0]
    lut = build_query_lut(cb, q)
    assert (lut[:, j] == 0).all()


def test_lut_all_zero():
    cb = PQCodebook(2, 2, 4, [np.zeros((4, 2), np.float32), np.zeros((4, 2), np.float32)])
    assert not build_query_lut(cb, np.zeros(4)).any()


def test_approx_dist_matches_reconstruction():
    ds = generate_dataset(2000, 64, seed=4)
    cb = train_pq(ds, m=16, bits=8, kmeans_iters=3)
    codes = encode(cb, ds)
    q = generate_dataset(5, 64, seed=5).as_float()
    recon = cb.reconstruct(codes[:100])
    for qq in q:
        lut = build_query_lut(cb, qq)
        batch = approx_dists(lut, codes[:100])
        for i in range(100):
            exact = sq_l2(qq, recon[i])
            assert approx_dist(lut, codes[i]) == pytest.approx(exact, rel=1e-3)
            assert batch[i] == pytest.approx(exact, rel=1e-3)


def test_subspace_bounds_uneven():
    assert subspace_bounds(10, 3).tolist() == [0, 4, 7, 10]
    with pytest.raises(ValueError):
        subspace_bounds(4, 5)


def test_codebook_and_codes_files(tmp_path):
    ds = generate_dataset(300, 10, seed=6)
    cb = train_pq(ds, m=3, bits=3, kmeans_iters=2)
    cb.save(tmp_path / "cb")
    back = PQCodebook.load(tmp_path / "cb")
    assert (back.num_subspaces, back.bits, back.dim) == (3, 3, 10)
    for a, b in zip(cb.centroids, back.centroids):
        np.testing.assert_array_equal(a, b)
    codes = encode(cb, ds)
    save_codes(tmp_path / "codes", codes)
    np.testing.assert_array_equal(load_codes(tmp_path / "codes"), codes)


def test_train_rejects_bad_arguments():
    ds = generate_dataset(10, 8, seed=0)
    with pytest.raises(ValueError):
        train_pq(ds, m=2, bits=9)
    with pytest.raises(ValueError):
        train_pq(ds, m=2, bits=2, train_sample_size=11)
    with pytest.raises(ValueError):
        train_pq(VectorDataset(np.empty((0, 8), np.uint8), "u8"), m=2)


def test_training_is_seeded():
    ds = generate_dataset(800, 16, seed=7)
    a = train_pq(ds, m=4, bits=4, seed=3)
    b = train_pq(ds, m=4, bits=4, seed=3)
    for x, y in zip(a.centroids, b.centroids):
        np.testing.assert_array_equal(x, y)
