"""Datasets, squared-L2 distances, exact k-NN ground truth and recall."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

ELEM_DTYPES = {
    "u8": np.dtype(np.uint8),
    "i8": np.dtype(np.int8),
    "f32": np.dtype("<f4"),
}
ELEM_CODES = {"u8": 0, "i8": 1, "f32": 2}
ELEM_FROM_CODE = {v: k for k, v in ELEM_CODES.items()}

_HEADER = struct.Struct("<II")


class DatasetFormatError(ValueError):
    """A vector or ground-truth file does not match its declared layout."""


def elem_kind_of(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    for kind, dt in ELEM_DTYPES.items():
        if dt == dtype:
            return kind
    raise ValueError(f"unsupported element dtype {dtype}")


def _check_kind(elem_kind: str) -> np.dtype:
    try:
        return ELEM_DTYPES[elem_kind]
    except KeyError:
        raise ValueError(f"unsupported elem_kind {elem_kind!r}; expected one of {sorted(ELEM_DTYPES)}") from None


@dataclass
class VectorDataset:
    """Dense row-major vectors of a single element kind."""

    data: np.ndarray
    elem_kind: str

    def __post_init__(self) -> None:
        dtype = _check_kind(self.elem_kind)
        if self.data.ndim != 2:
            raise ValueError("dataset must be 2-D (num_points x dim)")
        if self.data.shape[1] <= 0:
            raise ValueError("dim must be positive")
        if self.data.dtype != dtype:
            self.data = self.data.astype(dtype)

    @property
    def num_points(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return self.num_points

    def as_float(self) -> np.ndarray:
        """Float32 view used by the search kernels (exact for 8-bit kinds)."""
        return np.ascontiguousarray(self.data, dtype=np.float32)

    def subset(self, ids: np.ndarray) -> "VectorDataset":
        return VectorDataset(np.ascontiguousarray(self.data[ids]), self.elem_kind)


@dataclass
class GroundTruth:
    ids: np.ndarray  # (nq, k) int32
    dists: np.ndarray  # (nq, k) float32, ascending per row

    @property
    def k(self) -> int:
        return int(self.ids.shape[1])

    @property
    def num_queries(self) -> int:
        return int(self.ids.shape[0])


def load_dataset(path: str | os.PathLike, elem_kind: str, max_points: int | None = None) -> VectorDataset:
    """Read a big-ann style ``.bin`` file (u32 count, u32 dim, row-major payload).

    ``max_points`` reads only a leading slice, which is how the 10M/100M
    benchmark files are usually cut down to desk size.
    """
    dtype = _check_kind(elem_kind)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DatasetFormatError(f"{path}: truncated header")
        n, dim = _HEADER.unpack(head)
        if dim == 0:
            raise DatasetFormatError(f"{path}: dim must be positive")
        want = n if max_points is None else min(n, max_points)
        nbytes = want * dim * dtype.itemsize
        body = f.read(nbytes)
        if len(body) != nbytes:
            raise DatasetFormatError(f"{path}: expected {nbytes} payload bytes, found {len(body)}")
        if max_points is None and f.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after declared payload")
    data = np.frombuffer(body, dtype=dtype).reshape(want, dim).copy()
    return VectorDataset(data, elem_kind)


def dataset_to_bytes(dataset: VectorDataset) -> bytes:
    return _HEADER.pack(dataset.num_points, dataset.dim) + np.ascontiguousarray(dataset.data).tobytes()


def dataset_from_bytes(raw: bytes, elem_kind: str) -> VectorDataset:
    dtype = _check_kind(elem_kind)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    n, dim = _HEADER.unpack_from(raw)
    if dim == 0 or len(raw) != _HEADER.size + n * dim * dtype.itemsize:
        raise DatasetFormatError("payload size does not match header")
    data = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(n, dim).copy()
    return VectorDataset(data, elem_kind)


def save_dataset(path: str | os.PathLike, dataset: VectorDataset) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(dataset))


def save_groundtruth(path: str | os.PathLike, gt: GroundTruth) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(gt.num_queries, gt.k))
        f.write(gt.ids.astype("<i4").tobytes())
        f.write(gt.dists.astype("<f4").tobytes())


def load_groundtruth(path: str | os.PathLike) -> GroundTruth:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    n, k = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * n * k
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    ids = np.frombuffer(raw, dtype="<i4", count=n * k, offset=_HEADER.size).reshape(n, k)
    dists = np.frombuffer(raw, dtype="<f4", count=n * k, offset=_HEADER.size + 4 * n * k).reshape(n, k)
    return GroundTruth(ids.astype(np.int32), dists.astype(np.float32))


def sq_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Squared euclidean distance.

    Integer inputs are accumulated in int64 so the result is exact; float
    inputs are accumulated in float32.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.dtype.kind in "iu" and b.dtype.kind in "iu":
        d = a.astype(np.int64) - b.astype(np.int64)
        return float(np.dot(d, d))
    d = a.astype(np.float32) - b.astype(np.float32)
    return float(np.dot(d, d))


@numba.njit(cache=True, fastmath=False)
def _sq_l2_rows(base: np.ndarray, q: np.ndarray, out: np.ndarray) -> None:
    n, d = base.shape
    for i in range(n):
        s = numba.float32(0.0)
        for j in range(d):
            t = base[i, j] - q[j]
            s += t * t
        out[i] = s


def distances_to(base: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distances from one float32 query to every float32 row of ``base``."""
    out = np.empty(base.shape[0], dtype=np.float32)
    _sq_l2_rows(base, np.ascontiguousarray(query, dtype=np.float32), out)
    return out


def topk_by_distance(ids: np.ndarray, dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest (dist, id) pairs, ties broken by ascending id."""
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


def brute_force_knn(dataset: VectorDataset, queries: VectorDataset | np.ndarray, k: int) -> GroundTruth:
    """Exact k nearest neighbors of every query (ties by ascending id)."""
    if k <= 0:
        raise ValueError("k must be positive")
    if k > dataset.num_points:
        raise ValueError(f"k={k} exceeds num_points={dataset.num_points}")
    qdata = queries.data if isinstance(queries, VectorDataset) else np.asarray(queries)
    if qdata.ndim != 2 or qdata.shape[1] != dataset.dim:
        raise ValueError("query dimension mismatch")
    base = dataset.as_float()
    qf = np.ascontiguousarray(qdata, dtype=np.float32)
    all_ids = np.arange(dataset.num_points, dtype=np.int32)
    ids = np.empty((qf.shape[0], k), dtype=np.int32)
    dists = np.empty((qf.shape[0], k), dtype=np.float32)
    for qi in range(qf.shape[0]):
        d = distances_to(base, qf[qi])
        # argpartition cannot break ties by id, so widen to every point tied with the k-th
        if k < len(d):
            kth = np.partition(d, k - 1)[k - 1]
            cand = np.flatnonzero(d <= kth)
        else:
            cand = all_ids
        ids[qi], dists[qi] = topk_by_distance(all_ids[cand], d[cand], k)
    return GroundTruth(ids, dists)


def recall_at_k(results, gt: GroundTruth, k: int, dataset: VectorDataset | None = None,
                queries: np.ndarray | None = None, result_dists=None) -> float:
    """Mean fraction of the first ``k`` results at least as close as the true k-th neighbor.

    A result counts if its true distance is <= the k-th ground-truth
    distance, so a tied point with a different id still counts. True
    distances come from ``result_dists`` when supplied (exact distances
    reported by the search), else they are recomputed from ``dataset`` and
    ``queries``, else only exact id matches with the ground-truth rows count.
    """
    if k > gt.k:
        raise ValueError(f"ground truth only holds {gt.k} neighbors")
    rows = list(results)
    if len(rows) > gt.num_queries:
        raise ValueError("missing ground-truth row")
    if not rows:
        return 0.0
    total = 0.0
    for qi, row in enumerate(rows):
        row = np.asarray(row, dtype=np.int64)[:k]
        thresh = gt.dists[qi, k - 1]
        if result_dists is not None:
            d = np.asarray(result_dists[qi], dtype=np.float32)[:k]
            hits = int(np.count_nonzero(d <= thresh))
        elif dataset is not None and queries is not None:
            q = np.asarray(queries[qi])
            hits = sum(1 for i in row if sq_l2(dataset.data[i], q) <= thresh)
        else:
            hits = len(set(row.tolist()) & set(gt.ids[qi, :k].tolist()))
        total += hits / k
    return total / len(rows)


def generate_dataset(num_points: int, dim: int, elem_kind: str = "u8", mode: str = "clustered",
                     seed: int = 0, num_clusters: int = 16, intrinsic_dim: int = 64) -> VectorDataset:
    """Seeded synthetic corpus.

    ``uniform`` draws every coordinate independently. ``clustered`` places
    points on low-dimensional gaussian patches around random centers, which
    gives a realistic intrinsic dimension for graph indexes.
    """
    _check_kind(elem_kind)
    rng = np.random.default_rng(seed)
    lo, hi = {"u8": (0, 255), "i8": (-128, 127), "f32": (-1.0, 1.0)}[elem_kind]
    if mode == "uniform":
        x = rng.uniform(lo, hi, size=(num_points, dim))
    elif mode == "clustered":
        span = hi - lo
        centers = rng.uniform(lo + 0.25 * span, hi - 0.25 * span, size=(num_clusters, dim))
        bases = rng.normal(size=(num_clusters, intrinsic_dim, dim)) * (0.05 * span / np.sqrt(intrinsic_dim))
        labels = rng.integers(0, num_clusters, size=num_points)
        z = rng.normal(size=(num_points, intrinsic_dim))
        x = centers[labels]
        for c in range(num_clusters):
            members = labels == c
            x[members] += z[members] @ bases[c]
        x += rng.normal(scale=0.01 * span, size=x.shape)
    else:
        raise ValueError(f"unknown generator mode {mode!r}")
    if elem_kind == "f32":
        data = x.astype(np.float32)
    else:
        data = np.clip(np.rint(x), lo, hi).astype(ELEM_DTYPES[elem_kind])
    return VectorDataset(data, elem_kind)
