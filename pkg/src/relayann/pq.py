"""Product quantization: per-subspace k-means codebooks, 1-byte codes, LUT distances."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .vecdata import VectorDataset

_CODEBOOK_HEADER = struct.Struct("<III")
_CODES_HEADER = struct.Struct("<II")


@dataclass
class PQCodebook:
    num_subspaces: int
    bits: int
    dim: int
    centroids: list[np.ndarray]  # per subspace: (2**bits, width) float32

    @property
    def num_centroids(self) -> int:
        return 1 << self.bits

    @property
    def bounds(self) -> np.ndarray:
        return subspace_bounds(self.dim, self.num_subspaces)

    @property
    def code_size(self) -> int:
        """Bytes per encoded vector (one byte per subspace)."""
        return self.num_subspaces

    def joined(self) -> np.ndarray:
        """Centroids side by side as one (k, dim) array; column slices follow ``bounds``."""
        cached = getattr(self, "_joined", None)
        if cached is None:
            cached = self._joined = np.ascontiguousarray(np.hstack(self.centroids), dtype=np.float32)
        return cached

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        out = np.empty((codes.shape[0], self.dim), dtype=np.float32)
        b = self.bounds
        for s in range(self.num_subspaces):
            out[:, b[s] : b[s + 1]] = self.centroids[s][codes[:, s]]
        return out

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(_CODEBOOK_HEADER.pack(self.num_subspaces, self.bits, self.dim))
            for c in self.centroids:
                f.write(c.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PQCodebook":
        with open(path, "rb") as f:
            raw = f.read()
        m, bits, dim = _CODEBOOK_HEADER.unpack_from(raw)
        b = subspace_bounds(dim, m)
        k = 1 << bits
        off = _CODEBOOK_HEADER.size
        cents = []
        for s in range(m):
            w = int(b[s + 1] - b[s])
            cents.append(np.frombuffer(raw, dtype="<f4", count=k * w, offset=off).reshape(k, w).astype(np.float32))
            off += 4 * k * w
        if off != len(raw):
            raise ValueError(f"{path}: codebook size does not match header")
        return cls(m, bits, dim, cents)


def save_codes(path: str | os.PathLike, codes: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_CODES_HEADER.pack(codes.shape[0], codes.shape[1]))
        f.write(np.ascontiguousarray(codes, dtype=np.uint8).tobytes())


def load_codes(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    n, m = _CODES_HEADER.unpack_from(raw)
    if len(raw) != _CODES_HEADER.size + n * m:
        raise ValueError(f"{path}: codes size does not match header")
    return np.frombuffer(raw, dtype=np.uint8, offset=_CODES_HEADER.size).reshape(n, m).copy()


def subspace_bounds(dim: int, m: int) -> np.ndarray:
    """Contiguous slice boundaries; widths differ by at most one."""
    if m <= 0 or m > dim:
        raise ValueError(f"need 1 <= m <= dim, got m={m}, dim={dim}")
    base, extra = divmod(dim, m)
    widths = np.full(m, base, dtype=np.int64)
    widths[:extra] += 1
    return np.concatenate([[0], np.cumsum(widths)])


@numba.njit(cache=True)
def _assign(x, cents, labels, dists):
    n, w = x.shape
    k = cents.shape[0]
    for i in range(n):
        best = np.float32(np.inf)
        bi = 0
        for c in range(k):
            s = np.float32(0.0)
            for j in range(w):
                t = x[i, j] - cents[c, j]
                s += t * t
            if s < best:
                best = s
                bi = c
        labels[i] = bi
        dists[i] = best


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    cents = np.empty((k, x.shape[1]), dtype=np.float32)
    cents[0] = x[rng.integers(n)]
    d2 = ((x - cents[0]) ** 2).sum(axis=1, dtype=np.float64)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        cents[c] = x[idx]
        np.minimum(d2, ((x - cents[c]) ** 2).sum(axis=1, dtype=np.float64), out=d2)
    return cents


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator,
           history: list[float] | None = None) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding.

    An empty cluster is re-seeded at the member of the largest cluster that
    lies farthest from its centroid, so the objective never increases.
    ``history`` (if given) receives the objective after each assignment.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    n = x.shape[0]
    cents = _kmeanspp(x, k, rng)
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float32)
    for _ in range(iters):
        _assign(x, cents, labels, dists)
        if history is not None:
            history.append(float(dists.sum(dtype=np.float64)))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, x.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        cents[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        for c in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[int(np.argmax(dists[members]))]
            cents[c] = x[far]
            dists[far] = 0.0
            counts[big] -= 1
            counts[c] += 1
            labels[far] = c
    return cents


def train_pq(dataset: VectorDataset, m: int = 32, bits: int = 8, train_sample_size: int | None = None,
             kmeans_iters: int = 12, seed: int = 0) -> PQCodebook:
    """Train one 2**bits-centroid codebook per contiguous subspace."""
    if dataset.num_points == 0:
        raise ValueError("cannot train PQ on an empty dataset")
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in [1, 8] for byte codes")
    bounds = subspace_bounds(dataset.dim, m)
    k = 1 << bits
    if train_sample_size is None:
        train_sample_size = min(256 * k, dataset.num_points)
    if train_sample_size > dataset.num_points:
        raise ValueError("train_sample_size exceeds num_points")
    rng = np.random.default_rng(seed)
    sample = np.sort(rng.choice(dataset.num_points, train_sample_size, replace=False))
    x = dataset.as_float()[sample]
    cents = []
    for s in range(m):
        sub = x[:, bounds[s] : bounds[s + 1]]
        cents.append(kmeans(sub, k, kmeans_iters, np.random.default_rng([seed, s])))
    return PQCodebook(m, bits, dataset.dim, cents)


def encode(codebook: PQCodebook, dataset: VectorDataset | np.ndarray) -> np.ndarray:
    """Nearest centroid per subspace (lowest index wins ties)."""
    data = dataset.as_float() if isinstance(dataset, VectorDataset) else np.ascontiguousarray(dataset, np.float32)
    if data.ndim != 2 or data.shape[1] != codebook.dim:
        raise ValueError("dimension mismatch between codebook and data")
    n = data.shape[0]
    codes = np.empty((n, codebook.num_subspaces), dtype=np.uint8)
    if n == 0:
        return codes
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float32)
    b = codebook.bounds
    for s in range(codebook.num_subspaces):
        _assign(np.ascontiguousarray(data[:, b[s] : b[s + 1]]), codebook.centroids[s], labels, dists)
        codes[:, s] = labels
    return codes


def build_query_lut(codebook: PQCodebook, query: np.ndarray) -> np.ndarray:
    """(m, 2**bits) table of squared distances from each query slice to each centroid."""
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (codebook.dim,):
        raise ValueError("query dimension mismatch")
    table = np.empty((codebook.num_subspaces, codebook.num_centroids), dtype=np.float32)
    _fill_lut(codebook.joined(), codebook.bounds, q, table)
    return table


@numba.njit(cache=True)
def _fill_lut(cents, bounds, q, table):
    sq = np.empty(cents.shape[1], np.float32)
    for c in range(cents.shape[0]):
        for j in range(cents.shape[1]):
            t = cents[c, j] - q[j]
            sq[j] = t * t
        for s in range(table.shape[0]):
            acc = np.float32(0.0)
            for j in range(bounds[s], bounds[s + 1]):
                acc += sq[j]
            table[s, c] = acc


def approx_dist(lut: np.ndarray, code_row: np.ndarray) -> float:
    s = np.float32(0.0)
    for sub, c in enumerate(code_row):
        s += lut[sub, c]
    return float(s)


@numba.njit(cache=True)
def _approx_dists(lut, codes, out):
    for i in range(codes.shape[0]):
        s = np.float32(0.0)
        for sub in range(codes.shape[1]):
            s += lut[sub, codes[i, sub]]
        out[i] = s


def approx_dists(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """``approx_dist`` over many code rows, same subspace-sequential float32 sums."""
    out = np.empty(codes.shape[0], dtype=np.float32)
    _approx_dists(lut, codes, out)
    return out
