"""Exact L2 nearest-neighbor search over a fixed matrix of exemplar vectors.

Distances come from a blocked ``|q|^2 + |x|^2 - 2 q.x`` expansion used only to
pick candidates; every returned distance is recomputed directly from the
coordinate differences so results agree with a naive scan.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

# bounds the (block x N) scratch matrices
_BLOCK_ELEMENTS = 1 << 22
# relative slack on squared distances covering cancellation in the expansion
_EXPANSION_SLACK = 1e-10


class Neighbor(NamedTuple):
    row: int
    distance: float


@dataclass(frozen=True, eq=False)
class VectorIndex:
    vectors: np.ndarray
    ids: tuple[str, ...]
    sq_norms: np.ndarray

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.size


def build(vectors, ids=None) -> VectorIndex:
    if isinstance(vectors, np.ndarray):
        arr = vectors
    else:
        rows = list(vectors)
        if not rows:
            raise ValueError("cannot build an index over no vectors")
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise ValueError("ragged input: vectors have differing lengths")
        arr = np.asarray(rows, dtype=np.float64)
    arr = np.array(arr, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ValueError("vectors must form a 2-D matrix")
    if arr.shape[0] == 0:
        raise ValueError("cannot build an index over no vectors")
    if arr.shape[1] == 0:
        raise ValueError("vectors must have at least one dimension")
    ids = tuple(str(i) for i in range(arr.shape[0])) if ids is None else tuple(ids)
    if len(ids) != arr.shape[0]:
        raise ValueError("row count and id count differ")
    arr.setflags(write=False)
    sq = np.einsum("ij,ij->i", arr, arr)
    sq.setflags(write=False)
    return VectorIndex(arr, ids, sq)


def _as_queries(index: VectorIndex, q) -> np.ndarray:
    Q = np.asarray(q, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[1] != index.dim:
        raise ValueError(f"dimension mismatch: query has {Q.shape[-1]} columns, index has {index.dim}")
    return Q


def exact_distances(index: VectorIndex, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Direct L2 distances from one query to the given rows.

    Summed with numpy's pairwise reduction, the same arithmetic as a plain
    ``sqrt(((x - q) ** 2).sum())`` scan, so exact ties resolve identically.
    """
    diff = index.vectors[rows] - q
    return np.sqrt((diff * diff).sum(axis=1))


def _approx_sq(index: VectorIndex, Q: np.ndarray) -> np.ndarray:
    qn = np.einsum("ij,ij->i", Q, Q)
    sq = qn[:, None] + index.sq_norms[None, :] - 2.0 * (Q @ index.vectors.T)
    np.maximum(sq, 0.0, out=sq)
    return sq, qn


def _topk_one(index: VectorIndex, q: np.ndarray, approx_sq: np.ndarray, qn: float, k: int):
    N = index.size
    if k >= N:
        cand = np.arange(N)
    else:
        kth = np.partition(approx_sq, k - 1)[k - 1]
        slack = _EXPANSION_SLACK * (qn + index.sq_norms.max()) + 1e-300
        cand = np.flatnonzero(approx_sq <= kth + 2.0 * slack)
    d = exact_distances(index, q, cand)
    order = np.lexsort((cand, d))[:k]
    return cand[order], d[order]


def _topk_block(index: VectorIndex, Q: np.ndarray, k: int):
    sq, qn = _approx_sq(index, Q)
    rows = np.empty((Q.shape[0], k), dtype=np.int64)
    dists = np.empty((Q.shape[0], k), dtype=np.float64)
    for i in range(Q.shape[0]):
        rows[i], dists[i] = _topk_one(index, Q[i], sq[i], qn[i], k)
    return rows, dists


def _blocks(n_queries: int, n_rows: int):
    step = max(1, _BLOCK_ELEMENTS // max(1, n_rows))
    return [(s, min(n_queries, s + step)) for s in range(0, n_queries, step)]


def batch_topk(index: VectorIndex, queries, k: int, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Top-k rows and distances for many queries; shape (n_queries, min(k, N))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    Q = _as_queries(index, queries)
    k = min(k, index.size)
    blocks = _blocks(Q.shape[0], index.size)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: _topk_block(index, Q[b[0] : b[1]], k), blocks))
    else:
        parts = [_topk_block(index, Q[a:b], k) for a, b in blocks]
    if not parts:
        return np.empty((0, k), dtype=np.int64), np.empty((0, k))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def query_topk(index: VectorIndex, q, k: int) -> list[Neighbor]:
    """The min(k, N) nearest rows in ascending distance; ties go to the lower row."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a single vector")
    rows, dists = batch_topk(index, q, k)
    return [Neighbor(int(r), float(d)) for r, d in zip(rows[0], dists[0])]


def query_all_sorted(index: VectorIndex, q) -> list[Neighbor]:
    return query_topk(index, q, index.size)


def pairwise_distances(index: VectorIndex, queries, threads: int = 1) -> np.ndarray:
    """Dense (n_queries, N) L2 distance matrix.

    Entries whose expansion value is small relative to the vector norms are
    recomputed directly, so near-duplicates come out at their true distance
    (exactly 0 for identical vectors).
    """
    Q = _as_queries(index, queries)
    out = np.empty((Q.shape[0], index.size), dtype=np.float64)

    def fill(block):
        a, b = block
        sq, qn = _approx_sq(index, Q[a:b])
        scale = qn[:, None] + index.sq_norms[None, :]
        near = sq <= 1e-6 * scale
        for i, j in zip(*np.nonzero(near)):
            diff = index.vectors[j] - Q[a + i]
            sq[i, j] = (diff * diff).sum()
        out[a:b] = np.sqrt(sq)

    blocks = _blocks(Q.shape[0], index.size)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, blocks))
    else:
        for blk in blocks:
            fill(blk)
    return out


# ---------------------------------------------------------------------------
# on-disk neighbor cache

CACHE_ENV = "KNNSETS_CACHE_DIR"


def cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def _cache_key(bundle_hash: str, name: str, k: int) -> str:
    return hashlib.sha256(f"{bundle_hash}:{name}:{k}".encode()).hexdigest()[:32]


def load_cached_topk(bundle_hash: str, name: str, k: int):
    """Return (rows, dists) from the cache directory, or None on a miss."""
    d = cache_dir()
    if d is None:
        return None
    path = d / f"{_cache_key(bundle_hash, name, k)}.npz"
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as z:
        if str(z["bundle_hash"]) != bundle_hash or int(z["k"]) != k:
            return None
        return z["rows"], z["dists"]


def store_cached_topk(bundle_hash: str, name: str, k: int, rows: np.ndarray, dists: np.ndarray) -> None:
    d = cache_dir()
    if d is None:
        return
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{_cache_key(bundle_hash, name, k)}.npz"
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, bundle_hash=np.array(bundle_hash), k=np.array(k), rows=rows, dists=dists)
    os.replace(tmp, path)


def cached_batch_topk(index: VectorIndex, queries, k: int, bundle_hash: str | None, name: str, threads: int = 1):
    k = min(k, index.size)
    if bundle_hash is not None:
        hit = load_cached_topk(bundle_hash, name, k)
        if hit is not None:
            return hit
    rows, dists = batch_topk(index, queries, k, threads=threads)
    if bundle_hash is not None:
        store_cached_topk(bundle_hash, name, k, rows, dists)
    return rows, dists
