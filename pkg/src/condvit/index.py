"""Exact cosine-similarity gallery index and the embedding store format.

Vectors are re-normalised on insert, so cosine similarity is a dot product.
Scores are accumulated in float64 by a row-independent kernel: a row's score
never depends on which other rows share the index, which is what makes
batched, sequential, filtered and pre-filtered searches agree bit for bit.
Ties are broken by ascending insertion index.

Embedding store file (little-endian)::

    b"CVEM" | u32 version | u32 n | u32 d | n*d f32 (row-major)
    | n * (u16 len, item id | u16 len or 0xFFFF, product id | i32 category or -1)
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from condvit.errors import IndexStateError, NumericError, StoreError

STORE_MAGIC = b"CVEM"
STORE_VERSION = 1
_ABSENT = 0xFFFF
_BLOCK = 65536


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"cosine_sim: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine_sim: zero-norm input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("cannot index a zero vector")
    return x / norms


def score_rows(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of every row with ``query``; row-independent float64 kernel."""
    out = np.empty(matrix.shape[0], dtype=np.float64)
    for start in range(0, matrix.shape[0], _BLOCK):
        stop = start + _BLOCK
        np.einsum("ij,j->i", matrix[start:stop], query, out=out[start:stop], optimize=False)
    return out


def top_k(scores: np.ndarray, k: int, candidates: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``k`` best scores, descending, ties by ascending position."""
    if candidates is not None:
        pos = top_k(scores[candidates], k)
        return candidates[pos]
    n = scores.shape[0]
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > kth)
        tied = np.flatnonzero(scores == kth)[: k - above.size]
        cand = np.concatenate([above, tied])
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order]


@dataclass
class SearchResult:
    ids: list[str]
    scores: list[float]
    positions: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.scores))

    def __getitem__(self, i):
        return self.ids[i], self.scores[i]


@dataclass
class EmbeddingStore:
    """Embeddings plus per-row metadata, as written to disk."""

    embeddings: np.ndarray
    item_ids: list[str]
    product_ids: list[str | None]
    categories: list[int | None]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not (len(self.item_ids) == len(self.product_ids) == len(self.categories) == n):
            raise StoreError(
                f"metadata lengths ({len(self.item_ids)}, {len(self.product_ids)}, "
                f"{len(self.categories)}) differ from embedding count {n}"
            )

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def take(self, rows) -> "EmbeddingStore":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingStore(
            self.embeddings[rows],
            [self.item_ids[r] for r in rows],
            [self.product_ids[r] for r in rows],
            [self.categories[r] for r in rows],
        )

    @staticmethod
    def concat(stores: Sequence["EmbeddingStore"]) -> "EmbeddingStore":
        dims = {s.dim for s in stores if len(s)}
        if len(dims) > 1:
            raise StoreError(f"cannot concatenate stores of dims {sorted(dims)}")
        d = dims.pop() if dims else (stores[0].dim if stores else 0)
        emb = np.concatenate([s.embeddings.reshape(-1, d) for s in stores]) if stores else np.zeros((0, d))
        return EmbeddingStore(
            emb,
            [i for s in stores for i in s.item_ids],
            [p for s in stores for p in s.product_ids],
            [c for s in stores for c in s.categories],
        )


def write_store(path, store: EmbeddingStore) -> None:
    emb = np.ascontiguousarray(store.embeddings, dtype="<f4")
    n, d = emb.shape
    parts = [STORE_MAGIC, struct.pack("<III", STORE_VERSION, n, d), emb.tobytes()]
    for item, prod, cat in zip(store.item_ids, store.product_ids, store.categories):
        raw = item.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        if prod is None:
            parts.append(struct.pack("<H", _ABSENT))
        else:
            raw = prod.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<i", -1 if cat is None else int(cat)))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STORE_MAGIC:
        raise StoreError(f"{path}: not an embedding store (bad magic)")
    if len(data) < 16:
        raise StoreError(f"{path}: truncated header")
    version, n, d = struct.unpack("<III", data[4:16])
    if version != STORE_VERSION:
        raise StoreError(f"{path}: store version {version}, this build reads version {STORE_VERSION}")
    pos = 16
    nbytes = n * d * 4
    if len(data) < pos + nbytes:
        raise StoreError(f"{path}: truncated embedding block")
    emb = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(n, d).astype(np.float32)
    pos += nbytes

    def need(k):
        if len(data) < pos + k:
            raise StoreError(f"{path}: truncated metadata block")

    items, prods, cats = [], [], []
    for _ in range(n):
        need(2)
        (ln,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        need(ln)
        items.append(data[pos:pos + ln].decode())
        pos += ln
        need(2)
        (ln,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        if ln == _ABSENT:
            prods.append(None)
        else:
            need(ln)
            prods.append(data[pos:pos + ln].decode())
            pos += ln
        need(4)
        (cat,) = struct.unpack("<i", data[pos:pos + 4])
        pos += 4
        cats.append(None if cat < 0 else cat)
    if pos != len(data):
        raise StoreError(f"{path}: {len(data) - pos} trailing bytes")
    return EmbeddingStore(emb, items, prods, cats)


class GalleryIndex:
    """Immutable flat index; searches are read-only and thread-safe."""

    def __init__(
        self,
        embeddings,
        item_ids: Sequence[str] | None = None,
        product_ids: Sequence[str | None] | None = None,
        categories: Sequence[int | None] | None = None,
        num_categories: int | None = None,
    ):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError(f"embeddings must be n x d, got shape {emb.shape}")
        n = emb.shape[0]
        self.matrix = normalize_rows(emb) if n else emb.copy()
        self.matrix.setflags(write=False)
        self.item_ids = list(item_ids) if item_ids is not None else [str(i) for i in range(n)]
        self.product_ids = list(product_ids) if product_ids is not None else [None] * n
        self.categories = list(categories) if categories is not None else [None] * n
        if not (len(self.item_ids) == len(self.product_ids) == len(self.categories) == n):
            raise ValueError("metadata length differs from embedding count")
        self._cat_array = np.array([-1 if c is None else c for c in self.categories], dtype=np.int64)
        known = [c for c in self.categories if c is not None]
        if num_categories is None:
            num_categories = (max(known) + 1) if known else 0
        self.num_categories = num_categories

    @classmethod
    def from_store(cls, store: EmbeddingStore, num_categories: int | None = None) -> "GalleryIndex":
        return cls(store.embeddings, store.item_ids, store.product_ids, store.categories, num_categories)

    def to_store(self) -> EmbeddingStore:
        return EmbeddingStore(self.matrix.astype(np.float32), self.item_ids, self.product_ids, self.categories)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query has dimension {q.shape[0]}, index has {self.dim}")
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise NumericError("zero-norm query")
        return score_rows(self.matrix, q / norm)

    def _result(self, scores, positions) -> SearchResult:
        return SearchResult(
            [self.item_ids[p] for p in positions],
            [float(scores[p]) for p in positions],
            [int(p) for p in positions],
        )

    def search(self, query, k: int) -> SearchResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not len(self):
            raise IndexStateError("search on an empty index")
        s = self.scores(query)
        return self._result(s, top_k(s, k))

    def category_rows(self, category: int) -> np.ndarray:
        if not isinstance(category, (int, np.integer)) or not 0 <= category < self.num_categories:
            raise ValueError(
                f"unknown category {category!r}; index labels are 0..{self.num_categories - 1}"
            )
        return np.flatnonzero(self._cat_array == category)

    def search_filtered(self, query, k: int, category: int) -> SearchResult:
        """Search restricted to items labelled ``category``; unlabelled items never match."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not len(self):
            raise IndexStateError("search on an empty index")
        rows = self.category_rows(category)
        if not rows.size:
            return SearchResult([], [], [])
        s = self.scores(query)
        return self._result(s, top_k(s, k, candidates=rows))

    def search_batch(self, queries, k: int, threads: int = 1, category=None) -> list[SearchResult]:
        """Per-query semantics identical to :meth:`search` / :meth:`search_filtered`."""
        qs = np.asarray(queries)
        if qs.ndim == 1:
            qs = qs[None]
        cats = category if isinstance(category, (list, tuple, np.ndarray)) else [category] * len(qs)

        def one(i):
            if cats[i] is None:
                return self.search(qs[i], k)
            return self.search_filtered(qs[i], k, int(cats[i]))

        if threads <= 1:
            return [one(i) for i in range(len(qs))]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(qs))))
