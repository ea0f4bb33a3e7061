"""Impact-weighted inverted index and exact dense store with top-k search.

Sparse search is term-at-a-time accumulation over postings, then top-k
selection; no pruning, since exactness against a brute-force oracle is the
whole point at desk scale. Ties always break by ascending doc id so run
files are bit-reproducible.

The on-disk index is a small versioned binary: header, lexicographically
sorted doc-id table, then per term delta-encoded doc indices with float32
weights. Scores are always computed in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, InputError, ParseError, ShapeError
from .represent import SparseVector, read_dense_vectors, write_dense_vectors

MAGIC = b"RLIDX001"
FORMAT_VERSION = 1

RankedList = list[tuple[str, float]]


def _top_k(scores: dict[str, float], k: int) -> RankedList:
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


@dataclass(frozen=True)
class IndexStats:
    docs: int
    terms: int
    postings: int
    mean_nonzeros: float


class InvertedIndex:
    """term_id -> postings sorted by doc id; immutable once built."""

    __slots__ = ("doc_ids", "postings", "vocab_hash")

    def __init__(self, doc_ids: tuple[str, ...],
                 postings: dict[int, tuple[tuple[str, float], ...]],
                 vocab_hash: str = ""):
        self.doc_ids = doc_ids
        self.postings = postings
        self.vocab_hash = vocab_hash

    @classmethod
    def build(cls, docs: Iterable[tuple[str, SparseVector]], vocab_hash: str = "") -> "InvertedIndex":
        seen: set[str] = set()
        raw: dict[int, list[tuple[str, float]]] = {}
        for doc_id, vec in docs:
            if doc_id in seen:
                raise InputError(f"duplicate doc id {doc_id!r}")
            seen.add(doc_id)
            for term, weight in vec.items():
                raw.setdefault(term, []).append((doc_id, weight))
        postings = {term: tuple(sorted(entries)) for term, entries in sorted(raw.items())}
        return cls(tuple(sorted(seen)), postings, vocab_hash)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def document_frequency(self, term: int) -> int:
        return len(self.postings.get(term, ()))

    def search(self, query: SparseVector, k: int) -> RankedList:
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        scores: dict[str, float] = {}
        for term, q_weight in query.items():
            for doc_id, d_weight in self.postings.get(term, ()):
                scores[doc_id] = scores.get(doc_id, 0.0) + q_weight * d_weight
        return _top_k(scores, k)

    def stats(self) -> IndexStats:
        postings = sum(len(p) for p in self.postings.values())
        docs = self.doc_count
        return IndexStats(docs=docs, terms=len(self.postings), postings=postings,
                          mean_nonzeros=postings / docs if docs else 0.0)

    def reconstruct(self) -> dict[str, SparseVector]:
        """Per-document sparse vectors re-assembled from the postings."""
        acc: dict[str, list[tuple[int, float]]] = {doc_id: [] for doc_id in self.doc_ids}
        for term, entries in self.postings.items():
            for doc_id, weight in entries:
                acc[doc_id].append((term, weight))
        out = {}
        for doc_id, pairs in acc.items():
            pairs.sort()
            out[doc_id] = SparseVector([t for t, _ in pairs], [w for _, w in pairs])
        return out

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks: list[bytes] = [MAGIC]
        vh = self.vocab_hash.encode("ascii")
        chunks.append(struct.pack("<IQQH", FORMAT_VERSION, self.doc_count, len(self.postings), len(vh)))
        chunks.append(vh)
        doc_index = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}
        for doc_id in self.doc_ids:
            raw = doc_id.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
        for term, entries in self.postings.items():
            chunks.append(struct.pack("<IQ", term, len(entries)))
            prev = 0
            deltas = []
            for doc_id, _ in entries:
                idx = doc_index[doc_id]
                deltas.append(idx - prev)
                prev = idx
            chunks.append(np.asarray(deltas, dtype="<u4").tobytes())
            chunks.append(np.asarray([w for _, w in entries], dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "InvertedIndex":
        view = memoryview(blob)
        if bytes(view[:8]) != MAGIC:
            raise ParseError("not an inverted index file (bad magic)")
        off = 8
        version, doc_count, term_count, vh_len = struct.unpack_from("<IQQH", view, off)
        off += struct.calcsize("<IQQH")
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported index version {version}")
        vocab_hash = bytes(view[off:off + vh_len]).decode("ascii")
        off += vh_len
        doc_ids = []
        for _ in range(doc_count):
            (n,) = struct.unpack_from("<I", view, off)
            off += 4
            doc_ids.append(bytes(view[off:off + n]).decode("utf-8"))
            off += n
        postings: dict[int, tuple[tuple[str, float], ...]] = {}
        for _ in range(term_count):
            term, count = struct.unpack_from("<IQ", view, off)
            off += struct.calcsize("<IQ")
            deltas = np.frombuffer(view, dtype="<u4", count=count, offset=off)
            off += 4 * count
            weights = np.frombuffer(view, dtype="<f4", count=count, offset=off)
            off += 4 * count
            indices = np.cumsum(deltas)
            postings[term] = tuple(
                (doc_ids[int(i)], float(w)) for i, w in zip(indices, weights))
        return cls(tuple(doc_ids), postings, vocab_hash)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


class DenseStore:
    """doc_id -> dense vector, all of one dimension; exact dot-product search."""

    __slots__ = ("doc_ids", "matrix")

    def __init__(self, doc_ids: Sequence[str], matrix: np.ndarray):
        self.doc_ids = list(doc_ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.doc_ids):
            raise ShapeError("matrix rows must match doc ids")
        if not np.isfinite(self.matrix).all():
            raise InputError("dense store contains non-finite values")

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, np.ndarray]]) -> "DenseStore":
        pairs = sorted(items, key=lambda kv: kv[0])
        ids = [doc_id for doc_id, _ in pairs]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate doc id in dense store")
        if not ids:
            raise InputError("dense store needs at least one document")
        dims = {np.asarray(v).shape for _, v in pairs}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ShapeError(f"all dense vectors must share one 1-d shape, got {sorted(dims)}")
        return cls(ids, np.stack([np.asarray(v, dtype=np.float64) for _, v in pairs]))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def search(self, query: np.ndarray, k: int) -> RankedList:
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ShapeError(f"query of shape {q.shape} does not match store dimension {self.dim}")
        scores = self.matrix @ q
        return _top_k({doc_id: float(s) for doc_id, s in zip(self.doc_ids, scores)}, k)

    def save(self, path) -> None:
        write_dense_vectors(path, zip(self.doc_ids, self.matrix))

    @classmethod
    def load(cls, path) -> "DenseStore":
        return cls.from_items(read_dense_vectors(path))


# spec-level entry points


def build_inverted_index(docs: Iterable[tuple[str, SparseVector]], vocab_hash: str = "") -> InvertedIndex:
    return InvertedIndex.build(docs, vocab_hash)


def search_sparse(index: InvertedIndex, query: SparseVector, k: int) -> RankedList:
    return index.search(query, k)


def search_dense(store: DenseStore, query: np.ndarray, k: int) -> RankedList:
    return store.search(query, k)


def index_stats(index: InvertedIndex) -> IndexStats:
    return index.stats()
