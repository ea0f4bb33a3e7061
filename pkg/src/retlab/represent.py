"""Single-vector text representations and their scoring.

Dense: mean pooling over real positions. Sparse: project each contextual
column into vocabulary space through the embedding table, max-pool over
real positions, then log(1 + relu(.)). Relevance is a plain dot product in
both paradigms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError, ParseError, ShapeError

# weights below this are dropped when materializing vectors for indexing
INDEX_PRUNE_THRESHOLD = 1e-4


@dataclass
class DenseVector:
    values: Tensor  # 1-d

    @property
    def dim(self) -> int:
        return self.values.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.data


class SparseVector:
    """Sorted (term_id, weight) pairs with strictly positive weights."""

    __slots__ = ("term_ids", "weights")

    def __init__(self, term_ids, weights):
        self.term_ids = np.asarray(term_ids, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.term_ids.shape != self.weights.shape or self.term_ids.ndim != 1:
            raise InputError("term_ids and weights must be 1-d and the same length")
        if self.term_ids.size:
            if (np.diff(self.term_ids) <= 0).any():
                raise InputError("term_ids must be strictly increasing")
            if self.term_ids[0] < 0:
                raise InputError("term_ids must be non-negative")
            if not (self.weights > 0).all() or not np.isfinite(self.weights).all():
                raise InputError("weights must be finite and strictly positive")

    @classmethod
    def from_dense(cls, values: np.ndarray, min_weight: float = 0.0) -> "SparseVector":
        values = np.asarray(values, dtype=np.float64)
        keep = values > max(0.0, min_weight)
        return cls(np.flatnonzero(keep), values[keep])

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.term_ids] = self.weights
        return out

    @property
    def nnz(self) -> int:
        return int(self.term_ids.size)

    def items(self) -> Iterator[tuple[int, float]]:
        return zip((int(t) for t in self.term_ids), (float(w) for w in self.weights))

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseVector)
                and np.array_equal(self.term_ids, other.term_ids)
                and np.array_equal(self.weights, other.weights))

    def __repr__(self) -> str:
        return f"SparseVector(nnz={self.nnz})"


def _real_count(padding_mask: np.ndarray, length: int) -> int:
    mask = np.asarray(padding_mask, dtype=bool)
    if mask.shape != (length,):
        raise ShapeError(f"padding mask of shape {mask.shape} does not match {length} positions")
    n_real = int(mask.sum())
    if n_real == 0:
        raise ContractError("all positions are padding; nothing to pool")
    return n_real


def dense_pool(h_t: Tensor, padding_mask) -> DenseVector:
    """Mean over the real (non-padding) columns of a dim x len encoding."""
    if h_t.data.ndim != 2:
        raise ShapeError(f"dense_pool expects a 2-d encoding, got shape {h_t.data.shape}")
    d, length = h_t.data.shape
    mask = np.asarray(padding_mask, dtype=bool)
    n_real = _real_count(mask, length)
    masked = ad.mul(h_t, ad.constant(np.broadcast_to(mask, (d, length)).astype(np.float64)))
    return DenseVector(ad.scale(ad.sum_axis(masked, axis=1), 1.0 / n_real))


def sparse_project(h_t: Tensor, embedding: Tensor, padding_mask) -> tuple[Tensor, SparseVector]:
    """log(1 + relu(max over real positions of E^T . H)) in vocabulary space.

    Returns the dense vocabulary-sized activation (differentiable) and its
    nonzero entries as a SparseVector.
    """
    if h_t.data.ndim != 2 or embedding.data.ndim != 2:
        raise ShapeError("sparse_project expects 2-d encodings")
    if embedding.data.shape[0] != h_t.data.shape[0]:
        raise ShapeError(f"embedding {embedding.data.shape} does not match encoding {h_t.data.shape}")
    length = h_t.data.shape[1]
    mask = np.asarray(padding_mask, dtype=bool)
    _real_count(mask, length)
    scores = ad.matmul(ad.transpose(embedding), h_t)  # (V, L)
    if not mask.all():
        # -inf at padding columns removes them from the max
        vocab = embedding.data.shape[1]
        bias = np.where(mask, 0.0, -np.inf)
        scores = ad.add(scores, ad.constant(np.broadcast_to(bias, (vocab, length)).copy()))
    activation = ad.log1p(ad.relu(ad.max_axis(scores, axis=1)))
    return activation, SparseVector.from_dense(activation.data)


def flop_penalty(batch_activations: Tensor, lam: float) -> Tensor:
    """lam * sum_v (mean over the batch of activation[., v])^2."""
    if batch_activations.data.ndim != 2 or batch_activations.data.shape[0] < 1:
        raise ShapeError(f"flop_penalty expects a batch x vocab tensor, got {batch_activations.data.shape}")
    if (batch_activations.data < 0).any():
        raise ContractError("flop_penalty requires non-negative activations")
    if not math.isfinite(lam) or lam < 0:
        raise ContractError(f"flop coefficient must be finite and >= 0, got {lam}")
    mean = ad.mean_axis(batch_activations, axis=0)
    return ad.scale(ad.sum_axis(ad.mul(mean, mean), axis=0), lam)


def relevance_score(q, d):
    """Dot product between two representations of the same kind.

    Dense x dense returns a differentiable scalar Tensor; sparse x sparse
    returns a plain float computed over the intersecting term ids.
    """
    if isinstance(q, DenseVector) and isinstance(d, DenseVector):
        if q.dim != d.dim:
            raise ShapeError(f"dense dimensions differ: {q.dim} vs {d.dim}")
        return ad.sum_axis(ad.mul(q.values, d.values), axis=0)
    if isinstance(q, SparseVector) and isinstance(d, SparseVector):
        return sparse_dot(q, d)
    raise ContractError(f"cannot score mixed representation kinds: {type(q).__name__} vs {type(d).__name__}")


def sparse_dot(q: SparseVector, d: SparseVector) -> float:
    common, qi, di = np.intersect1d(q.term_ids, d.term_ids,
                                    assume_unique=True, return_indices=True)
    if common.size == 0:
        return 0.0
    return float(np.dot(q.weights[qi], d.weights[di]))


# ---------------------------------------------------------------------------
# text exchange formats


def _check_doc_id(doc_id: str) -> str:
    if not doc_id or any(c.isspace() for c in doc_id):
        raise InputError(f"doc id must be non-empty and whitespace-free: {doc_id!r}")
    return doc_id


def write_sparse_vectors(path, items: Iterable[tuple[str, SparseVector]]) -> None:
    """One record per line: doc_id <TAB> term:weight ... (6 significant digits)."""
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, vec in items:
            entries = " ".join(f"{t}:{w:.6g}" for t, w in vec.items())
            f.write(f"{_check_doc_id(doc_id)}\t{entries}\n")


def read_sparse_vectors(path) -> list[tuple[str, SparseVector]]:
    out: list[tuple[str, SparseVector]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, rest = line.partition("\t")
            if not doc_id:
                raise ParseError("missing doc id", line_no)
            term_ids: list[int] = []
            weights: list[float] = []
            for part in rest.split():
                term_s, _, weight_s = part.partition(":")
                try:
                    term_ids.append(int(term_s))
                    weights.append(float(weight_s))
                except ValueError as exc:
                    raise ParseError(f"bad sparse entry {part!r}", line_no) from exc
            try:
                out.append((doc_id, SparseVector(term_ids, weights)))
            except InputError as exc:
                raise ParseError(str(exc), line_no) from exc
    return out


def write_dense_vectors(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    """One record per line: doc_id <TAB> v1 v2 ... vD (round-trip exact)."""
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, values in items:
            rendered = " ".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64))
            f.write(f"{_check_doc_id(doc_id)}\t{rendered}\n")


def read_dense_vectors(path) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, rest = line.partition("\t")
            if not doc_id or not rest:
                raise ParseError("expected doc_id <TAB> values", line_no)
            try:
                values = np.array([float(v) for v in rest.split()], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"bad dense value: {exc}", line_no) from exc
            out.append((doc_id, values))
    return out
