"""Fine-tuning losses and teacher-score sources.

Three objectives: contrastive softmax cross-entropy over one positive and N
negatives, pairwise margin MSE against teacher margins, and a listwise KL
divergence between the teacher and student score distributions. Teacher
scores are always constants: no gradient flows into them.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError, NumericError, ParseError
from .vocab import tokenize


@dataclass(frozen=True)
class TrainingGroup:
    """One query with its positive, N negatives, and optional teacher scores."""

    query_id: str
    positive: str
    negatives: tuple[str, ...]
    teacher_scores: Mapping[str, float] | None = None

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ContractError(f"group {self.query_id}: at least one negative required")
        if len(set(self.negatives)) != len(self.negatives):
            raise ContractError(f"group {self.query_id}: duplicate negatives")
        if self.positive in self.negatives:
            raise ContractError(f"group {self.query_id}: positive {self.positive} listed as negative")
        if self.teacher_scores is not None:
            missing = [d for d in (self.positive, *self.negatives) if d not in self.teacher_scores]
            if missing:
                raise ContractError(f"group {self.query_id}: teacher scores missing for {missing}")

    @property
    def num_negatives(self) -> int:
        return len(self.negatives)


def cl_loss(s_pos: Tensor, s_negs: Sequence[Tensor]) -> Tensor:
    """-log softmax probability of the positive, via logsumexp."""
    if not s_negs:
        raise ContractError("contrastive loss requires at least one negative score")
    scores = ad.stack_scalars([s_pos, *s_negs])
    return ad.sub(ad.logsumexp(scores), s_pos)


def margin_mse_loss(s_pos: Tensor, s_neg: Tensor, t_pos: float, t_neg: float) -> Tensor:
    """((s_pos - s_neg) - (t_pos - t_neg))^2 with the teacher margin fixed."""
    t_margin = float(t_pos) - float(t_neg)
    if not math.isfinite(t_margin):
        raise NumericError("teacher scores must be finite")
    diff = ad.sub(ad.sub(s_pos, s_neg), ad.constant(t_margin))
    return ad.mul(diff, diff)


def kl_div_loss(student_scores: Sequence[Tensor], teacher_scores: Sequence[float],
                temperature: float = 1.0) -> Tensor:
    """KL(softmax(teacher / temperature) || softmax(student)).

    The teacher distribution is a constant; shifting either score list by a
    constant leaves the loss unchanged.
    """
    if len(student_scores) != len(teacher_scores):
        raise ContractError(f"score lists differ in length: {len(student_scores)} vs {len(teacher_scores)}")
    if len(student_scores) < 2:
        raise ContractError("KL divergence needs at least two scores")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    t = np.asarray(teacher_scores, dtype=np.float64) / temperature
    if not np.isfinite(t).all():
        raise NumericError("teacher scores must be finite")
    t = t - t.max()
    p = np.exp(t)
    p /= p.sum()
    entropy_term = float(np.dot(p, np.log(p)))  # sum p log p (negative entropy)
    s = ad.stack_scalars(list(student_scores))
    cross = ad.sum_axis(ad.mul(s, ad.constant(p)), axis=0)
    return ad.add(ad.sub(ad.constant(entropy_term), cross), ad.logsumexp(s))


def combined_loss(cl: Tensor | float, kd: Tensor | float) -> Tensor:
    """0.5 * (cl + kd)."""
    cl_t = cl if isinstance(cl, Tensor) else ad.constant(float(cl))
    kd_t = kd if isinstance(kd, Tensor) else ad.constant(float(kd))
    return ad.scale(ad.add(cl_t, kd_t), 0.5)


def oracle_teacher_score(query_text: str, doc_text: str, scale: float = 10.0) -> float:
    """Deterministic lexical stand-in for a cross-encoder teacher.

    |token-multiset intersection| / sqrt(|q| * |d|), scaled to teacher-like
    logit magnitudes.
    """
    q = tokenize(query_text)
    d = tokenize(doc_text)
    if not q or not d:
        raise InputError("oracle teacher requires non-empty texts")
    overlap = sum((Counter(q) & Counter(d)).values())
    return scale * overlap / math.sqrt(len(q) * len(d))


class TeacherSource:
    """Lookup of teacher scores by (query_id, doc_id); misses are hard errors."""

    def score(self, query_id: str, doc_id: str) -> float:
        raise NotImplementedError

    def scores_for(self, query_id: str, doc_ids: Sequence[str]) -> dict[str, float]:
        return {d: self.score(query_id, d) for d in doc_ids}


class FileTeacher(TeacherSource):
    """Scores loaded from a `query_id <TAB> doc_id <TAB> score` file."""

    def __init__(self, scores: dict[tuple[str, str], float]):
        self._scores = scores

    @classmethod
    def load(cls, path) -> "FileTeacher":
        scores: dict[tuple[str, str], float] = {}
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(f"expected query_id <TAB> doc_id <TAB> score, got {line!r}", line_no)
                qid, did, score_s = parts
                try:
                    score = float(score_s)
                except ValueError as exc:
                    raise ParseError(f"bad score {score_s!r}", line_no) from exc
                if not math.isfinite(score):
                    raise ParseError(f"non-finite score {score_s!r}", line_no)
                key = (qid, did)
                if key in scores:
                    raise ParseError(f"duplicate teacher score for {key}", line_no)
                scores[key] = score
        return cls(scores)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for (qid, did), score in sorted(self._scores.items()):
                f.write(f"{qid}\t{did}\t{score!r}\n")

    def score(self, query_id: str, doc_id: str) -> float:
        try:
            return self._scores[(query_id, doc_id)]
        except KeyError:
            raise InputError(f"no teacher score for query {query_id!r}, doc {doc_id!r}") from None


@dataclass
class OracleTeacher(TeacherSource):
    """Computes the lexical oracle score from query and document texts."""

    queries: Mapping[str, str]
    docs: Mapping[str, str]
    scale: float = 10.0
    _cache: dict[tuple[str, str], float] = field(default_factory=dict, repr=False)

    def score(self, query_id: str, doc_id: str) -> float:
        key = (query_id, doc_id)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if query_id not in self.queries:
            raise InputError(f"unknown query id {query_id!r} for oracle teacher")
        if doc_id not in self.docs:
            raise InputError(f"unknown doc id {doc_id!r} for oracle teacher")
        value = oracle_teacher_score(self.queries[query_id], self.docs[doc_id], self.scale)
        self._cache[key] = value
        return value
