"""TREC-style evaluation: MRR@k, nDCG@k, run/qrels I/O, paired t-test.

nDCG uses the exponential gain (2^grade - 1) by default, with a linear-gain
switch for cross-checking. The t-test p-value comes from the regularized
incomplete beta function, implemented here via the standard continued
fraction so that external statistics packages stay available as independent
test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ContractError, InputError, ParseError


@dataclass
class Qrels:
    """(query_id, doc_id) -> integer relevance grade >= 0."""

    grades: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        by_doc = self.grades.setdefault(query_id, {})
        if doc_id in by_doc:
            raise InputError(f"duplicate qrels pair ({query_id}, {doc_id})")
        if grade < 0:
            raise InputError(f"negative grade for ({query_id}, {doc_id})")
        by_doc[doc_id] = int(grade)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get(query_id, {}).get(doc_id, 0)

    def query_ids(self) -> list[str]:
        return sorted(self.grades)


@dataclass
class Run:
    """query_id -> ranked (doc_id, score) list, scores non-increasing."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    tag: str = "retlab"

    def add_ranking(self, query_id: str, ranked: Sequence[tuple[str, float]]) -> None:
        if query_id in self.rankings:
            raise InputError(f"duplicate ranking for query {query_id}")
        seen = set()
        prev = math.inf
        for doc_id, score in ranked:
            if doc_id in seen:
                raise InputError(f"duplicate doc {doc_id} for query {query_id}")
            seen.add(doc_id)
            if score > prev:
                raise InputError(f"scores must be non-increasing for query {query_id}")
            prev = score
        self.rankings[query_id] = [(d, float(s)) for d, s in ranked]


@dataclass
class MetricReport:
    metric: str
    cutoff: int
    per_query: dict[str, float]
    mean: float
    flagged: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"{qid}\t{value!r}" for qid, value in self.per_query.items()]
        lines.append(f"all\t{self.mean!r}")
        return "\n".join(lines) + "\n"


def _macro_mean(values: dict[str, float]) -> float:
    return sum(values.values()) / len(values) if values else 0.0


def mrr_at_k(run: Run, qrels: Qrels, k: int) -> MetricReport:
    """Reciprocal rank of the first grade>=1 document within the top k."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    flagged: list[str] = []
    for qid in qrels.query_ids():
        ranked = run.rankings.get(qid)
        if ranked is None:
            per_query[qid] = 0.0
            flagged.append(f"query {qid} missing from run; scored 0")
            continue
        value = 0.0
        for rank, (doc_id, _) in enumerate(ranked[:k], start=1):
            if qrels.grade(qid, doc_id) >= 1:
                value = 1.0 / rank
                break
        per_query[qid] = value
    return MetricReport("mrr", k, per_query, _macro_mean(per_query), flagged)


def _gain(grade: int, exponential: bool) -> float:
    return float(2**grade - 1) if exponential else float(grade)


def ndcg_at_k(run: Run, qrels: Qrels, k: int, exponential_gain: bool = True) -> MetricReport:
    """DCG with gain/log2(rank+1) discounting, normalized by the ideal ranking.

    Queries whose ideal DCG is zero are excluded from the average and flagged.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    flagged: list[str] = []
    for qid in qrels.query_ids():
        grades = qrels.grades[qid]
        ideal = sorted(grades.values(), reverse=True)[:k]
        idcg = sum(_gain(g, exponential_gain) / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
        if idcg == 0.0:
            flagged.append(f"query {qid} has no positive grades; excluded from nDCG")
            continue
        ranked = run.rankings.get(qid)
        if ranked is None:
            per_query[qid] = 0.0
            flagged.append(f"query {qid} missing from run; scored 0")
            continue
        dcg = sum(_gain(qrels.grade(qid, doc_id), exponential_gain) / math.log2(rank + 1)
                  for rank, (doc_id, _) in enumerate(ranked[:k], start=1))
        per_query[qid] = dcg / idcg
    return MetricReport("ndcg", k, per_query, _macro_mean(per_query), flagged)


# ---------------------------------------------------------------------------
# paired significance testing


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    alpha_adjusted: float
    significant: bool


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ContractError("incomplete beta requires a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def paired_t_test(per_query_a: Sequence[float], per_query_b: Sequence[float],
                  num_comparisons: int, alpha: float = 0.01) -> TTestResult:
    """Two-sided paired t-test with a Bonferroni-adjusted threshold.

    Significance is declared when p < alpha / num_comparisons. Zero-variance
    differences degenerate exactly: all-zero -> (t=0, p=1); constant nonzero
    -> (t=+-inf, p=0, significant).
    """
    a = [float(v) for v in per_query_a]
    b = [float(v) for v in per_query_b]
    if len(a) != len(b):
        raise ContractError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ContractError("paired t-test needs at least two pairs")
    if num_comparisons < 1:
        raise ContractError("number of comparisons must be >= 1")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    adjusted = alpha / num_comparisons
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, alpha_adjusted=adjusted, significant=False)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p=0.0, alpha_adjusted=adjusted, significant=True)
    t = mean / math.sqrt(var / n)
    dof = n - 1
    p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(t=t, p=p, alpha_adjusted=adjusted, significant=p < adjusted)


# ---------------------------------------------------------------------------
# TREC exchange formats


def write_run(path, run: Run) -> None:
    """`query_id Q0 doc_id rank score tag`, queries sorted, ranks from 1."""
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run.rankings):
            for rank, (doc_id, score) in enumerate(run.rankings[qid], start=1):
                f.write(f"{qid} Q0 {doc_id} {rank} {score!r} {run.tag}\n")


def read_run(path) -> Run:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    tag = None
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"expected 6 fields, got {len(parts)}", line_no)
            qid, q0, doc_id, rank_s, score_s, line_tag = parts
            if q0 != "Q0":
                raise ParseError(f"expected literal Q0, got {q0!r}", line_no)
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise ParseError(f"bad rank/score: {exc}", line_no) from exc
            if tag is None:
                tag = line_tag
            entries = rows.setdefault(qid, [])
            if any(d == doc_id for _, d, _ in entries):
                raise ParseError(f"duplicate document {doc_id} for query {qid}", line_no)
            entries.append((rank, doc_id, score))
    run = Run(tag=tag if tag is not None else "retlab")
    for qid, entries in rows.items():
        entries.sort()
        ranks = [r for r, _, _ in entries]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ParseError(f"ranks for query {qid} are not contiguous from 1: {ranks}")
        try:
            run.add_ranking(qid, [(d, s) for _, d, s in entries])
        except InputError as exc:
            raise ParseError(str(exc)) from exc
    return run


def write_qrels(path, qrels: Qrels) -> None:
    """`query_id 0 doc_id grade`, queries and docs sorted."""
    with open(path, "w", encoding="utf-8") as f:
        for qid in qrels.query_ids():
            for doc_id in sorted(qrels.grades[qid]):
                f.write(f"{qid} 0 {doc_id} {qrels.grades[qid][doc_id]}\n")


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line_no)
            qid, _, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError as exc:
                raise ParseError(f"bad grade {grade_s!r}", line_no) from exc
            try:
                qrels.add(qid, doc_id, grade)
            except InputError as exc:
                raise ParseError(str(exc), line_no) from exc
    return qrels
