"""Planted-relevance synthetic data for end-to-end checks.

Documents are random strings of distinct terms; each query is a token
subset of one source document, which the qrels mark as its grade-1
relevant. Distinct terms keep the lexical overlap oracle exactly
representable by single-vector scores.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .evaluation import Qrels, write_qrels


def read_corpus(path) -> dict[str, str]:
    """JSONL records with id/text fields, or `id <TAB> text` as a fallback."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.lstrip().startswith("{"):
                try:
                    record = json.loads(line)
                    doc_id, text = str(record["id"]), str(record["text"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ParseError(f"bad JSON record: {exc}", line_no) from exc
            else:
                doc_id, sep, text = line.partition("\t")
                if not sep:
                    raise ParseError("expected JSON record or id <TAB> text", line_no)
            if not text:
                raise ParseError(f"empty text for id {doc_id!r}", line_no)
            if doc_id in out:
                raise ParseError(f"duplicate id {doc_id!r}", line_no)
            out[doc_id] = text
    if not out:
        raise InputError(f"no records in {path}")
    return out


def write_corpus(path, records: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id in records:
            f.write(json.dumps({"id": doc_id, "text": records[doc_id]}) + "\n")


@dataclass(frozen=True)
class SyntheticPaths:
    corpus: str
    queries_train: str
    queries_heldout: str
    qrels_train: str
    qrels_heldout: str


def make_synthetic(out_dir, vocab_size: int, docs: int, doc_len: int, query_len: int,
                   train_queries: int, heldout_queries: int, seed: int) -> SyntheticPaths:
    if vocab_size < doc_len:
        raise ConfigError("vocab_size must be >= doc_len (documents use distinct terms)")
    if query_len < 1 or query_len > doc_len:
        raise ConfigError("query_len must be in [1, doc_len]")
    if docs < 2 or train_queries < 1 or heldout_queries < 1:
        raise ConfigError("need at least 2 docs and 1 query per split")
    rng = np.random.default_rng(seed)
    terms = [f"w{i:04d}" for i in range(vocab_size)]

    corpus: dict[str, str] = {}
    doc_tokens: dict[str, list[str]] = {}
    for i in range(docs):
        doc_id = f"d{i:05d}"
        chosen = rng.choice(vocab_size, size=doc_len, replace=False)
        tokens = [terms[int(t)] for t in chosen]
        corpus[doc_id] = " ".join(tokens)
        doc_tokens[doc_id] = tokens

    doc_ids = list(corpus)

    def make_split(prefix: str, count: int) -> tuple[dict[str, str], Qrels]:
        queries: dict[str, str] = {}
        qrels = Qrels()
        for j in range(count):
            qid = f"{prefix}{j:05d}"
            source = doc_ids[int(rng.integers(0, docs))]
            picked = rng.choice(doc_len, size=query_len, replace=False)
            queries[qid] = " ".join(doc_tokens[source][int(p)] for p in picked)
            qrels.add(qid, source, 1)
        return queries, qrels

    train_q, train_qrels = make_split("qtrain", train_queries)
    heldout_q, heldout_qrels = make_split("qheld", heldout_queries)

    os.makedirs(out_dir, exist_ok=True)
    paths = SyntheticPaths(
        corpus=os.path.join(out_dir, "corpus.jsonl"),
        queries_train=os.path.join(out_dir, "queries_train.jsonl"),
        queries_heldout=os.path.join(out_dir, "queries_heldout.jsonl"),
        qrels_train=os.path.join(out_dir, "qrels_train.txt"),
        qrels_heldout=os.path.join(out_dir, "qrels_heldout.txt"),
    )
    write_corpus(paths.corpus, corpus)
    write_corpus(paths.queries_train, train_q)
    write_corpus(paths.queries_heldout, heldout_q)
    write_qrels(paths.qrels_train, train_qrels)
    write_qrels(paths.qrels_heldout, heldout_qrels)
    return paths
