"""Command-line pipelines: pretrain, finetune, encode-index, search, evaluate,
make-synthetic.

Configuration is a flat `key = value` text file; every key can also be given
as a flag, and flags win. All randomness flows from one seed, with per-stage
sub-seeds derived by stable hashing. Commands validate their inputs before
touching outputs, and every output is written atomically.

Exit codes: 0 success, 2 usage/config/input error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import io
import sys

import numpy as np

from .encoder import EncoderConfig, EncoderModel, TokenSequence, encode_sequence, inference_mode
from .errors import ConfigError, InputError, ParseError, RetlabError
from .evaluation import Run, mrr_at_k, ndcg_at_k, paired_t_test, read_qrels, read_run, write_run
from .index import DenseStore, InvertedIndex
from .objectives import FileTeacher, OracleTeacher, TeacherSource
from .represent import INDEX_PRUNE_THRESHOLD, SparseVector, dense_pool, sparse_project
from .synthetic import make_synthetic, read_corpus
from .trainer import PARADIGMS, PretrainData, TrainConfig, build_finetune_data, \
    load_checkpoint, train
from .util import atomic_write_bytes, atomic_write_text, derive_seed, sha256_file
from .vocab import Vocabulary, build_vocabulary

RUN_TAG_PREFIX = "lion"

# key -> (type, default, help); the single source of truth for config files
# and the mirrored CLI flags.
CONFIG_SCHEMA: dict[str, tuple] = {
    "corpus": (str, None, "corpus file (JSONL id/text or id<TAB>text)"),
    "queries": (str, None, "queries file, same format as the corpus"),
    "qrels": (str, None, "TREC qrels file"),
    "negatives": (str, None, "explicit negatives file (query_id<TAB>doc_id)"),
    "teacher_scores": (str, None, "teacher score file (query_id<TAB>doc_id<TAB>score)"),
    "vocab": (str, None, "vocabulary file (one token per line)"),
    "checkpoint": (str, None, "checkpoint output path"),
    "init_checkpoint": (str, None, "checkpoint to continue from"),
    "index": (str, None, "sparse index / dense store path"),
    "run": (str, None, "TREC run file path"),
    "train_log": (str, None, "JSONL training log path"),
    "seed": (int, 0, "master seed; per-stage sub-seeds are derived from it"),
    "paradigm": (str, "sparse", "retrieval paradigm: sparse or dense"),
    "dim": (int, 64, "encoder width"),
    "layers": (int, 2, "encoder depth (0 allowed)"),
    "heads": (int, 2, "attention heads"),
    "attention_mode": (str, "bidirectional", "causal or bidirectional"),
    "vocab_max_terms": (int, 4096, "vocabulary size cap when building the vocab"),
    "k": (int, 10, "retrieval cutoff"),
    "metric": (str, "mrr", "evaluation metric: mrr or ndcg"),
    "objective": (str, "cl", "cl, kd_margin_mse, cl_plus_kd, or mntp"),
    "epochs": (int, 1, "training epochs"),
    "batch_size": (int, 8, "groups (or sequences) per micro-batch"),
    "grad_accum_steps": (int, 1, "micro-batches per optimizer update"),
    "num_negatives": (int, 16, "negatives per group"),
    "learning_rate": (float, 1e-4, "Adam learning rate"),
    "flop_lambda_query": (float, 0.05, "FLOP coefficient for query vectors"),
    "flop_lambda_doc": (float, 0.04, "FLOP coefficient for document vectors"),
    "mask_rate": (float, 0.2, "MNTP masking probability"),
    "max_query_len": (int, 64, "query truncation length in tokens"),
    "max_doc_len": (int, 128, "document truncation length in tokens"),
    "max_steps": (int, 0, "cap on training steps (0 = all epochs)"),
    "warmup_frac": (float, 0.04, "fraction of updates spent in linear warmup"),
    "kl_temperature": (float, 1.0, "softmax temperature for the KL teacher distribution"),
    "bert_style_masking": (bool, False, "use the 80/10/10 corruption split for MNTP"),
    "oracle_teacher": (bool, False, "use the synthetic lexical teacher instead of a score file"),
    "teacher_scale": (float, 10.0, "scale of the synthetic teacher scores"),
    "checkpoint_every": (int, 0, "write a checkpoint every N steps (0 = final only)"),
}

_TRAIN_KEYS = ("objective", "epochs", "batch_size", "grad_accum_steps", "num_negatives",
               "learning_rate", "flop_lambda_query", "flop_lambda_doc", "mask_rate",
               "max_query_len", "max_doc_len", "max_steps", "warmup_frac",
               "kl_temperature", "bert_style_masking")


def _coerce(key: str, raw: str):
    typ = CONFIG_SCHEMA[key][0]
    if typ is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def load_config_file(path) -> dict:
    """Flat `key = value` lines; blank lines and # comments are ignored."""
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, raw = stripped.partition("=")
            if not sep:
                raise ParseError(f"expected key = value, got {stripped!r}", line_no)
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r} (line {line_no})")
            values[key] = _coerce(key, raw.strip())
    return values


class Settings:
    """Defaults < config file < command-line flags."""

    def __init__(self, args: argparse.Namespace):
        self.values = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}
        if getattr(args, "config", None):
            _require_file(args.config, "config")
            self.values.update(load_config_file(args.config))
        for key in CONFIG_SCHEMA:
            flag = getattr(args, key.replace("-", "_"), None)
            if flag is not None:
                self.values[key] = flag

    def __getitem__(self, key: str):
        return self.values[key]

    def require_path(self, key: str) -> str:
        path = self.values.get(key)
        if not path:
            raise ConfigError(f"required setting {key!r} is missing; pass --{key} or set it in the config file")
        _require_file(path, key)
        return path

    def output_path(self, key: str) -> str:
        path = self.values.get(key)
        if not path:
            raise ConfigError(f"required output setting {key!r} is missing")
        return path

    def train_config(self, stage: str) -> TrainConfig:
        kwargs = {key: self.values[key] for key in _TRAIN_KEYS}
        cfg = TrainConfig(seed=derive_seed(self.values["seed"], stage), **kwargs)
        cfg.validate()
        return cfg


def _require_file(path, label: str) -> None:
    import os

    if not os.path.exists(path):
        raise InputError(f"{label} path does not exist: {path}")


def _load_vocab_or_build(settings: Settings, corpus: dict[str, str]) -> Vocabulary:
    import os

    path = settings.values.get("vocab")
    if not path:
        raise ConfigError("required setting 'vocab' is missing")
    if os.path.exists(path):
        return Vocabulary.load(path)
    vocab = build_vocabulary(corpus.values(), settings["vocab_max_terms"])
    buf = io.StringIO()
    for tok in vocab.id_to_token:
        buf.write(tok + "\n")
    atomic_write_text(path, buf.getvalue())
    print(f"built vocabulary with {vocab.size} entries -> {path}")
    return vocab


def _fresh_model(settings: Settings, vocab: Vocabulary) -> EncoderModel:
    config = EncoderConfig(
        dim=settings["dim"], layers=settings["layers"], heads=settings["heads"],
        vocab_size=vocab.size,
        max_len=max(settings["max_query_len"], settings["max_doc_len"]),
        attention_mode=settings["attention_mode"])
    return EncoderModel(config, seed=derive_seed(settings["seed"], "init"))


def _read_negatives(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            qid, sep, did = line.partition("\t")
            if not sep or not did:
                raise ParseError("expected query_id <TAB> doc_id", line_no)
            out.setdefault(qid, []).append(did)
    return out


def _teacher_for(settings: Settings, queries: dict[str, str],
                 docs: dict[str, str]) -> TeacherSource | None:
    objective = settings["objective"]
    if objective not in ("kd_margin_mse", "cl_plus_kd"):
        return None
    if settings["oracle_teacher"]:
        return OracleTeacher(queries, docs, scale=settings["teacher_scale"])
    path = settings.values.get("teacher_scores")
    if not path:
        raise ConfigError(f"objective {objective} needs teacher scores: "
                          "set teacher_scores or oracle_teacher = true")
    _require_file(path, "teacher_scores")
    return FileTeacher.load(path)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(settings: Settings) -> int:
    corpus = read_corpus(settings.require_path("corpus"))
    vocab = _load_vocab_or_build(settings, corpus)
    out_path = settings.output_path("checkpoint")
    model = _fresh_model(settings, vocab)
    if model.config.attention_mode != "bidirectional":
        raise ConfigError("MNTP pretraining requires attention_mode = bidirectional")

    max_doc_len = settings["max_doc_len"]
    sequences = []
    skipped = 0
    for doc_id in sorted(corpus):
        seq = TokenSequence.from_text(vocab, corpus[doc_id], max_doc_len)
        if seq.n_real < 2:
            skipped += 1
            continue
        sequences.append(seq)
    if skipped:
        print(f"skipped {skipped} single-token documents (nothing to mask)", file=sys.stderr)

    cfg = settings.train_config("pretrain")
    cfg.objective = "mntp"
    result = train(model, PretrainData(sequences), cfg, vocab, paradigm="sparse",
                   checkpoint_path=out_path, log_path=settings.values.get("train_log"),
                   vocab_hash=vocab.sha256(), checkpoint_every=settings["checkpoint_every"])
    print(f"mntp initial loss {result.initial_loss:.4f} final loss {result.final_loss:.4f} "
          f"({result.steps} steps)")
    print(f"checkpoint -> {out_path}")
    return 0


def cmd_finetune(settings: Settings) -> int:
    corpus = read_corpus(settings.require_path("corpus"))
    queries = read_corpus(settings.require_path("queries"))
    qrels = read_qrels(settings.require_path("qrels"))
    out_path = settings.output_path("checkpoint")

    negatives = None
    if settings.values.get("negatives"):
        negatives = _read_negatives(settings.require_path("negatives"))
    teacher = _teacher_for(settings, queries, corpus)

    init_path = settings.values.get("init_checkpoint")
    if init_path:
        _require_file(init_path, "init_checkpoint")
        ckpt = load_checkpoint(init_path)
        model = ckpt.model
        vocab = Vocabulary.load(settings.require_path("vocab"))
        if ckpt.vocab_hash and ckpt.vocab_hash != vocab.sha256():
            raise InputError("vocabulary hash mismatch between init checkpoint and vocab file")
    else:
        vocab = _load_vocab_or_build(settings, corpus)
        model = _fresh_model(settings, vocab)

    cfg = settings.train_config("finetune")
    if cfg.objective == "mntp":
        raise ConfigError("finetune objectives are cl, kd_margin_mse, or cl_plus_kd")
    data = build_finetune_data(qrels.grades, queries, corpus, negatives)
    result = train(model, data, cfg, vocab, paradigm=settings["paradigm"], teacher=teacher,
                   checkpoint_path=out_path, log_path=settings.values.get("train_log"),
                   vocab_hash=vocab.sha256(), checkpoint_every=settings["checkpoint_every"])
    print(f"{cfg.objective} initial loss {result.initial_loss:.4f} "
          f"final loss {result.final_loss:.4f} ({result.steps} steps)")
    print(f"checkpoint -> {out_path}")
    return 0


def _encode_corpus(model: EncoderModel, vocab: Vocabulary, corpus: dict[str, str],
                   paradigm: str, max_doc_len: int):
    """Encode every document without gradient tracking; deterministic order."""
    sparse_items: list[tuple[str, SparseVector]] = []
    dense_items: list[tuple[str, np.ndarray]] = []
    with inference_mode(model):
        for doc_id in sorted(corpus):
            seq = TokenSequence.from_text(vocab, corpus[doc_id], max_doc_len)
            h = encode_sequence(model, seq)
            if paradigm == "sparse":
                activation, _ = sparse_project(h, model.embedding, seq.padding_mask)
                sparse_items.append(
                    (doc_id, SparseVector.from_dense(activation.data, INDEX_PRUNE_THRESHOLD)))
            else:
                dense_items.append((doc_id, dense_pool(h, seq.padding_mask).numpy().copy()))
    return sparse_items, dense_items


def cmd_encode_index(settings: Settings) -> int:
    corpus = read_corpus(settings.require_path("corpus"))
    ckpt_path = settings.require_path("checkpoint")
    out_path = settings.output_path("index")
    paradigm = settings["paradigm"]
    if paradigm not in PARADIGMS:
        raise ConfigError(f"paradigm must be one of {PARADIGMS}")
    vocab = Vocabulary.load(settings.require_path("vocab"))
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.vocab_hash and ckpt.vocab_hash != vocab.sha256():
        raise InputError("vocabulary hash mismatch between checkpoint and vocab file")
    if ckpt.model.config.vocab_size != vocab.size:
        raise InputError(f"checkpoint vocab size {ckpt.model.config.vocab_size} "
                         f"does not match vocabulary {vocab.size}")

    sparse_items, dense_items = _encode_corpus(ckpt.model, vocab, corpus, paradigm,
                                               settings["max_doc_len"])
    if paradigm == "sparse":
        idx = InvertedIndex.build(sparse_items, vocab_hash=vocab.sha256())
        atomic_write_bytes(out_path, idx.to_bytes())
        s = idx.stats()
        print(f"sparse index: docs={s.docs} terms={s.terms} postings={s.postings} "
              f"mean_nonzeros={s.mean_nonzeros:.2f}")
    else:
        store = DenseStore.from_items(dense_items)
        buf = io.StringIO()
        for doc_id, values in zip(store.doc_ids, store.matrix):
            rendered = " ".join(repr(float(v)) for v in values)
            buf.write(f"{doc_id}\t{rendered}\n")
        atomic_write_text(out_path, buf.getvalue())
        print(f"dense store: docs={len(store.doc_ids)} dim={store.dim}")
    print(f"index -> {out_path}")
    return 0


def cmd_search(settings: Settings) -> int:
    queries = read_corpus(settings.require_path("queries"))
    ckpt_path = settings.require_path("checkpoint")
    index_path = settings.require_path("index")
    out_path = settings.output_path("run")
    paradigm = settings["paradigm"]
    k = settings["k"]
    if k < 1:
        raise ConfigError("k must be >= 1")
    vocab = Vocabulary.load(settings.require_path("vocab"))
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.vocab_hash and ckpt.vocab_hash != vocab.sha256():
        raise InputError("vocabulary hash mismatch between checkpoint and vocab file")

    model = ckpt.model
    tag = f"{RUN_TAG_PREFIX}-{paradigm}-{model.config.dim}"
    run = Run(tag=tag)
    max_query_len = settings["max_query_len"]

    if paradigm == "sparse":
        index = InvertedIndex.load(index_path)
        if index.vocab_hash and index.vocab_hash != vocab.sha256():
            raise InputError("vocabulary hash mismatch between checkpoint and index")
        with inference_mode(model):
            for qid in sorted(queries):
                seq = TokenSequence.from_text(vocab, queries[qid], max_query_len)
                h = encode_sequence(model, seq)
                activation, qvec = sparse_project(h, model.embedding, seq.padding_mask)
                ranked = index.search(qvec, k)
                if not ranked:
                    print(f"warning: query {qid} matched no documents", file=sys.stderr)
                    continue
                run.add_ranking(qid, ranked)
    else:
        store = DenseStore.load(index_path)
        if store.dim != model.config.dim:
            raise InputError(f"dense store dimension {store.dim} does not match "
                             f"checkpoint dimension {model.config.dim}")
        with inference_mode(model):
            for qid in sorted(queries):
                seq = TokenSequence.from_text(vocab, queries[qid], max_query_len)
                h = encode_sequence(model, seq)
                qvec = dense_pool(h, seq.padding_mask).numpy()
                run.add_ranking(qid, store.search(qvec, k))

    buf = io.StringIO()
    for qid in sorted(run.rankings):
        for rank, (doc_id, score) in enumerate(run.rankings[qid], start=1):
            buf.write(f"{qid} Q0 {doc_id} {rank} {score!r} {run.tag}\n")
    atomic_write_text(out_path, buf.getvalue())
    print(f"run ({tag}) -> {out_path}")
    return 0


def cmd_evaluate(settings: Settings, run_b_path: str | None,
                 num_comparisons: int | None, report_path: str | None) -> int:
    run = read_run(settings.require_path("run"))
    qrels = read_qrels(settings.require_path("qrels"))
    metric = settings["metric"]
    k = settings["k"]
    if metric not in ("mrr", "ndcg"):
        raise ConfigError(f"unknown metric {metric!r}: expected mrr or ndcg")
    evaluate = mrr_at_k if metric == "mrr" else ndcg_at_k

    report = evaluate(run, qrels, k)
    for warning in report.flagged:
        print(f"warning: {warning}", file=sys.stderr)
    rendered = report.render()
    sys.stdout.write(rendered)
    if report_path:
        atomic_write_text(report_path, rendered)

    if run_b_path is not None:
        if num_comparisons is None:
            raise ConfigError("--num-comparisons is required with --run-b")
        _require_file(run_b_path, "run_b")
        report_b = evaluate(read_run(run_b_path), qrels, k)
        qids = [q for q in report.per_query if q in report_b.per_query]
        result = paired_t_test([report.per_query[q] for q in qids],
                               [report_b.per_query[q] for q in qids],
                               num_comparisons)
        verdict = "significant" if result.significant else "not significant"
        print(f"t={result.t!r} p={result.p!r} alpha_adjusted={result.alpha_adjusted!r} "
              f"=> {verdict}")
    return 0


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    paths = make_synthetic(args.out, vocab_size=args.vocab_size, docs=args.docs,
                           doc_len=args.doc_len, query_len=args.query_len,
                           train_queries=args.train_queries,
                           heldout_queries=args.heldout_queries, seed=args.seed)
    for name in ("corpus", "queries_train", "queries_heldout", "qrels_train", "qrels_heldout"):
        print(f"{name} -> {getattr(paths, name)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        typ, _, help_text = CONFIG_SCHEMA[key]
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, dest=key, default=None, help=help_text,
                                type=lambda raw, k=key: _coerce(k, raw), metavar="BOOL")
        else:
            parser.add_argument(flag, dest=key, default=None, type=typ, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retlab",
        description="Desk-scale dense/sparse retrieval pipelines: train, index, search, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, keys) -> None:
        p.add_argument("--config", help="flat key = value manifest file")
        _add_config_flags(p, keys)

    p = sub.add_parser("pretrain", help="MNTP pretraining on a corpus")
    common(p, ("corpus", "vocab", "checkpoint", "train_log", "seed", "dim", "layers",
               "heads", "attention_mode", "vocab_max_terms", "epochs", "batch_size",
               "grad_accum_steps", "learning_rate", "mask_rate", "max_doc_len",
               "max_query_len", "max_steps", "warmup_frac", "bert_style_masking",
               "checkpoint_every"))

    p = sub.add_parser("finetune", help="fine-tune with cl, kd_margin_mse, or cl_plus_kd")
    common(p, ("corpus", "queries", "qrels", "negatives", "teacher_scores", "vocab",
               "checkpoint", "init_checkpoint", "train_log", "seed", "paradigm", "dim",
               "layers", "heads", "attention_mode", "vocab_max_terms", "objective",
               "epochs", "batch_size", "grad_accum_steps", "num_negatives",
               "learning_rate", "flop_lambda_query", "flop_lambda_doc", "max_query_len",
               "max_doc_len", "max_steps", "warmup_frac", "kl_temperature",
               "oracle_teacher", "teacher_scale", "checkpoint_every"))

    p = sub.add_parser("encode-index", help="encode a corpus into an index or dense store")
    common(p, ("corpus", "vocab", "checkpoint", "index", "paradigm", "max_doc_len"))

    p = sub.add_parser("search", help="retrieve top-k for each query into a run file")
    common(p, ("queries", "vocab", "checkpoint", "index", "run", "paradigm", "k",
               "max_query_len"))

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    common(p, ("run", "qrels", "metric", "k"))
    p.add_argument("--run-b", dest="run_b", help="second run for a paired t-test")
    p.add_argument("--num-comparisons", dest="num_comparisons", type=int,
                   help="Bonferroni divisor m (required with --run-b)")
    p.add_argument("--report", dest="report", help="also write the metric report here")

    p = sub.add_parser("make-synthetic", help="generate a planted-relevance dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab-size", type=int, default=300)
    p.add_argument("--docs", type=int, default=1000)
    p.add_argument("--doc-len", type=int, default=10)
    p.add_argument("--query-len", type=int, default=3)
    p.add_argument("--train-queries", type=int, default=200)
    p.add_argument("--heldout-queries", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "make-synthetic":
            return cmd_make_synthetic(args)
        settings = Settings(args)
        if args.command == "pretrain":
            return cmd_pretrain(settings)
        if args.command == "finetune":
            return cmd_finetune(settings)
        if args.command == "encode-index":
            return cmd_encode_index(settings)
        if args.command == "search":
            return cmd_search(settings)
        if args.command == "evaluate":
            return cmd_evaluate(settings, args.run_b, args.num_comparisons, args.report)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RetlabError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
