"""Training loops for MNTP pretraining and the three fine-tuning objectives.

Loss normalization divides every micro-batch by batch_size * grad_accum_steps
so that accumulating G micro-batches reproduces one large batch exactly
(Table-5-style effective batch semantics). The optimizer is Adam with linear
warmup and zero weight decay; parameters are asserted finite after every
update.

Checkpoints are a self-describing binary container (JSON header + raw
float64 tensors) whose save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderModel, TokenSequence, corrupt_for_mntp, \
    encode_sequence, mntp_ce_terms, select_mask_positions
from .errors import ConfigError, ContractError, InputError, NumericError
from .objectives import TeacherSource, TrainingGroup, cl_loss, combined_loss, \
    kl_div_loss, margin_mse_loss
from .represent import DenseVector, dense_pool, flop_penalty, relevance_score, sparse_project
from .util import atomic_write_bytes
from .vocab import Vocabulary

OBJECTIVES = ("cl", "kd_margin_mse", "cl_plus_kd", "mntp")
PARADIGMS = ("sparse", "dense")


@dataclass
class TrainConfig:
    objective: str = "cl"
    epochs: int = 1
    batch_size: int = 8
    grad_accum_steps: int = 1
    num_negatives: int = 16
    learning_rate: float = 1e-4
    flop_lambda_query: float = 0.05
    flop_lambda_doc: float = 0.04
    mask_rate: float = 0.2
    seed: int = 0
    max_query_len: int = 64
    max_doc_len: int = 128
    # toy-scale controls beyond the core field set
    max_steps: int = 0  # cap on micro-batch steps; 0 means run all epochs
    warmup_frac: float = 0.04
    kl_temperature: float = 1.0
    bert_style_masking: bool = False

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("epochs", "batch_size", "grad_accum_steps", "num_negatives",
                     "max_query_len", "max_doc_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        for name in ("flop_lambda_query", "flop_lambda_doc"):
            v = getattr(self, name)
            if v < 0 or not math.isfinite(v):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.kl_temperature <= 0:
            raise ConfigError(f"kl_temperature must be > 0, got {self.kl_temperature}")

    def sha256(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class StepReport:
    step: int
    loss: float
    components: dict[str, float]
    grad_norm: float
    mean_nonzeros: float

    def to_json_line(self) -> str:
        record = {"step": self.step, "loss": self.loss, "components": self.components,
                  "grad_norm": self.grad_norm, "mean_nonzeros": self.mean_nonzeros}
        return json.dumps(record, sort_keys=True)


class Adam:
    """Adam with linear warmup over warmup_frac of the planned updates."""

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float,
                 total_updates: int, warmup_frac: float = 0.04,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.warmup_updates = int(round(warmup_frac * max(total_updates, 1)))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def current_lr(self) -> float:
        if self.warmup_updates > 0 and self.t <= self.warmup_updates:
            return self.learning_rate * self.t / self.warmup_updates
        return self.learning_rate

    def step(self) -> None:
        self.t += 1
        lr = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])


# ---------------------------------------------------------------------------
# training data containers


@dataclass(frozen=True)
class TrainingUnit:
    """A query with its positive and an optional explicit negative pool."""

    query_id: str
    positive: str
    negative_pool: tuple[str, ...] = ()


@dataclass
class FinetuneData:
    units: list[TrainingUnit]
    queries: dict[str, str]
    docs: dict[str, str]

    def __post_init__(self):
        if not self.units:
            raise InputError("no training units: qrels produced an empty store")
        self.doc_ids = sorted(self.docs)
        for unit in self.units:
            if unit.query_id not in self.queries:
                raise InputError(f"query {unit.query_id!r} has no text")
            if unit.positive not in self.docs:
                raise InputError(f"positive doc {unit.positive!r} has no text")


@dataclass
class PretrainData:
    sequences: list[TokenSequence]

    def __post_init__(self):
        if not self.sequences:
            raise InputError("no pretraining sequences")


def build_finetune_data(qrels_grades: Mapping[str, Mapping[str, int]],
                        queries: Mapping[str, str], docs: Mapping[str, str],
                        negatives: Mapping[str, Sequence[str]] | None = None) -> FinetuneData:
    """One training unit per (query, positive) pair with grade >= 1."""
    units = []
    negatives = negatives or {}
    for qid in sorted(qrels_grades):
        if qid not in queries:
            continue
        pool = tuple(d for d in negatives.get(qid, ()) if d in docs)
        for did in sorted(qrels_grades[qid]):
            if qrels_grades[qid][did] >= 1 and did in docs:
                units.append(TrainingUnit(qid, did, tuple(d for d in pool if d != did)))
    return FinetuneData(units, dict(queries), dict(docs))


def sample_training_batch(data: FinetuneData, cfg: TrainConfig,
                          rng: np.random.Generator,
                          teacher: TeacherSource | None = None) -> list[TrainingGroup]:
    """batch_size groups, each with exactly num_negatives distinct negatives.

    Explicit pools are subsampled when large enough; otherwise negatives are
    drawn uniformly from the corpus excluding the positive. Deterministic for
    a given generator state.
    """
    n = len(data.units)
    if n == 0:
        raise InputError("empty training store")
    replace = cfg.batch_size > n
    picked = rng.choice(n, size=cfg.batch_size, replace=replace)
    groups = []
    for unit_idx in picked:
        unit = data.units[int(unit_idx)]
        k = cfg.num_negatives
        if len(unit.negative_pool) >= k:
            chosen = rng.choice(len(unit.negative_pool), size=k, replace=False)
            negs = tuple(unit.negative_pool[int(i)] for i in chosen)
        else:
            candidates = [d for d in data.doc_ids if d != unit.positive]
            if len(candidates) < k:
                raise InputError(f"corpus too small to draw {k} negatives")
            chosen = rng.choice(len(candidates), size=k, replace=False)
            negs = tuple(candidates[int(i)] for i in chosen)
        scores = None
        if teacher is not None:
            scores = teacher.scores_for(unit.query_id, [unit.positive, *negs])
        groups.append(TrainingGroup(unit.query_id, unit.positive, negs, scores))
    return groups


# ---------------------------------------------------------------------------
# the trainer


class Trainer:
    """Owns the accumulation cycle: gradients build up across micro-batches
    and the optimizer runs once every grad_accum_steps calls."""

    def __init__(self, model: EncoderModel, cfg: TrainConfig, paradigm: str,
                 total_updates: int, teacher: TeacherSource | None = None,
                 data: FinetuneData | PretrainData | None = None):
        cfg.validate()
        if paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {paradigm!r}")
        if model.config.attention_mode != "bidirectional":
            raise ContractError("retrieval and MNTP training require a bidirectional model")
        if cfg.objective in ("kd_margin_mse", "cl_plus_kd") and teacher is None:
            raise ConfigError(f"objective {cfg.objective} requires a teacher score source")
        if cfg.objective == "kd_margin_mse" and cfg.num_negatives != 1:
            raise ConfigError("margin-MSE distillation trains on triplets; set num_negatives = 1")
        self.model = model
        self.cfg = cfg
        self.paradigm = paradigm
        self.teacher = teacher
        self.data = data
        self.optimizer = Adam(model.parameters(), cfg.learning_rate,
                              total_updates=total_updates, warmup_frac=cfg.warmup_frac)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self._micro_in_cycle = 0
        self._seq_cache: dict[tuple[str, str], TokenSequence] = {}

    # -- sequence handling --------------------------------------------------

    def attach_vocab(self, vocab: Vocabulary) -> None:
        self.vocab = vocab

    def _sequence(self, kind: str, key: str, text: str, max_len: int) -> TokenSequence:
        cached = self._seq_cache.get((kind, key))
        if cached is None:
            try:
                cached = TokenSequence.from_text(self.vocab, text, max_len)
            except InputError as exc:
                raise InputError(f"{kind} {key!r}: {exc}") from exc
            self._seq_cache[(kind, key)] = cached
        return cached

    def _encode_rep(self, seq: TokenSequence):
        h = encode_sequence(self.model, seq)
        if self.paradigm == "dense":
            rep = dense_pool(h, seq.padding_mask)
            return rep, None
        activation, _ = sparse_project(h, self.model.embedding, seq.padding_mask)
        return DenseVector(activation), activation

    # -- steps ---------------------------------------------------------------

    def train_step(self, batch) -> StepReport:
        if self.cfg.objective == "mntp":
            micro_loss, components, nonzeros = self._mntp_micro_loss(batch)
        else:
            micro_loss, components, nonzeros = self._finetune_micro_loss(batch)
        if not np.isfinite(micro_loss.data):
            raise NumericError(f"non-finite loss at step {self.step_count + 1} "
                               f"({self._describe_batch(batch)})")
        ad.backward(ad.scale(micro_loss, 1.0 / self.cfg.grad_accum_steps))
        self.step_count += 1
        self._micro_in_cycle += 1
        norm = ad.grad_norm(self.model.parameters().values())
        if self._micro_in_cycle == self.cfg.grad_accum_steps:
            self.optimizer.step()
            self.optimizer.zero_grad()
            self._micro_in_cycle = 0
            self.model.assert_finite()
        return StepReport(step=self.step_count, loss=float(micro_loss.data),
                          components=components, grad_norm=norm, mean_nonzeros=nonzeros)

    def _describe_batch(self, batch) -> str:
        if batch and isinstance(batch[0], TrainingGroup):
            return f"first group query={batch[0].query_id!r}"
        return f"{len(batch)} sequences"

    def _finetune_micro_loss(self, batch: Sequence[TrainingGroup]):
        cfg = self.cfg
        group_losses = []
        cl_values = []
        kd_values = []
        query_acts = []
        doc_acts = []
        nonzero_counts = []
        for group in batch:
            qseq = self._sequence("query", group.query_id,
                                  self.data.queries[group.query_id], cfg.max_query_len)
            q_rep, q_act = self._encode_rep(qseq)
            if q_act is not None:
                query_acts.append(q_act)
            doc_reps = []
            for did in (group.positive, *group.negatives):
                dseq = self._sequence("doc", did, self.data.docs[did], cfg.max_doc_len)
                d_rep, d_act = self._encode_rep(dseq)
                doc_reps.append(d_rep)
                if d_act is not None:
                    doc_acts.append(d_act)
                    nonzero_counts.append(int((d_act.data > 0).sum()))
            scores = [relevance_score(q_rep, d) for d in doc_reps]
            s_pos, s_negs = scores[0], scores[1:]
            if cfg.objective == "cl":
                loss_g = cl_loss(s_pos, s_negs)
                cl_values.append(float(loss_g.data))
            elif cfg.objective == "kd_margin_mse":
                t = group.teacher_scores
                loss_g = margin_mse_loss(s_pos, s_negs[0], t[group.positive],
                                         t[group.negatives[0]])
                kd_values.append(float(loss_g.data))
            else:  # cl_plus_kd
                t = group.teacher_scores
                teacher_list = [t[group.positive]] + [t[d] for d in group.negatives]
                cl_part = cl_loss(s_pos, s_negs)
                kd_part = kl_div_loss(scores, teacher_list, cfg.kl_temperature)
                cl_values.append(float(cl_part.data))
                kd_values.append(float(kd_part.data))
                loss_g = combined_loss(cl_part, kd_part)
            group_losses.append(loss_g)

        total = group_losses[0]
        for extra in group_losses[1:]:
            total = ad.add(total, extra)
        micro = ad.scale(total, 1.0 / cfg.batch_size)
        components = {}
        if cl_values:
            components["cl"] = sum(cl_values) / len(cl_values)
        if kd_values:
            components["kd"] = sum(kd_values) / len(kd_values)
        if self.paradigm == "sparse":
            flop_q = flop_penalty(ad.stack_rows(query_acts), cfg.flop_lambda_query)
            flop_d = flop_penalty(ad.stack_rows(doc_acts), cfg.flop_lambda_doc)
            components["flop_query"] = float(flop_q.data)
            components["flop_doc"] = float(flop_d.data)
            micro = ad.add(micro, ad.add(flop_q, flop_d))
            nonzeros = sum(nonzero_counts) / len(nonzero_counts)
        else:
            nonzeros = float(self.model.config.dim)
        return micro, components, nonzeros

    def _mntp_micro_loss(self, batch: Sequence[TokenSequence]):
        cfg = self.cfg
        total_ce = None
        total_count = 0
        for seq in batch:
            seed = int(self.rng.integers(0, 2**63 - 1))
            positions = select_mask_positions(seq, cfg.mask_rate, seed)
            corrupted = None
            if cfg.bert_style_masking:
                corrupted = corrupt_for_mntp(seq, positions, self.model.config.vocab_size,
                                             Vocabulary.mask_id, rng=self.rng, bert_style=True)
            ce_sum, count = mntp_ce_terms(self.model, seq, positions, corrupted)
            total_ce = ce_sum if total_ce is None else ad.add(total_ce, ce_sum)
            total_count += count
        micro = ad.scale(total_ce, 1.0 / total_count)
        return micro, {"mntp": float(micro.data)}, 0.0


# ---------------------------------------------------------------------------
# checkpoint container


CHECKPOINT_MAGIC = b"RLCKPT01"


def save_checkpoint(path, model: EncoderModel, step: int, config_hash: str = "",
                    vocab_hash: str = "", optimizer: Adam | None = None) -> None:
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in model.parameters().items()}
    opt_meta = None
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        opt_meta = {"t": optimizer.t}
    header = {
        "format_version": 1,
        "encoder": model.config.to_dict(),
        "step": int(step),
        "config_sha256": config_hash,
        "vocab_sha256": vocab_hash,
        "optimizer": opt_meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(header_bytes)), header_bytes]
    for _, a in arrays.items():
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


@dataclass
class Checkpoint:
    model: EncoderModel
    step: int
    config_hash: str
    vocab_hash: str
    optimizer_t: int | None
    optimizer_arrays: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path} is not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    offset = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[meta["name"]] = arr.astype(np.float64)
        offset += 8 * count
    config = EncoderConfig.from_dict(header["encoder"])
    model = EncoderModel(config, seed=0)
    for name, p in model.parameters().items():
        if name not in arrays:
            raise InputError(f"checkpoint missing parameter {name}")
        p.data = np.array(arrays[name])
    opt_meta = header.get("optimizer")
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(model=model, step=int(header["step"]),
                      config_hash=header.get("config_sha256", ""),
                      vocab_hash=header.get("vocab_sha256", ""),
                      optimizer_t=None if opt_meta is None else int(opt_meta["t"]),
                      optimizer_arrays=opt_arrays)


# ---------------------------------------------------------------------------
# full training runs


@dataclass
class TrainResult:
    reports: list[StepReport]
    initial_loss: float
    final_loss: float
    steps: int


def planned_steps(cfg: TrainConfig, n_units: int) -> int:
    per_epoch = max(1, math.ceil(n_units / cfg.batch_size))
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    return total


def train(model: EncoderModel, data: FinetuneData | PretrainData, cfg: TrainConfig,
          vocab: Vocabulary, paradigm: str = "sparse",
          teacher: TeacherSource | None = None,
          log_path=None, checkpoint_path=None, vocab_hash: str = "",
          checkpoint_every: int = 0,
          on_step: Callable[[StepReport], None] | None = None) -> TrainResult:
    """Run the configured number of steps; optionally write a JSONL log and a
    final (plus periodic) checkpoint. Fully reproducible from cfg.seed."""
    cfg.validate()
    if isinstance(data, PretrainData):
        if cfg.objective != "mntp":
            raise ConfigError("pretraining data requires the mntp objective")
        n_units = len(data.sequences)
    else:
        if cfg.objective == "mntp":
            raise ConfigError("mntp objective requires pretraining data")
        n_units = len(data.units)
    total_steps = planned_steps(cfg, n_units)
    total_updates = max(1, math.ceil(total_steps / cfg.grad_accum_steps))
    trainer = Trainer(model, cfg, paradigm, total_updates, teacher=teacher, data=data)
    trainer.attach_vocab(vocab)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A17]))

    reports: list[StepReport] = []
    for _ in range(total_steps):
        if isinstance(data, PretrainData):
            n = len(data.sequences)
            picked = batch_rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
            batch = [data.sequences[int(i)] for i in picked]
        else:
            batch = sample_training_batch(data, cfg, batch_rng, teacher=trainer.teacher)
        report = trainer.train_step(batch)
        reports.append(report)
        if on_step is not None:
            on_step(report)
        if checkpoint_path and checkpoint_every and report.step % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, report.step, cfg.sha256(),
                            vocab_hash, trainer.optimizer)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, trainer.step_count, cfg.sha256(),
                        vocab_hash, trainer.optimizer)
    if log_path:
        payload = "".join(r.to_json_line() + "\n" for r in reports).encode("utf-8")
        atomic_write_bytes(log_path, payload)
    return TrainResult(reports=reports, initial_loss=reports[0].loss,
                       final_loss=reports[-1].loss, steps=len(reports))
