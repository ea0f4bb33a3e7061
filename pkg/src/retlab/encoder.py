"""Small transformer encoder with switchable causal/bidirectional attention.

Architecture (fixed for reproducibility): learned absolute position
embeddings, pre-norm blocks with RMS normalization, per-head attention
projections whose outputs are summed, a ReLU feed-forward of width 4*dim,
and a final RMS norm. No biases anywhere. With zero layers the encoder
returns raw embedding columns, positions included verbatim.

The masked-next-token objective predicts the original token at a masked
position i from the contextual representation at position i-1, with the
output projection tied to the embedding table.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, InputError
from .vocab import RESERVED_TOKENS, Vocabulary

ATTENTION_MODES = ("causal", "bidirectional")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    layers: int
    heads: int
    vocab_size: int
    max_len: int
    attention_mode: str = "bidirectional"

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.vocab_size < len(RESERVED_TOKENS):
            raise ConfigError(f"vocab_size must be >= {len(RESERVED_TOKENS)}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "attention_mode": self.attention_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(dim=int(d["dim"]), layers=int(d["layers"]), heads=int(d["heads"]),
                   vocab_size=int(d["vocab_size"]), max_len=int(d["max_len"]),
                   attention_mode=str(d["attention_mode"]))


class TokenSequence:
    """Token ids plus a padding mask; real tokens form a contiguous prefix."""

    __slots__ = ("ids", "padding_mask")

    def __init__(self, ids, padding_mask):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.padding_mask = np.asarray(padding_mask, dtype=bool)
        if self.ids.ndim != 1 or self.padding_mask.shape != self.ids.shape:
            raise InputError("ids and padding_mask must be 1-d and the same length")
        n_real = int(self.padding_mask.sum())
        if n_real < 1:
            raise InputError("a token sequence needs at least one real token")
        if not self.padding_mask[:n_real].all():
            raise InputError("padding must be a suffix: real tokens form a contiguous prefix")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_real(self) -> int:
        return int(self.padding_mask.sum())

    @classmethod
    def from_text(cls, vocab: Vocabulary, text: str, max_len: int,
                  pad_to: int | None = None) -> "TokenSequence":
        ids = vocab.encode_text(text)[:max_len]
        if not ids:
            raise InputError(f"text produced no tokens: {text!r}")
        n_real = len(ids)
        if pad_to is not None:
            if pad_to < n_real:
                raise InputError("pad_to is shorter than the token count")
            ids = ids + [vocab.pad_id] * (pad_to - n_real)
        mask = [True] * n_real + [False] * (len(ids) - n_real)
        return cls(ids, mask)


class EncoderModel:
    """Transformer encoder parameters; the embedding table doubles as the
    vocabulary projection and the MNTP output head (weight tying)."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, v = config.dim, config.vocab_size
        dh = d // config.heads
        init = lambda *shape: Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)
        # residual-branch output projections start near zero (and the position
        # table at zero), so blocks begin close to the identity and capacity
        # grows only where the loss asks for it; stabilizes small-data training
        small = lambda *shape: Tensor(rng.normal(0.0, 0.002, size=shape), requires_grad=True)
        self.params["embedding"] = init(d, v)
        self.params["positions"] = Tensor(np.zeros((config.max_len, d)), requires_grad=True)
        for layer in range(config.layers):
            p = f"layer{layer}."
            self.params[p + "attn_gain"] = Tensor(np.ones(d), requires_grad=True)
            for h in range(config.heads):
                self.params[p + f"wq{h}"] = init(d, dh)
                self.params[p + f"wk{h}"] = init(d, dh)
                self.params[p + f"wv{h}"] = init(d, dh)
                self.params[p + f"wo{h}"] = small(dh, d)
            self.params[p + "ffn_gain"] = Tensor(np.ones(d), requires_grad=True)
            self.params[p + "ffn_w1"] = init(d, 4 * d)
            self.params[p + "ffn_w2"] = small(4 * d, d)
        if config.layers > 0:
            self.params["final_gain"] = Tensor(np.ones(d), requires_grad=True)

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding"]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def assert_finite(self) -> None:
        from .errors import NumericError

        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {name} contains non-finite values")


@contextmanager
def inference_mode(model: EncoderModel) -> Iterator[None]:
    """Temporarily disable gradient tracking for all model parameters."""
    saved = [(p, p.requires_grad) for p in model.params.values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _causal_bias(n: int) -> np.ndarray:
    bias = np.zeros((n, n))
    bias[np.triu_indices(n, k=1)] = -np.inf
    return bias


def encode_sequence(model: EncoderModel, seq: TokenSequence) -> Tensor:
    """Contextual representation, dim x len, padding columns zeroed.

    Computation runs on the real-token prefix only, which makes the real
    columns bit-identical under appended padding by construction. With zero
    layers the raw embedding columns are returned for every position,
    padding included.
    """
    cfg = model.config
    L = len(seq)
    if L > cfg.max_len:
        raise InputError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if (seq.ids < 0).any() or (seq.ids >= cfg.vocab_size).any():
        bad = seq.ids[(seq.ids < 0) | (seq.ids >= cfg.vocab_size)][0]
        raise InputError(f"token id {bad} out of range for vocab_size {cfg.vocab_size}")

    emb_t = ad.transpose(model.embedding)  # (V, D)
    if cfg.layers == 0:
        return ad.transpose(ad.take_rows(emb_t, seq.ids))

    n_real = seq.n_real
    x = ad.take_rows(emb_t, seq.ids[:n_real])  # (n_real, D)
    x = ad.add(x, ad.take_rows(model.params["positions"], np.arange(n_real)))

    bias = None
    if cfg.attention_mode == "causal" and n_real > 1:
        bias = ad.constant(_causal_bias(n_real))

    inv_sqrt_dh = 1.0 / math.sqrt(cfg.dim // cfg.heads)
    for layer in range(cfg.layers):
        p = f"layer{layer}."
        xn = ad.rms_norm(x, model.params[p + "attn_gain"])
        attn_out = None
        for h in range(cfg.heads):
            q = ad.matmul(xn, model.params[p + f"wq{h}"])
            k = ad.matmul(xn, model.params[p + f"wk{h}"])
            v = ad.matmul(xn, model.params[p + f"wv{h}"])
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dh)
            if bias is not None:
                scores = ad.add(scores, bias)
            ctx = ad.matmul(ad.row_softmax(scores), v)
            out_h = ad.matmul(ctx, model.params[p + f"wo{h}"])
            attn_out = out_h if attn_out is None else ad.add(attn_out, out_h)
        x = ad.add(x, attn_out)
        xn2 = ad.rms_norm(x, model.params[p + "ffn_gain"])
        hidden = ad.relu(ad.matmul(xn2, model.params[p + "ffn_w1"]))
        x = ad.add(x, ad.matmul(hidden, model.params[p + "ffn_w2"]))

    x = ad.rms_norm(x, model.params["final_gain"])
    h_t = ad.transpose(x)  # (D, n_real)
    if n_real < L:
        h_t = ad.pad_cols(h_t, L - n_real)
    return h_t


def select_mask_positions(seq: TokenSequence, rate: float, rng_seed: int) -> set[int]:
    """Choose max(1, round(rate * n_real)) maskable positions, never position 0.

    Position 0 has no predecessor to predict from, so it is excluded; the
    count is additionally clamped to the number of candidates for extreme
    rates on very short sequences.
    """
    if not 0.0 < rate < 1.0:
        raise ContractError(f"mask rate must be in (0, 1), got {rate}")
    n_real = seq.n_real
    candidates = np.arange(1, n_real)
    if candidates.size == 0:
        raise InputError("sequence with a single real token has no maskable position")
    count = max(1, int(math.floor(rate * n_real + 0.5)))
    count = min(count, candidates.size)
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(candidates, size=count, replace=False)
    return {int(i) for i in chosen}


def corrupt_for_mntp(seq: TokenSequence, positions: set[int], vocab_size: int,
                     mask_id: int, rng: np.random.Generator | None = None,
                     bert_style: bool = False) -> np.ndarray:
    """Return a corrupted copy of the ids. Default: plain MASK at every
    selected position. The BERT-style variant uses the 80/10/10 split."""
    ids = seq.ids.copy()
    reserved = len(RESERVED_TOKENS)
    for pos in sorted(positions):
        if not bert_style:
            ids[pos] = mask_id
            continue
        if rng is None:
            raise ContractError("bert_style corruption requires an rng")
        u = rng.random()
        if u < 0.8:
            ids[pos] = mask_id
        elif u < 0.9:
            ids[pos] = int(rng.integers(reserved, vocab_size))
        # else: keep the original token
    return ids


def mntp_ce_terms(model: EncoderModel, seq: TokenSequence, masked_positions: set[int],
                  corrupted_ids: np.ndarray | None = None) -> tuple[Tensor, int]:
    """Summed cross-entropy over the masked positions, plus their count.

    Logits for a masked position i come from the representation at i-1,
    projected through the (tied) embedding table.
    """
    if model.config.attention_mode != "bidirectional":
        raise ContractError("MNTP requires a bidirectional model")
    if not masked_positions:
        raise ContractError("MNTP requires at least one masked position")
    positions = sorted(int(p) for p in masked_positions)
    if positions[0] == 0:
        raise ContractError("position 0 cannot be masked: it has no previous position")
    n_real = seq.n_real
    if positions[-1] >= n_real:
        raise ContractError(f"masked position {positions[-1]} is not a real token position")

    ids = corrupted_ids if corrupted_ids is not None else corrupt_for_mntp(
        seq, set(positions), model.config.vocab_size, Vocabulary.mask_id)
    corrupted = TokenSequence(ids, seq.padding_mask)
    h = encode_sequence(model, corrupted)  # (D, L)
    h_rows = ad.transpose(h)  # (L, D)
    prev = ad.take_rows(h_rows, np.asarray(positions) - 1)  # (M, D)
    logits = ad.matmul(prev, model.embedding)  # (M, V)
    lse = ad.logsumexp_rows(logits)
    target = ad.take_per_row(logits, seq.ids[positions])
    ce = ad.sub(lse, target)
    return ad.sum_axis(ce, 0), len(positions)


def mntp_loss(model: EncoderModel, seq: TokenSequence, masked_positions: set[int],
              corrupted_ids: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of the original tokens at the masked positions."""
    total, count = mntp_ce_terms(model, seq, masked_positions, corrupted_ids)
    return ad.scale(total, 1.0 / count)
