"""Word-level vocabulary with reserved control tokens.

Tokenization is lowercased splitting on whitespace and punctuation; ids are
assigned by descending frequency, ties broken lexicographically, after the
three reserved tokens.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from typing import Iterable

from .errors import InputError, ParseError

PAD_TOKEN = "<pad>"
MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, MASK_TOKEN, UNK_TOKEN)

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijective token <-> id map with PAD/MASK/UNK reserved at ids 0..2."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            raise InputError("vocabulary must start with the reserved tokens "
                             f"{RESERVED_TOKENS}, got {tokens[:3]}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    pad_id = 0
    mask_id = 1
    unk_id = 2

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def sha256(self) -> str:
        payload = "\n".join(self.id_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens: list[str] = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                tok = line.rstrip("\n")
                if not tok:
                    raise ParseError("empty vocabulary line", line_no + 1)
                tokens.append(tok)
        if len(tokens) < len(RESERVED_TOKENS):
            raise ParseError(f"vocabulary file {path} is missing reserved tokens")
        return cls(tokens)


def build_vocabulary(corpus: Iterable[str], max_terms: int) -> Vocabulary:
    """Most frequent max_terms tokens, frequency descending then lexicographic."""
    if max_terms < 1:
        raise InputError("max_terms must be >= 1")
    counts: Counter[str] = Counter()
    saw_text = False
    for text in corpus:
        saw_text = True
        counts.update(tokenize(text))
    if not saw_text:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[:max_terms]]
    return Vocabulary(list(RESERVED_TOKENS) + kept)
