"""Vocabulary construction, encoding, and file round-trips."""

import pytest

from retlab.errors import InputError
from retlab.vocab import MASK_TOKEN, PAD_TOKEN, RESERVED_TOKENS, UNK_TOKEN, \
    Vocabulary, build_vocabulary, tokenize


class TestTokenize:
    def test_lowercase_and_punctuation_split(self):
        assert tokenize("Hello, World! it's FINE.") == ["hello", "world", "it", "s", "fine"]

    def test_empty(self):
        assert tokenize("...!?") == []


class TestBuildVocabulary:
    def test_frequency_then_lexicographic(self):
        # hand count: a appears twice, b and c once each
        vocab = build_vocabulary(["a b", "a c"], max_terms=10)
        assert vocab.id_of("a") < vocab.id_of("b") < vocab.id_of("c")
        assert vocab.size == len(RESERVED_TOKENS) + 3

    def test_singleton(self):
        vocab = build_vocabulary(["x"], max_terms=1)
        assert vocab.id_to_token == list(RESERVED_TOKENS) + ["x"]

    def test_unseen_token_maps_to_unk(self):
        vocab = build_vocabulary(["a b"], max_terms=10)
        assert vocab.encode_text("a zebra") == [vocab.id_of("a"), vocab.unk_id]

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            build_vocabulary([], max_terms=5)

    def test_max_terms_truncates(self):
        vocab = build_vocabulary(["a a a b b c"], max_terms=2)
        assert vocab.id_of("c") == vocab.unk_id
        assert vocab.size == len(RESERVED_TOKENS) + 2


class TestReservedTokens:
    def test_ids_distinct_and_first(self):
        vocab = build_vocabulary(["word"], max_terms=1)
        assert (vocab.pad_id, vocab.mask_id, vocab.unk_id) == (0, 1, 2)
        assert vocab.id_to_token[0] == PAD_TOKEN
        assert vocab.id_to_token[1] == MASK_TOKEN
        assert vocab.id_to_token[2] == UNK_TOKEN

    def test_bijection(self):
        vocab = build_vocabulary(["a b c d"], max_terms=4)
        for i, tok in enumerate(vocab.id_to_token):
            assert vocab.token_to_id[tok] == i


class TestVocabularyFile:
    def test_round_trip(self, tmp_path):
        vocab = build_vocabulary(["the quick brown fox", "the lazy dog"], max_terms=10)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.sha256() == vocab.sha256()

    def test_line_number_is_id(self, tmp_path):
        vocab = build_vocabulary(["alpha beta"], max_terms=2)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        lines = path.read_text().splitlines()
        for i, tok in enumerate(lines):
            assert vocab.token_to_id[tok] == i

    def test_hash_changes_with_content(self, tmp_path):
        v1 = build_vocabulary(["a"], max_terms=1)
        v2 = build_vocabulary(["b"], max_terms=1)
        assert v1.sha256() != v2.sha256()
