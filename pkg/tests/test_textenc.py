"""Tokenizer and frozen-encoder behavior."""

import itertools

import numpy as np
import pytest

from vmixlab.errors import ConfigError
from vmixlab.textenc import CLS, EOS, PAD, TextEncoder, Vocabulary


@pytest.fixture(scope="module")
def enc():
    return TextEncoder(Vocabulary.default())


class TestTokenize:
    def test_empty_prompt(self, enc):
        ids = enc.tokenize("")
        v = enc.vocab
        assert ids[0] == v.id_of(CLS) and ids[1] == v.id_of(EOS)
        assert all(i == v.id_of(PAD) for i in ids[2:])

    def test_known_words(self, enc):
        ids = enc.tokenize("red circle")
        v = enc.vocab
        assert ids[:4] == [v.id_of(CLS), v.id_of("red"), v.id_of("circle"), v.id_of(EOS)]

    def test_length_always_seq_len(self, enc):
        for text in ("", "red", "red circle", " ".join(["red"] * 40), "zzz unknown words"):
            assert len(enc.tokenize(text)) == enc.seq_len

    def test_unknown_absorbed_to_unk(self, enc):
        ids = enc.tokenize("frobnicate")
        assert ids[1] == enc.vocab.id_of("[UNK]")


class TestEncode:
    def test_deterministic(self, enc):
        a = enc.encode_text("red circle")
        b = enc.encode_text("red circle")
        assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.cls, b.cls)

    def test_stable_across_instances(self):
        a = TextEncoder(Vocabulary.default()).encode_text("blue square")
        b = TextEncoder(Vocabulary.default()).encode_text("blue square")
        assert np.array_equal(a.tokens, b.tokens)

    def test_context_mixing_changes_embeddings(self, enc):
        a = enc.encode_text("red circle").tokens
        b = enc.encode_text("red square").tokens
        assert not np.array_equal(a, b)
        # even the shared-position rows differ: attention mixes context
        assert not np.allclose(a[1], b[1])

    def test_cls_distinguishes_prompts(self, enc):
        a = enc.encode_text("").cls
        b = enc.encode_text("red circle").cls
        assert np.linalg.norm(a - b) > 1e-3

    def test_wrong_length_raises(self, enc):
        with pytest.raises(ConfigError):
            enc.encode([0, 1, 2])

    def test_output_shapes(self, enc):
        out = enc.encode_text("green triangle")
        assert out.tokens.shape == (enc.seq_len, enc.dim)
        assert out.cls.shape == (enc.dim,)
        assert out.tokens.dtype == np.float32


class TestClsOf:
    def test_pure_function(self, enc):
        assert np.array_equal(enc.cls_of("vibrant color"), enc.cls_of("vibrant color"))

    def test_rare_token_far_from_positive_labels(self, enc):
        labels = ["vibrant color", "natural lighting", "proportional composition", "sharp focus"]
        for rare in ("[V1]", "[V2]", "[V3]", "[V4]"):
            rv = enc.cls_of(rare)
            for lab in labels:
                assert np.linalg.norm(rv - enc.cls_of(lab)) > 1e-3

    def test_all_default_labels_pairwise_distinct(self, enc):
        labels = ["vibrant color", "natural lighting", "proportional composition",
                  "sharp focus", "[V1]", "[V2]", "[V3]", "[V4]"]
        for a, b in itertools.combinations(labels, 2):
            assert np.linalg.norm(enc.cls_of(a) - enc.cls_of(b)) > 1e-3

    def test_empty_label_rejected(self, enc):
        with pytest.raises(ConfigError):
            enc.cls_of("")


class TestVocabulary:
    def test_rare_tokens_never_in_caption_words(self):
        from vmixlab.textenc import COLOR_WORDS, SHAPE_WORDS, POSITION_WORDS
        v = Vocabulary.default()
        caption_words = set(COLOR_WORDS + SHAPE_WORDS + POSITION_WORDS)
        assert not caption_words & set(v.rare_tokens)

    def test_roundtrip(self, tmp_path):
        v = Vocabulary.default()
        p = tmp_path / "vocab.txt"
        v.save(p)
        w = Vocabulary.load(p)
        assert w.tokens == v.tokens

    def test_ids_stable(self):
        a, b = Vocabulary.default(), Vocabulary.default()
        assert a.index == b.index
