import numpy as np
import pytest

from src.errors import ArgumentError, ConfigurationError
from src.tokenizer import (
    RESERVED,
    UNK_ID,
    TokenSeq,
    Vocab,
    decode_text,
    encode,
    encode_words,
    load_vocab,
    save_vocab,
    train_wordpiece,
)


def random_sentences(rng, n, alphabet="abcdefgh", max_words=6):
    out = []
    for _ in range(n):
        words = ["".join(rng.choice(list(alphabet), size=int(rng.integers(1, 7))))
                 for _ in range(int(rng.integers(1, max_words + 1)))]
        out.append(" ".join(words))
    return out


def test_single_merge_on_repeated_character():
    vocab = train_wordpiece([("xx", ["aaaa"])], vocab_size=len(RESERVED) + 2)
    assert vocab.pieces == RESERVED + ("a", "aa")
    assert encode("aaaa", vocab).ids == (vocab.ids["aa"], vocab.ids["aa"])


def test_vocab_size_too_small_and_empty_corpora():
    with pytest.raises(ConfigurationError):
        train_wordpiece([("xx", ["abc"])], vocab_size=3)
    with pytest.raises(ArgumentError):
        train_wordpiece([], vocab_size=100)
    with pytest.raises(ArgumentError):
        train_wordpiece([("xx", ["", ""])], vocab_size=100)


def test_longest_match_and_unknown_characters():
    vocab = Vocab(RESERVED + ("a", "aa"))
    assert encode("aa", vocab).ids == (vocab.ids["aa"],)
    assert encode("", vocab).ids == ()
    assert encode("aza", vocab).ids == (vocab.ids["a"], UNK_ID, vocab.ids["a"])


def test_round_trip_on_corpus_sentences(rng):
    sentences = random_sentences(rng, 1000)
    vocab = train_wordpiece([("aa-AA", sentences[:500]), ("bb-BB", sentences[500:])], vocab_size=300)
    for s in sentences:
        seq = encode(s, vocab)
        assert UNK_ID not in seq.ids
        assert decode_text(seq, vocab) == s


def test_literal_word_marker_in_text_is_unknown():
    vocab = train_wordpiece([("xx", ["x▁y z"])], vocab_size=20)
    assert all("▁y" != p and "x▁" not in p for p in vocab.pieces)
    seq = encode("x▁y z", vocab)
    assert seq.ids[1] == UNK_ID
    assert decode_text(seq, vocab) != "x y z"
    clean = encode("x y z", vocab)
    assert UNK_ID not in clean.ids
    assert decode_text(clean, vocab) == "x y z"


def test_language_tag_is_metadata_only(rng):
    sentences = random_sentences(rng, 50)
    vocab = train_wordpiece([("xx", sentences)], vocab_size=120)
    assert encode(sentences[0], vocab, "aa-AA").ids == encode(sentences[0], vocab, "bb-BB").ids


def test_pooling_equals_premixed_corpus(rng):
    a, b = random_sentences(rng, 80, "abcd"), random_sentences(rng, 80, "cdef")
    split = train_wordpiece([("aa-AA", a), ("bb-BB", b)], vocab_size=150)
    mixed = train_wordpiece([("mixed", a + b)], vocab_size=150)
    assert split == mixed


def test_training_is_deterministic_and_file_round_trips(tmp_path, rng):
    sentences = random_sentences(rng, 200)
    first = save_vocab(train_wordpiece([("xx", sentences)], 200), tmp_path / "a.txt")
    second = save_vocab(train_wordpiece([("xx", sentences)], 200), tmp_path / "b.txt")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_text(encoding="utf-8").startswith("wpv1 ")
    loaded = load_vocab(first)
    assert loaded == train_wordpiece([("xx", sentences)], 200)
    assert loaded.digest() == load_vocab(second).digest()


def test_subsampling_is_seeded(rng):
    sentences = random_sentences(rng, 300)
    one = train_wordpiece([("xx", sentences)], 150, seed=1, max_sentences_per_corpus=100)
    two = train_wordpiece([("xx", sentences)], 150, seed=1, max_sentences_per_corpus=100)
    assert one == two


def test_merges_exhausted_stops_early():
    vocab = train_wordpiece([("xx", ["ab ab"])], vocab_size=100)
    assert vocab.size < 100
    assert len(encode("ab ab", vocab).ids) == 2


def test_decode_text_rejects_out_of_range_ids():
    vocab = Vocab(RESERVED + ("a",))
    assert decode_text(TokenSeq(()), vocab) == ""
    with pytest.raises(ArgumentError):
        decode_text(TokenSeq((vocab.size,)), vocab)


def test_encode_words_splits_per_word():
    vocab = train_wordpiece([("xx", ["ab cd", "cd ab"])], vocab_size=100)
    pieces = encode_words("ab cd", vocab)
    assert len(pieces) == 2
    assert sum(pieces, ()) == encode("ab cd", vocab).ids


def test_load_vocab_rejects_bad_header(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("bpe 4\n<pad>\n<s>\n</s>\n<unk>\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_vocab(path)
