"""
Shared multilingual wordpiece vocabulary.

One vocabulary is trained on the pooled sentences of every locale; no language
information reaches the models. Subwords are induced by frequency-greedy pair
merging and applied by greedy longest-match segmentation. Every word after the
first carries a leading marker standing for the space before it, so decoding is
lossless.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ArgumentError, ConfigurationError

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
WORD_MARKER = "▁"
# stands in for a literal marker character in input text; no piece ever contains it
LITERAL_MARKER = "\ufffe"
VOCAB_FORMAT = "wpv1"


@dataclass(frozen=True)
class Vocab:
    pieces: Tuple[str, ...]
    ids: Dict[str, int] = field(init=False, repr=False, compare=False)
    max_piece_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.pieces[: len(RESERVED)]) != RESERVED:
            raise ConfigurationError("vocab must start with the reserved pieces " + " ".join(RESERVED))
        ids = {p: i for i, p in enumerate(self.pieces)}
        if len(ids) != len(self.pieces):
            raise ConfigurationError("vocab pieces are not unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "max_piece_len", max(len(p) for p in self.pieces))

    @property
    def size(self) -> int:
        return len(self.pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    def digest(self) -> str:
        return hashlib.sha1("\n".join(self.pieces).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenSeq:
    ids: Tuple[int, ...]
    language_tag: Optional[str] = None  # metadata only, never fed to a model

    def __len__(self) -> int:
        return len(self.ids)


def _marked_words(text: str) -> List[str]:
    words = text.replace(WORD_MARKER, LITERAL_MARKER).split(" ")
    marked = [words[0]] + [WORD_MARKER + w for w in words[1:]]
    return [w for w in marked if w]


def _pair_key(pair: Tuple[str, str]):
    return (pair[0] + pair[1], pair)


def train_wordpiece(
    corpora: Sequence[Tuple[str, Iterable[str]]],
    vocab_size: int,
    seed: int = 0,
    max_sentences_per_corpus: Optional[int] = None,
) -> Vocab:
    """
    Induce a vocabulary of ``vocab_size`` pieces from ``(locale, sentences)`` pairs.

    Corpora are pooled in the order given. The most frequent adjacent pair is merged
    each round; equal counts go to the lexicographically smallest merged piece.
    ``seed`` only matters when ``max_sentences_per_corpus`` subsamples a corpus.
    """
    if not corpora:
        raise ArgumentError("no corpora given")
    rng = np.random.default_rng(seed)
    word_freq: Counter = Counter()
    alphabet = set()
    n_sentences = 0
    for locale, sentences in corpora:
        sentences = list(sentences)
        if max_sentences_per_corpus is not None and len(sentences) > max_sentences_per_corpus:
            keep = np.sort(rng.choice(len(sentences), size=max_sentences_per_corpus, replace=False))
            sentences = [sentences[i] for i in keep]
        for sentence in sentences:
            if not sentence:
                continue
            n_sentences += 1
            for word in _marked_words(sentence):
                for chunk in word.split(LITERAL_MARKER):
                    if chunk:
                        word_freq[chunk] += 1
                        alphabet.update(chunk)
        logger.debug(f"pooled corpus {locale}: {len(sentences)} sentences")
    if n_sentences == 0:
        raise ArgumentError("no nonempty sentence in any corpus")

    base = list(RESERVED) + sorted(alphabet)
    if vocab_size < len(base):
        raise ConfigurationError(
            f"vocab_size={vocab_size} is smaller than reserved + alphabet = {len(base)}"
        )

    pieces = list(base)
    known = set(pieces)
    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    symbols: List[List[str]] = [list(w) for w in words]

    pair_counts: Counter = Counter()
    where: Dict[Tuple[str, str], set] = defaultdict(set)
    for idx, syms in enumerate(symbols):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[idx]
            where[pair].add(idx)

    while len(pieces) < vocab_size:
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            logger.warning(f"merges exhausted at {len(pieces)} pieces (requested {vocab_size})")
            break
        best_count = max(c for c, _ in live)
        best = min((p for c, p in live if c == best_count), key=_pair_key)
        merged = best[0] + best[1]
        if merged not in known:
            pieces.append(merged)
            known.add(merged)

        # entries in `where` can be stale; re-counting a word that no longer
        # holds the pair nets to zero
        for idx in sorted(where.pop(best, ())):
            syms = symbols[idx]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= freqs[idx]
            out: List[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            symbols[idx] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += freqs[idx]
                where[pair].add(idx)
        pair_counts.pop(best, None)

    logger.info(f"trained vocab: {len(pieces)} pieces from {n_sentences} sentences, alphabet {len(alphabet)}")
    return Vocab(tuple(pieces))


def encode_words(text: str, vocab: Vocab) -> List[Tuple[int, ...]]:
    """Piece ids of each word of ``text``, in order."""
    out: List[Tuple[int, ...]] = []
    for word in _marked_words(text):
        ids: List[int] = []
        i = 0
        while i < len(word):
            for length in range(min(vocab.max_piece_len, len(word) - i), 0, -1):
                piece_id = vocab.ids.get(word[i : i + length])
                if piece_id is not None and piece_id >= len(RESERVED):
                    ids.append(piece_id)
                    i += length
                    break
            else:
                ids.append(UNK_ID)
                i += 1
        out.append(tuple(ids))
    return out


def encode(text: str, vocab: Vocab, language_tag: Optional[str] = None) -> TokenSeq:
    return TokenSeq(tuple(i for word in encode_words(text, vocab) for i in word), language_tag)


def decode_text(seq: TokenSeq, vocab: Vocab) -> str:
    parts = []
    for i in seq.ids:
        if not 0 <= i < vocab.size:
            raise ArgumentError(f"token id {i} outside vocab of size {vocab.size}")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        parts.append(vocab.pieces[i])
    return "".join(parts).replace(WORD_MARKER, " ")


def save_vocab(vocab: Vocab, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{VOCAB_FORMAT} {vocab.size}", *vocab.pieces]
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_vocab(path) -> Vocab:
    lines = Path(path).read_bytes().decode("utf-8").split("\n")
    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != VOCAB_FORMAT:
        raise ConfigurationError(f"{path}: not a {VOCAB_FORMAT} vocab file")
    size = int(header[1])
    pieces = lines[1 : 1 + size]
    if len(pieces) != size:
        raise ConfigurationError(f"{path}: header says {size} pieces, found {len(pieces)}")
    return Vocab(tuple(pieces))
