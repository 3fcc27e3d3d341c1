"""
Synthetic long-tail test set.

Each locale gets an invented lexicon: common words, carrier words and rare
entities, each entity paired with a near-homophone one letter away. Transcripts
use the homophones in ordinary contexts; the text-only corpus places every entity
right after its carrier word. Test lattices put slightly more mass on the
homophone than on the entity, so the E2E side alone misrecognizes entities and
an LM that learned the carrier context can repair them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.corpus import read_corpora, write_corpus, write_manifest, write_utterances
from src.fusion_decoder import write_lattice
from src.tokenizer import EOS_ID, Vocab, encode_words, save_vocab, train_wordpiece

logger = logging.getLogger(__name__)

ALPHABETS = {
    "aa-AA": ("bdgklmnprst", "aeiou"),
    "bb-BB": ("fhjvwzcq", "aeiy"),
}
REF_MASS = 0.9
HOMOPHONE_MASS = 0.45
ENTITY_MASS = 0.40


@dataclass(frozen=True)
class Lexicon:
    common: Tuple[str, ...]
    carriers: Tuple[str, ...]
    entities: Tuple[str, ...]
    homophones: Tuple[str, ...]


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_common: int = 16
    n_entities: int = 6
    text_sentences: int = 400
    transcript_sentences: int = 200
    test_utterances: int = 12
    vocab_size: int = 4096
    binary_lattices: bool = False


def _word(rng, consonants, vowels, syllables) -> str:
    return "".join(rng.choice(list(consonants)) + rng.choice(list(vowels)) for _ in range(syllables))


def make_lexicon(rng: np.random.Generator, consonants: str, vowels: str, cfg: SyntheticConfig) -> Lexicon:
    seen = set()

    def fresh(syllables):
        while True:
            w = _word(rng, consonants, vowels, syllables)
            if w not in seen:
                seen.add(w)
                return w

    common = tuple(fresh(int(rng.integers(1, 3))) for _ in range(cfg.n_common))
    carriers = tuple(fresh(2) for _ in range(cfg.n_entities))
    entities = tuple(fresh(3) for _ in range(cfg.n_entities))
    homophones = []
    for e in entities:
        while True:
            pos = int(rng.integers(0, len(e) // 2)) * 2 + 1  # a vowel slot
            alt = e[:pos] + rng.choice([v for v in vowels if v != e[pos]]) + e[pos + 1 :]
            if alt not in seen:
                seen.add(alt)
                homophones.append(alt)
                break
    return Lexicon(common, carriers, entities, tuple(homophones))


def _pick(rng, words, n=1) -> List[str]:
    return [words[int(i)] for i in rng.integers(0, len(words), size=n)]


def entity_sentence(rng, lex: Lexicon) -> str:
    i = int(rng.integers(0, len(lex.entities)))
    return " ".join(_pick(rng, lex.common, 2) + [lex.carriers[i], lex.entities[i]] + _pick(rng, lex.common))


def transcript_sentence(rng, lex: Lexicon) -> str:
    words = _pick(rng, lex.common, 4)
    if rng.random() < 0.5:
        words[int(rng.integers(1, 4))] = _pick(rng, lex.homophones)[0]
    if rng.random() < 0.3:
        words[1] = _pick(rng, lex.carriers)[0]
        words[2] = _pick(rng, lex.common)[0]
    return " ".join(words)


def lattice_frames(ids: List[int], confusions: Dict[int, int], vocab_size: int) -> np.ndarray:
    """One row per reference token plus a final EOS row, as log-probabilities."""
    targets = list(ids) + [EOS_ID]
    frames = np.zeros((len(targets), vocab_size), dtype=np.float64)
    for t, ref in enumerate(targets):
        row = np.zeros(vocab_size)
        if t in confusions:
            row[confusions[t]] = HOMOPHONE_MASS
            row[ref] = ENTITY_MASS
        else:
            row[ref] = REF_MASS
        rest = row == 0
        row[rest] = (1.0 - row.sum()) / rest.sum()
        frames[t] = np.log(row)
    return frames


def generate(out_dir, cfg: SyntheticConfig = SyntheticConfig(), vocab: Optional[Vocab] = None) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    manifest_rows = []
    lexicons: Dict[str, Lexicon] = {}
    for locale, (consonants, vowels) in ALPHABETS.items():
        lex = make_lexicon(rng, consonants, vowels, cfg)
        lexicons[locale] = lex
        transcripts = [transcript_sentence(rng, lex) for _ in range(cfg.transcript_sentences)]
        texts = [entity_sentence(rng, lex) for _ in range(cfg.text_sentences)]
        write_corpus(transcripts, out_dir / "corpora" / f"{locale}.transcripts.txt")
        write_corpus(texts, out_dir / "corpora" / f"{locale}.text.txt")
        manifest_rows.append((locale, f"corpora/{locale}.transcripts.txt", "transcript"))
        manifest_rows.append((locale, f"corpora/{locale}.text.txt", "text"))
    manifest = write_manifest(manifest_rows, out_dir / "manifest.tsv")

    if vocab is None:
        vocab = train_wordpiece(read_corpora(manifest), cfg.vocab_size, seed=cfg.seed)
    vocab_path = save_vocab(vocab, out_dir / "vocab.txt")

    refs, index = [], []
    suffix = "lat1b" if cfg.binary_lattices else "lat"
    for locale, lex in lexicons.items():
        alt_of = dict(zip(lex.entities, lex.homophones))
        for n in range(cfg.test_utterances):
            utt_id = f"{locale}-{n:04d}"
            text = entity_sentence(rng, lex)
            ids, confusions = _confusable_ids(text, alt_of, vocab)
            path = write_lattice(lattice_frames(ids, confusions, vocab.size),
                                 out_dir / "lattices" / f"{utt_id}.{suffix}", binary=cfg.binary_lattices)
            refs.append({"utt_id": utt_id, "locale": locale, "text": text})
            index.append({"utt_id": utt_id, "locale": locale, "file": path.name})
    refs_path = write_utterances(pd.DataFrame(refs), out_dir / "refs.tsv")
    index_path = out_dir / "lattices" / "index.tsv"
    pd.DataFrame(index).to_csv(index_path, sep="\t", header=False, index=False)
    logger.info(f"synthetic set: {len(refs)} utterances over {len(lexicons)} locales in {out_dir}")
    return {"manifest": manifest, "vocab": vocab_path, "refs": refs_path, "lattices": index_path.parent}


def _confusable_ids(text: str, alt_of: Dict[str, str], vocab: Vocab) -> Tuple[List[int], Dict[int, int]]:
    """Token ids of ``text`` and, per single-piece entity, its position -> homophone piece id."""
    words = text.split(" ")
    pieces = encode_words(text, vocab)
    ids: List[int] = []
    confusions: Dict[int, int] = {}
    for i, (word, word_ids) in enumerate(zip(words, pieces)):
        if word in alt_of and len(word_ids) == 1:
            swapped = encode_words(" ".join(words[:i] + [alt_of[word]] + words[i + 1 :]), vocab)[i]
            if len(swapped) == 1:
                confusions[len(ids)] = swapped[0]
        ids.extend(word_ids)
    return ids, confusions
