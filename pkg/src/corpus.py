from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import pandas as pd

from src.errors import ArgumentError

UTTERANCE_COLUMNS = ["utt_id", "locale", "text"]
DECODE_COLUMNS = ["utt_id", "hyp_text", "e2e_lp", "lm_lp", "combined"]
CORPUS_KINDS = ("transcript", "text")


@dataclass(frozen=True)
class CorpusManifest:
    """
    Multi-corpus manifest: TSV of ``locale<TAB>path`` with an optional third
    ``kind`` column (``transcript`` for speech-text transcripts, ``text`` for
    text-only data). Relative paths resolve against the manifest's directory.
    """
    path: Path

    def entries(self) -> pd.DataFrame:
        df = _read_tsv(self.path, None)
        if df.shape[1] not in (2, 3):
            raise ArgumentError(f"{self.path}: expected 2 or 3 columns, found {df.shape[1]}")
        df.columns = ["locale", "path", "kind"][: df.shape[1]]
        if "kind" not in df:
            df["kind"] = "text"
        bad = sorted(set(df["kind"]) - set(CORPUS_KINDS))
        if bad:
            raise ArgumentError(f"{self.path}: unknown corpus kind(s) {bad}")
        base = Path(self.path).parent
        df["path"] = [str(p if Path(p).is_absolute() else base / p) for p in df["path"]]
        return df


def _read_tsv(path, names) -> pd.DataFrame:
    try:
        return pd.read_csv(path, sep="\t", header=None, names=names, dtype=str,
                           quoting=csv.QUOTE_NONE, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def read_corpus(path) -> List[str]:
    """One sentence per line, UTF-8; blank lines are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.rstrip("\r") for line in text.split("\n") if line.rstrip("\r")]


def write_corpus(sentences, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(s + "\n" for s in sentences), encoding="utf-8")
    return path


def read_corpora(manifest) -> List[Tuple[str, List[str]]]:
    manifest = manifest if isinstance(manifest, CorpusManifest) else CorpusManifest(Path(manifest))
    entries = manifest.entries()
    if entries.empty:
        raise ArgumentError(f"{manifest.path}: manifest lists no corpora")
    return [(row.locale, read_corpus(row.path)) for row in entries.itertuples(index=False)]


def read_manifest_sentences(manifest) -> List[Tuple[str, str]]:
    return [(locale, s) for locale, sentences in read_corpora(manifest) for s in sentences]


def write_manifest(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE)
    return path


def read_utterances(path) -> pd.DataFrame:
    """``utt_id<TAB>locale<TAB>text`` files (references and hypotheses)."""
    df = _read_tsv(path, None)
    if df.empty:
        return pd.DataFrame(columns=UTTERANCE_COLUMNS)
    if df.shape[1] == len(UTTERANCE_COLUMNS):
        df.columns = UTTERANCE_COLUMNS
        return df
    raise ArgumentError(f"{path}: expected {len(UTTERANCE_COLUMNS)} tab-separated columns, found {df.shape[1]}")


def write_utterances(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df[UTTERANCE_COLUMNS].to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE)
    return path


def read_hypotheses(path, refs: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """
    Read hypotheses either as ``utt_id<TAB>locale<TAB>text`` or as decoder output
    (``utt_id<TAB>hyp_text<TAB>e2e_lp<TAB>lm_lp<TAB>combined``; locale then comes
    from ``refs``).
    """
    df = _read_tsv(path, None)
    if df.empty:
        return pd.DataFrame(columns=UTTERANCE_COLUMNS)
    if df.shape[1] == len(UTTERANCE_COLUMNS):
        df.columns = UTTERANCE_COLUMNS
        return df
    if df.shape[1] == len(DECODE_COLUMNS):
        df.columns = DECODE_COLUMNS
        if refs is None:
            raise ArgumentError(f"{path}: decoder output needs a reference file for locales")
        locales = dict(zip(refs["utt_id"], refs["locale"]))
        return pd.DataFrame({"utt_id": df["utt_id"], "locale": df["utt_id"].map(locales),
                             "text": df["hyp_text"]})
    raise ArgumentError(f"{path}: unrecognized hypothesis format ({df.shape[1]} columns)")
