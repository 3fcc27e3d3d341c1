"""
Shallow-fusion beam search.

Each step adds ``log p_e2e(y_t | y_<t, x) + lambda * log p_lm(y_t | y_<t)`` to a
hypothesis, so the sequence-level fused score is the sum of per-token fused
scores. The E2E side is a pluggable posterior source: a prefix-independent
lattice of per-step log-distributions, or a small autoregressive model.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.core_math import NORMALIZATION_TOL, Tensor, check_finite, logsumexp
from src.corpus import DECODE_COLUMNS
from src.errors import ArgumentError, ConfigurationError, OracleTooLargeError
from src.moe_lm import Checkpoint, LmState, MoeLm, initial_state, lm_forward, lm_score_step
from src.tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenSeq, Vocab, decode_text

logger = logging.getLogger(__name__)

LOG_FLOOR = -1e9
ORACLE_LIMIT = 10**6
LATTICE_TEXT = "lat1"
LATTICE_BINARY = "lat1b"


@dataclass(frozen=True)
class FusionConfig:
    lam: float
    beam_size: int = 8
    max_len: int = 32  # non-EOS tokens; the step after that may only emit EOS
    n_best: int = 1
    length_normalization: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError("beam_size must be >= 1")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigurationError(f"lambda must be a finite value >= 0, got {self.lam}")
        if not 1 <= self.n_best <= self.beam_size:
            raise ConfigurationError(f"n_best must be in [1, beam_size], got {self.n_best}")
        if self.max_len < 0:
            raise ConfigurationError("max_len must be >= 0")


# --- posterior sources ------------------------------------------------------

class PosteriorSource:
    """E2E posterior p(y | x) over the shared vocabulary."""

    vocab_size: int

    def max_steps(self) -> Optional[int]:
        raise NotImplementedError

    def step(self, prefix: Sequence[int], step: int) -> Tensor:
        raise NotImplementedError


class LatticeSource(PosteriorSource):
    """Per-step log-distributions [T, V]; the prefix is ignored."""

    def __init__(self, frames: Tensor, vocab: Optional[Vocab] = None):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ArgumentError(f"lattice must be a non-empty [T, V] array, got shape {frames.shape}")
        if vocab is not None and frames.shape[1] != vocab.size:
            raise ConfigurationError(f"lattice width {frames.shape[1]} != vocab size {vocab.size}")
        frames = np.maximum(frames, LOG_FLOOR)
        check_finite(frames, "lattice")
        norms = logsumexp(frames, axis=-1)
        if np.max(np.abs(norms)) > NORMALIZATION_TOL[np.dtype(np.float32)]:
            raise ArgumentError(f"lattice rows are not normalized (max |logsumexp| = {np.max(np.abs(norms)):.2e})")
        self.frames = frames
        self.vocab_size = frames.shape[1]
        self.vocab = vocab

    def max_steps(self) -> int:
        return self.frames.shape[0]

    def step(self, prefix, step):
        if not 0 <= step < self.frames.shape[0]:
            raise ArgumentError(f"step {step} outside lattice of {self.frames.shape[0]} frames")
        return self.frames[step]


class ModelSource(PosteriorSource):
    """A small autoregressive decoder checkpoint scored on BOS + prefix."""

    def __init__(self, model: Union[MoeLm, Checkpoint], vocab: Optional[Vocab] = None):
        self.model = model if isinstance(model, MoeLm) else MoeLm.from_checkpoint(model)
        self.vocab_size = self.model.config.vocab_size
        if vocab is not None and vocab.size != self.vocab_size:
            raise ConfigurationError(f"model vocab {self.vocab_size} != vocab size {vocab.size}")
        self.vocab = vocab

    def max_steps(self) -> int:
        return self.model.config.max_seq_len

    def step(self, prefix, step):
        if len(prefix) + 1 > self.model.config.max_seq_len:
            raise ArgumentError(f"prefix of {len(prefix)} tokens exceeds model length")
        log_probs, _ = lm_forward([BOS_ID, *prefix], self.model)
        return np.maximum(log_probs[-1], LOG_FLOOR)


def e2e_step(source: PosteriorSource, prefix: Union[TokenSeq, Sequence[int]], step: int) -> Tensor:
    ids = tuple(prefix.ids) if isinstance(prefix, TokenSeq) else tuple(prefix)
    return source.step(ids, step)


def fuse(e2e_lp: float, lm_lp: float, lam: float) -> float:
    return e2e_lp + lam * lm_lp


# --- hypotheses -------------------------------------------------------------

@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    e2e_logprob: float = 0.0
    lm_logprob: float = 0.0
    combined: float = 0.0
    lm_state: Optional[LmState] = field(default=None, repr=False, compare=False)
    lm_next: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID

    @property
    def words(self) -> Tuple[int, ...]:
        return self.tokens[:-1] if self.finished else self.tokens

    def score(self, length_normalization: bool = False) -> float:
        if length_normalization and self.tokens:
            return self.combined / len(self.tokens)
        return self.combined


def _check_vocab(source: PosteriorSource, lm: Optional[MoeLm], vocab: Optional[Vocab]):
    if lm is None:
        return
    if lm.config.vocab_size != source.vocab_size:
        raise ConfigurationError(
            f"LM vocab size {lm.config.vocab_size} != posterior source vocab size {source.vocab_size}"
        )
    vocab = vocab if vocab is not None else getattr(source, "vocab", None)
    digest = getattr(lm, "vocab_digest", None)
    if vocab is not None and digest is not None and digest != vocab.digest():
        raise ConfigurationError("LM checkpoint was trained with a different vocabulary")


def _as_lm(lm) -> Optional[MoeLm]:
    if lm is None or isinstance(lm, MoeLm):
        return lm
    model = MoeLm.from_checkpoint(lm)
    model.vocab_digest = lm.vocab_digest
    return model


def _step_limit(source: PosteriorSource, cfg_max_len: int, lm: Optional[MoeLm] = None) -> int:
    steps = source.max_steps()
    if steps is not None and steps < 1:
        raise ArgumentError("empty lattice")
    limit = cfg_max_len if steps is None else min(cfg_max_len, steps - 1)
    if lm is not None:
        limit = min(limit, lm.config.max_seq_len - 1)
    return limit


def _emittable(vocab_size: int, force_eos: bool) -> np.ndarray:
    if force_eos:
        return np.array([EOS_ID])
    return np.array([v for v in range(vocab_size) if v not in (PAD_ID, BOS_ID)])


def beam_search_fusion(
    source: PosteriorSource,
    lm,
    cfg: FusionConfig,
    vocab: Optional[Vocab] = None,
) -> List[Hypothesis]:
    """
    Beam search over the fused score. ``lm=None`` decodes with the E2E source only.

    Returns up to ``n_best`` finished hypotheses, best first; equal scores are
    ordered by the lexicographically smaller token sequence.
    """
    lm = _as_lm(lm)
    _check_vocab(source, lm, vocab)
    limit = _step_limit(source, cfg.max_len, lm)

    start = Hypothesis(tokens=())
    if lm is not None:
        state, nxt = lm_score_step(initial_state(lm), BOS_ID, lm)
        start = Hypothesis((), lm_state=state, lm_next=np.maximum(nxt, LOG_FLOOR))

    beam = [start]
    finished: List[Hypothesis] = []
    for step in range(limit + 1):
        allowed = _emittable(source.vocab_size, force_eos=step == limit)
        # live hypotheses all have `step` tokens, so ordering parents
        # lexicographically and then by token id orders the extended sequences
        beam.sort(key=lambda h: h.tokens)
        e_rows, l_rows = [], []
        for hyp in beam:
            e2e = np.maximum(e2e_step(source, hyp.tokens, step), LOG_FLOOR)[allowed]
            lm_lp = hyp.lm_next[allowed] if hyp.lm_next is not None else np.zeros(len(allowed))
            e_rows.append(hyp.e2e_logprob + e2e)
            l_rows.append(hyp.lm_logprob + lm_lp)
        e_tot, l_tot = np.stack(e_rows), np.stack(l_rows)
        combined = fuse(e_tot, l_tot, cfg.lam)
        parent_idx, token_idx = np.indices(combined.shape)
        order = np.lexsort((token_idx.ravel(), parent_idx.ravel(), -combined.ravel()))

        beam_prev, beam = beam, []
        for flat in order[: cfg.beam_size]:
            r, c = divmod(int(flat), len(allowed))
            parent = beam_prev[r]
            tokens = parent.tokens + (int(allowed[c]),)
            e_total, l_total = float(e_tot[r, c]), float(l_tot[r, c])
            hyp = Hypothesis(tokens, e_total, l_total, fuse(e_total, l_total, cfg.lam), parent.lm_state, None)
            if tokens[-1] == EOS_ID:
                finished.append(hyp)
                continue
            if lm is not None:
                state, nxt = lm_score_step(parent.lm_state, tokens[-1], lm)
                hyp = Hypothesis(tokens, e_total, l_total, hyp.combined, state, np.maximum(nxt, LOG_FLOOR))
            beam.append(hyp)
        if not beam:
            break

    finished.sort(key=lambda h: (-h.score(cfg.length_normalization), h.tokens))
    return finished[: cfg.n_best]


def exhaustive_oracle(source: PosteriorSource, lm, lam: float, max_len: int,
                      vocab: Optional[Vocab] = None) -> Hypothesis:
    """True argmax of the fused score over every EOS-terminated sequence of at most ``max_len`` tokens + EOS."""
    lm = _as_lm(lm)
    _check_vocab(source, lm, vocab)
    limit = _step_limit(source, max_len, lm)
    symbols = [int(v) for v in _emittable(source.vocab_size, False) if v != EOS_ID]
    size = sum(len(symbols) ** n for n in range(limit + 1))
    if size > ORACLE_LIMIT:
        raise OracleTooLargeError(size, ORACLE_LIMIT)

    best: Optional[Hypothesis] = None
    for n in range(limit + 1):
        for body in itertools.product(symbols, repeat=n):
            tokens = body + (EOS_ID,)
            e_total = sum(float(np.maximum(e2e_step(source, tokens[:i], i), LOG_FLOOR)[t])
                          for i, t in enumerate(tokens))
            l_total = 0.0
            if lm is not None:
                log_probs, _ = lm_forward((BOS_ID,) + tokens[:-1], lm)
                l_total = sum(float(max(log_probs[i, t], LOG_FLOOR)) for i, t in enumerate(tokens))
            hyp = Hypothesis(tokens, e_total, l_total, fuse(e_total, l_total, lam))
            if best is None or (-hyp.combined, hyp.tokens) < (-best.combined, best.tokens):
                best = hyp
    return best


# --- lattice files ----------------------------------------------------------

def write_lattice(frames: Tensor, path, binary: bool = False) -> Path:
    frames = np.asarray(frames, dtype=np.float64)
    t, v = frames.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"{LATTICE_BINARY} {t} {v}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    else:
        lines = [f"{LATTICE_TEXT} {t} {v}"] + [" ".join(repr(float(x)) for x in row) for row in frames]
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_lattice(path, vocab: Optional[Vocab] = None) -> LatticeSource:
    raw = Path(path).read_bytes()
    header, _, body = raw.partition(b"\n")
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) != 3 or parts[0] not in (LATTICE_TEXT, LATTICE_BINARY):
        raise ArgumentError(f"{path}: not a lattice file")
    t, v = int(parts[1]), int(parts[2])
    if t == 0:
        raise ArgumentError(f"{path}: empty lattice")
    if parts[0] == LATTICE_BINARY:
        if len(body) != 4 * t * v:
            raise ArgumentError(f"{path}: truncated binary lattice")
        frames = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(t, v)
        # float32 storage: renormalize rows in float64
        frames = frames - logsumexp(frames, axis=-1)[:, None]
    else:
        rows = [line.split() for line in body.decode("ascii").split("\n") if line.strip()]
        frames = np.array(rows, dtype=np.float64)
        if frames.shape != (t, v):
            raise ArgumentError(f"{path}: header says {t}x{v}, body is {frames.shape}")
    return LatticeSource(frames, vocab)


# --- batch decoding ---------------------------------------------------------

def _decode_one(utt_id: str, source: PosteriorSource, lm, cfg: FusionConfig,
                vocab: Optional[Vocab]) -> dict:
    best = beam_search_fusion(source, lm, cfg, vocab)[0]
    text = decode_text(TokenSeq(best.tokens), vocab) if vocab is not None else " ".join(map(str, best.words))
    return {"utt_id": utt_id, "hyp_text": text, "e2e_lp": best.e2e_logprob,
            "lm_lp": best.lm_logprob, "combined": best.combined}


def decode_utterances(
    jobs: Sequence[Tuple[str, PosteriorSource]],
    lm,
    cfg: FusionConfig,
    vocab: Optional[Vocab] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Decode ``(utt_id, source)`` pairs; rows come back in input order for any ``n_jobs``."""
    lm = _as_lm(lm)
    if n_jobs == 1 or len(jobs) < 2:
        rows = [_decode_one(u, s, lm, cfg, vocab) for u, s in jobs]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_decode_one)(u, s, lm, cfg, vocab) for u, s in jobs)
    logger.info(f"decoded {len(rows)} utterances (lambda={cfg.lam}, beam={cfg.beam_size}, jobs={n_jobs})")
    return pd.DataFrame(rows, columns=DECODE_COLUMNS)


def write_decodes(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = df[DECODE_COLUMNS].copy()
    for col in ("e2e_lp", "lm_lp", "combined"):
        out[col] = out[col].map(lambda x: f"{x:.6f}")
    out.to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE)
    return path


def read_lattice_index(lattice_dir) -> pd.DataFrame:
    """``index.tsv`` in a lattice directory: ``utt_id<TAB>locale<TAB>file``."""
    path = Path(lattice_dir) / "index.tsv"
    if not path.is_file():
        raise ArgumentError(f"{lattice_dir}: no index.tsv")
    try:
        index = pd.read_csv(path, sep="\t", header=None, names=["utt_id", "locale", "file"], dtype=str,
                            quoting=csv.QUOTE_NONE, keep_default_na=False)
    except pd.errors.EmptyDataError:
        index = pd.DataFrame()
    if index.empty:
        raise ArgumentError(f"{path}: no utterances listed")
    return index
