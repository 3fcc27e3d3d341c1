"""
Training loop for the MoE LM: sentence packing, Adafactor and the step loop.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.core_math import Tensor, check_finite, resolve_dtype
from src.corpus import read_manifest_sentences
from src.errors import ArgumentError, ConfigurationError, NumericError, TrainingDivergedError
from src.moe_lm import Checkpoint, MoeLm, MoeLmConfig, init_params, save_checkpoint
from src.tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenSeq, Vocab, encode

logger = logging.getLogger(__name__)


# --- Adafactor --------------------------------------------------------------

@dataclass(frozen=True)
class AdafactorHyper:
    beta1: float = 0.0
    beta2: float = 0.99
    decay_exponent: float = 0.8
    clip_threshold: float = 1.0
    factored_second_moment: bool = True
    eps1: float = 1e-30
    learning_rate: float = 0.01
    warmup_steps: int = 1000
    schedule: str = "inverse_sqrt"  # or "constant"

    def __post_init__(self):
        if self.clip_threshold <= 0:
            raise ConfigurationError("clip_threshold must be > 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 < self.beta2 <= 1.0:
            raise ConfigurationError(f"invalid betas ({self.beta1}, {self.beta2})")
        if self.schedule not in ("inverse_sqrt", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")

    def decay(self, t: int) -> float:
        """Second-moment decay at step t: 1 - t^-0.8, capped at beta2."""
        if t < 1:
            raise ArgumentError(f"step must be >= 1, got {t}")
        return min(self.beta2, 1.0 - t ** (-self.decay_exponent))

    def lr(self, t: int) -> float:
        if t < 1:
            raise ArgumentError(f"step must be >= 1, got {t}")
        if self.schedule == "constant" or self.warmup_steps == 0:
            return self.learning_rate
        w = self.warmup_steps
        return self.learning_rate * min(t / w, (w / t) ** 0.5)


@dataclass
class AdafactorState:
    slots: Dict[str, Dict[str, Tensor]] = field(default_factory=dict)

    def accumulator_size(self, name: str) -> int:
        return sum(a.size for k, a in self.slots.get(name, {}).items() if k != "momentum")


def _factored(hyper: AdafactorHyper, p: Tensor) -> bool:
    return hyper.factored_second_moment and p.ndim >= 2


def adafactor_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    t: int,
    hyper: AdafactorHyper,
    state: Optional[AdafactorState] = None,
) -> Tuple[Dict[str, Tensor], AdafactorState]:
    """
    One Adafactor update. Matrices (and stacked matrices) keep row/column
    second-moment means over their last two axes; other parameters keep a full
    second moment. Returns new params and the new state; inputs are not mutated.
    """
    if t < 1:
        raise ArgumentError(f"step must be >= 1, got {t}")
    state = state if state is not None else AdafactorState()
    decay = hyper.decay(t)
    lr = hyper.lr(t)
    new_params: Dict[str, Tensor] = {}
    new_slots: Dict[str, Dict[str, Tensor]] = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ArgumentError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        slots = state.slots.get(name)
        g2 = g * g + hyper.eps1
        if _factored(hyper, p):
            if slots is None:
                slots = {"row": np.zeros(p.shape[:-1], p.dtype), "col": np.zeros(p.shape[:-2] + p.shape[-1:], p.dtype)}
            row = decay * slots["row"] + (1.0 - decay) * g2.mean(axis=-1)
            col = decay * slots["col"] + (1.0 - decay) * g2.mean(axis=-2)
            v = row[..., :, None] * col[..., None, :] / row.mean(axis=-1)[..., None, None]
            fresh = {"row": row, "col": col}
        else:
            if slots is None:
                slots = {"full": np.zeros_like(p)}
            v = decay * slots["full"] + (1.0 - decay) * g2
            fresh = {"full": v}
        update = g / np.sqrt(v)
        rms = float(np.sqrt(np.mean(update * update)))
        update = update / max(1.0, rms / hyper.clip_threshold)
        if hyper.beta1 > 0.0:
            momentum = slots.get("momentum", np.zeros_like(p))
            update = hyper.beta1 * momentum + (1.0 - hyper.beta1) * update
            fresh["momentum"] = update
        new_params[name] = p - lr * update
        new_slots[name] = fresh
    return new_params, AdafactorState(new_slots)


# --- packing ----------------------------------------------------------------

@dataclass(frozen=True)
class PackedBatch:
    tokens: np.ndarray  # [B, L], PAD-filled
    segment_ids: np.ndarray  # [B, L], 0 on padding, 1.. per sentence
    loss_mask: np.ndarray  # [B, L], 1 where position t predicts t+1 inside one segment

    @property
    def num_predictions(self) -> int:
        return int(self.loss_mask.sum())


@dataclass
class PackingStats:
    truncated: int = 0
    sentences: int = 0
    rows: int = 0


def _rows_to_batch(rows: List[List[List[int]]], max_seq_len: int) -> PackedBatch:
    tokens = np.full((len(rows), max_seq_len), PAD_ID, dtype=np.int64)
    segs = np.zeros((len(rows), max_seq_len), dtype=np.int64)
    for r, row in enumerate(rows):
        pos = 0
        for s, seg in enumerate(row, start=1):
            tokens[r, pos : pos + len(seg)] = seg
            segs[r, pos : pos + len(seg)] = s
            pos += len(seg)
    mask = np.zeros_like(segs)
    mask[:, :-1] = (segs[:, :-1] != 0) & (segs[:, :-1] == segs[:, 1:])
    return PackedBatch(tokens, segs, mask)


def pack_batches(
    sentences: Iterable[TokenSeq],
    max_seq_len: int,
    packing_factor: int,
    batch_size: int,
    seed: int = 0,
    stats: Optional[PackingStats] = None,
    shuffle: bool = True,
) -> Iterator[PackedBatch]:
    """
    Greedy first-fit packing of BOS..EOS segments, at most ``packing_factor`` per row.

    Sentence order is a seeded permutation; rows are emitted in creation order.
    Sentences longer than a row are truncated (and counted in ``stats``).
    """
    if max_seq_len < 2 or packing_factor < 1 or batch_size < 1:
        raise ConfigurationError("max_seq_len >= 2, packing_factor >= 1 and batch_size >= 1 required")
    sentences = list(sentences)
    if not sentences:
        raise ArgumentError("no sentences to pack")
    stats = stats if stats is not None else PackingStats()
    order = np.random.default_rng(seed).permutation(len(sentences)) if shuffle else range(len(sentences))

    rows: List[List[List[int]]] = []
    fill: List[int] = []
    for i in order:
        seg = [BOS_ID, *sentences[i].ids, EOS_ID]
        if len(seg) > max_seq_len:
            stats.truncated += 1
            logger.warning(f"sentence of {len(seg)} tokens truncated to {max_seq_len}")
            seg = seg[: max_seq_len - 1] + [EOS_ID]
        stats.sentences += 1
        for r in range(len(rows)):
            if len(rows[r]) < packing_factor and fill[r] + len(seg) <= max_seq_len:
                rows[r].append(seg)
                fill[r] += len(seg)
                break
        else:
            rows.append([seg])
            fill.append(len(seg))
    stats.rows += len(rows)

    for start in range(0, len(rows), batch_size):
        yield _rows_to_batch(rows[start : start + batch_size], max_seq_len)


# --- training loop ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    seed: int = 0
    batch_size: int = 8
    packing_factor: int = 4
    seq_len: Optional[int] = None  # defaults to the model's max_seq_len
    precision: str = "float32"
    checkpoint_every: int = 0
    plateau_window: int = 500
    plateau_tolerance: float = 0.001

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        resolve_dtype(self.precision)


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)
    routing: List[Dict[int, np.ndarray]] = field(default_factory=list)

    def record(self, step, loss, ce, aux, tokens_per_sec, fractions):
        self.rows.append({"step": step, "loss": loss, "ce_loss": ce, "aux_loss": aux,
                          "tokens_per_sec": tokens_per_sec})
        self.routing.append({layer: f.copy() for layer, f in fractions.items()})

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["step", "loss", "ce_loss", "aux_loss", "tokens_per_sec"])

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame()[["step", "loss", "aux_loss", "tokens_per_sec"]].to_csv(path, index=False)
        return path

    def routing_histogram(self, last: Optional[int] = None) -> Dict[int, np.ndarray]:
        """Mean per-expert routing fraction per MoE layer over the last ``last`` steps."""
        window = self.routing[-last:] if last else self.routing
        layers = sorted({layer for step in window for layer in step})
        return {layer: np.mean([step[layer] for step in window if layer in step], axis=0) for layer in layers}

    def top2_share(self, layer: int, last: Optional[int] = None) -> float:
        """Share of routing mass held by the two busiest experts of ``layer``."""
        hist = self.routing_histogram(last)[layer]
        return float(np.sort(hist)[-2:].sum() / hist.sum())


def train_on_sentences(
    sentences: Sequence[TokenSeq],
    config: MoeLmConfig,
    hyper: AdafactorHyper,
    train_cfg: TrainConfig,
    output_dir=None,
    vocab: Optional[Vocab] = None,
    init: Optional[Dict[str, Tensor]] = None,
) -> Tuple[Checkpoint, TrainLog]:
    seq_len = train_cfg.seq_len or config.max_seq_len
    if seq_len > config.max_seq_len:
        raise ConfigurationError(f"seq_len {seq_len} exceeds model max_seq_len {config.max_seq_len}")
    if not sentences:
        raise ArgumentError("empty training corpus")
    dtype = resolve_dtype(train_cfg.precision)
    params = ({n: np.array(p, dtype=dtype) for n, p in init.items()} if init is not None
              else init_params(config, train_cfg.seed, train_cfg.precision))
    state = AdafactorState()
    log = TrainLog()
    digest = vocab.digest() if vocab is not None else None
    output_dir = Path(output_dir) if output_dir is not None else None

    def batches():
        epoch = 0
        while True:
            yield from pack_batches(sentences, seq_len, train_cfg.packing_factor,
                                    train_cfg.batch_size, seed=train_cfg.seed + epoch)
            epoch += 1

    logger.info(f"training {train_cfg.steps} steps on {len(sentences)} sentences "
                f"(layers={config.num_layers}, d={config.model_dim}, experts={config.num_experts})")
    stream = batches()
    step = 0
    progress = tqdm(range(1, train_cfg.steps + 1), desc="train", leave=False)
    for step in progress:
        batch = next(stream)
        t0 = time.perf_counter()
        model = MoeLm(config, params)
        loss, ce, aux, grads, fractions = model.loss_and_grads(batch.tokens, batch.segment_ids, batch.loss_mask)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        params, state = adafactor_step(params, grads, step, hyper, state)
        elapsed = max(time.perf_counter() - t0, 1e-9)
        log.record(step, loss, ce, aux, batch.num_predictions / elapsed, fractions)
        progress.set_postfix(loss=f"{loss:.4f}", aux=f"{aux:.3f}")

        if output_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(Checkpoint.from_params(config, params, step, digest), output_dir / f"step{step:06d}")
        if _plateaued(log.losses, train_cfg.plateau_window, train_cfg.plateau_tolerance):
            logger.info(f"loss plateaued at step {step}; stopping")
            break
    progress.close()

    for name, p in params.items():
        check_finite(p, f"parameter {name}")
    checkpoint = Checkpoint.from_params(config, params, step, digest)
    if log.rows:
        logger.info(f"finished at step {step}: loss {log.rows[0]['loss']:.4f} -> {log.rows[-1]['loss']:.4f}")
    return checkpoint, log


def _plateaued(losses: List[float], window: int, tolerance: float) -> bool:
    if window < 1 or len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    cur = float(np.mean(losses[-window:]))
    return (prev - cur) / abs(prev) < tolerance


def train(
    manifest,
    vocab: Vocab,
    config: MoeLmConfig,
    hyper: AdafactorHyper,
    train_cfg: TrainConfig,
    output_dir=None,
) -> Tuple[Checkpoint, TrainLog]:
    """Encode every corpus in ``manifest`` with ``vocab`` (pooled, no language id) and train."""
    if config.vocab_size != vocab.size:
        raise ConfigurationError(f"model vocab_size {config.vocab_size} != tokenizer vocab {vocab.size}")
    sentences = [encode(text, vocab, locale) for locale, text in read_manifest_sentences(manifest)]
    sentences = [s for s in sentences if len(s)]
    if not sentences:
        raise ArgumentError("corpus manifest contains no sentences")
    return train_on_sentences(sentences, config, hyper, train_cfg, output_dir, vocab)
