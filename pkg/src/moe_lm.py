"""
Decoder-only transformer LM whose feed-forward block is a mixture of experts in
every other layer.

Layers alternate dense FFN (even index) and MoE FFN (odd index). Each token is
routed independently to its top-k experts; the combine weights are the softmax of
all expert logits restricted to the chosen k and renormalized. There is no expert
capacity limit and no token is dropped.

All math is numpy with hand-written backward passes (see ``loss_and_grads``).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from src.core_math import Tensor, check_finite, gelu, gelu_grad, log_softmax, resolve_dtype
from src.errors import (
    ArgumentError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
)
from src.tokenizer import BOS_ID, TokenSeq

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MASK_VALUE = -1e30
LN_EPS = 1e-5
ROUTING_MODES = ("topk", "dense")


@dataclass(frozen=True)
class MoeLmConfig:
    num_layers: int = 12
    model_dim: int = 768
    num_heads: int = 12
    head_dim: int = 64
    ffn_multiplier: int = 4
    num_experts: int = 64
    experts_per_token: int = 2
    vocab_size: int = 16384
    max_seq_len: int = 1024
    moe_layer_stride: int = 2
    aux_loss_weight: float = 0.01
    tied_embeddings: bool = True
    # "dense" evaluates every expert with full-softmax weights; equals "topk" when k == E
    routing: str = "topk"

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "head_dim", "ffn_multiplier",
                     "num_experts", "experts_per_token", "vocab_size", "max_seq_len",
                     "moe_layer_stride"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.experts_per_token > self.num_experts:
            raise ConfigurationError(
                f"experts_per_token={self.experts_per_token} exceeds num_experts={self.num_experts}"
            )
        if self.aux_loss_weight < 0:
            raise ConfigurationError("aux_loss_weight must be >= 0")
        if self.routing not in ROUTING_MODES:
            raise ConfigurationError(f"routing must be one of {ROUTING_MODES}, got {self.routing!r}")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_multiplier * self.model_dim

    @property
    def attn_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def active_experts(self) -> int:
        return self.num_experts if self.routing == "dense" else self.experts_per_token

    def is_moe_layer(self, layer: int) -> bool:
        return layer % self.moe_layer_stride == self.moe_layer_stride - 1

    @property
    def moe_layers(self) -> List[int]:
        return [i for i in range(self.num_layers) if self.is_moe_layer(i)]


PRESETS: Dict[str, MoeLmConfig] = {
    "glam-64e": MoeLmConfig(),
    "glam-2e": MoeLmConfig(num_experts=2),
    # dense stand-ins for the 140M / 640M Conformer LMs
    "dense-140m": MoeLmConfig(num_experts=1, experts_per_token=1),
    "dense-640m": MoeLmConfig(num_layers=24, model_dim=1280, num_heads=20,
                              num_experts=1, experts_per_token=1),
    "tiny": MoeLmConfig(num_layers=2, model_dim=16, num_heads=2, head_dim=8,
                        num_experts=4, vocab_size=64, max_seq_len=64),
}


def config_from_dict(values: dict) -> MoeLmConfig:
    return MoeLmConfig(**values)


# --- parameters -------------------------------------------------------------

def param_shapes(config: MoeLmConfig) -> Dict[str, Tuple[int, ...]]:
    d, a, f = config.model_dim, config.attn_dim, config.ffn_dim
    e, v = config.num_experts, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.num_layers):
        p = f"layer{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.wq": (d, a), f"{p}.attn.wk": (d, a),
            f"{p}.attn.wv": (d, a), f"{p}.attn.wo": (a, d),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
        })
        if config.is_moe_layer(i):
            shapes.update({
                f"{p}.moe.gate": (d, e),
                f"{p}.moe.w1": (e, d, f), f"{p}.moe.b1": (e, f),
                f"{p}.moe.w2": (e, f, d), f"{p}.moe.b2": (e, d),
            })
        else:
            shapes.update({
                f"{p}.ffn.w1": (d, f), f"{p}.ffn.b1": (f,),
                f"{p}.ffn.w2": (f, d), f"{p}.ffn.b2": (d,),
            })
    shapes.update({"final_ln.gain": (d,), "final_ln.bias": (d,)})
    if not config.tied_embeddings:
        shapes["out_proj"] = (d, v)
    return shapes


def init_params(config: MoeLmConfig, seed: int = 0, precision: str = "float64") -> Dict[str, Tensor]:
    """Truncated-normal init with std 1/sqrt(fan_in); LayerNorm gains 1, biases 0."""
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(("bias", ".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            # the tied table doubles as the output projection, so it starts small
            std = 1.0 / config.model_dim if name == "embed" else 1.0 / math.sqrt(shape[-2])
            draw = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
            params[name] = (std * draw).astype(dtype)
    return params


# --- routing ----------------------------------------------------------------

@dataclass(frozen=True)
class GateOutput:
    expert_indices: np.ndarray  # [..., k], descending gate logit
    combine_weights: np.ndarray  # [..., k], sums to 1
    all_gate_logits: np.ndarray  # [..., E]


def _route(x: Tensor, gate_matrix: Tensor, k: int, routing: str = "topk") -> GateOutput:
    logits = x @ gate_matrix
    num_experts = gate_matrix.shape[1]
    if routing == "dense":
        idx = np.broadcast_to(np.arange(num_experts), logits.shape).copy()
    else:
        # stable sort on negated logits: ties keep the lower expert index first
        idx = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(logits, idx, axis=-1)
    # the full softmax renormalized over the chosen set equals a softmax over the chosen logits
    shifted = chosen - chosen.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    w = w / w.sum(axis=-1, keepdims=True)
    return GateOutput(expert_indices=idx, combine_weights=w, all_gate_logits=logits)


def gate_topk(token_repr: Tensor, gate_matrix: Tensor, k: int) -> GateOutput:
    token_repr = np.asarray(token_repr)
    gate_matrix = np.asarray(gate_matrix)
    if k > gate_matrix.shape[1]:
        raise ConfigurationError(f"k={k} exceeds number of experts {gate_matrix.shape[1]}")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    return _route(token_repr, gate_matrix, k)


# --- building blocks with backward ------------------------------------------

def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv = cache
    n = xhat.shape[-1]
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _ffn(x, w1, b1, w2, b2):
    h = x @ w1 + b1
    a = gelu(h)
    return a @ w2 + b2, (x, h, a)


def _ffn_backward(dy, cache, w1, w2):
    x, h, a = cache
    dw2 = a.T @ dy
    db2 = dy.sum(axis=0)
    dh = (dy @ w2.T) * gelu_grad(h)
    dw1 = x.T @ dh
    db1 = dh.sum(axis=0)
    return dh @ w1.T, dw1, db1, dw2, db2


@dataclass
class MoeCache:
    x: Tensor
    gate: GateOutput
    probs: Tensor
    token_mask: Tensor
    per_expert: List[Optional[tuple]]
    load: Tensor
    num_valid: float


def _moe_forward(x, gate, w1, b1, w2, b2, k, routing="topk", token_mask=None):
    """x: [N, d]. Returns (y, aux_loss, cache)."""
    n_tokens = x.shape[0]
    num_experts = gate.shape[1]
    g = _route(x, gate, k, routing)
    logits = g.all_gate_logits
    probs = np.exp(log_softmax(logits))
    mask = np.ones(n_tokens, dtype=x.dtype) if token_mask is None else token_mask.astype(x.dtype)
    n_valid = float(mask.sum())

    y = np.zeros_like(x)
    per_expert: List[Optional[tuple]] = []
    counts = np.zeros(num_experts, dtype=x.dtype)
    for e in range(num_experts):
        rows, slot = np.nonzero(g.expert_indices == e)
        if rows.size == 0:
            per_expert.append(None)
            continue
        counts[e] = mask[rows].sum()
        ye, ffn_cache = _ffn(x[rows], w1[e], b1[e], w2[e], b2[e])
        y[rows] += g.combine_weights[rows, slot][:, None] * ye
        per_expert.append((rows, slot, ye, ffn_cache))

    k_eff = g.expert_indices.shape[-1]
    if n_valid > 0:
        importance = (mask[:, None] * probs).sum(axis=0) / n_valid
        load = counts / (n_valid * k_eff)
        aux = float(num_experts * np.dot(load, importance))
    else:
        load = np.zeros(num_experts, dtype=x.dtype)
        aux = 0.0
    cache = MoeCache(x, g, probs, mask, per_expert, load, n_valid)
    return y, aux, cache


def _moe_backward(dy, cache: MoeCache, gate, w1, w2, daux):
    x, g = cache.x, cache.gate
    num_experts = gate.shape[1]
    dx = np.zeros_like(x)
    dw1, db1 = np.zeros_like(w1), np.zeros((num_experts, w1.shape[2]), dtype=x.dtype)
    dw2, db2 = np.zeros_like(w2), np.zeros((num_experts, w2.shape[2]), dtype=x.dtype)
    dweights = np.zeros_like(g.combine_weights)
    for e, entry in enumerate(cache.per_expert):
        if entry is None:
            continue
        rows, slot, ye, ffn_cache = entry
        dye = g.combine_weights[rows, slot][:, None] * dy[rows]
        dweights[rows, slot] = (dy[rows] * ye).sum(axis=-1)
        dxe, dw1[e], db1[e], dw2[e], db2[e] = _ffn_backward(dye, ffn_cache, w1[e], w2[e])
        dx[rows] += dxe

    w = g.combine_weights
    dchosen = w * (dweights - (dweights * w).sum(axis=-1, keepdims=True))
    dlogits = np.zeros_like(g.all_gate_logits)
    np.put_along_axis(dlogits, g.expert_indices, dchosen, axis=-1)
    if daux and cache.num_valid > 0:
        dprobs = (num_experts * daux / cache.num_valid) * cache.token_mask[:, None] * cache.load[None, :]
        p = cache.probs
        dlogits += p * (dprobs - (dprobs * p).sum(axis=-1, keepdims=True))
    dgate = x.T @ dlogits
    dx += dlogits @ gate.T
    return dx, dgate, dw1, db1, dw2, db2


def moe_layer_forward(token_reprs: Tensor, experts: Dict[str, Tensor], gate_matrix: Tensor,
                      k: int = 2, routing: str = "topk") -> Tensor:
    """
    Apply a mixture-of-experts FFN to ``token_reprs`` [T, d].

    ``experts`` holds stacked weights ``w1`` [E, d, f], ``b1`` [E, f], ``w2`` [E, f, d]
    and ``b2`` [E, d].
    """
    token_reprs = np.asarray(token_reprs)
    if token_reprs.ndim != 2 or token_reprs.shape[0] < 1:
        raise ArgumentError(f"expected [T, d] with T >= 1, got shape {token_reprs.shape}")
    if k > gate_matrix.shape[1]:
        raise ConfigurationError(f"k={k} exceeds number of experts {gate_matrix.shape[1]}")
    check_finite(token_reprs, "token representations")
    y, _, _ = _moe_forward(token_reprs, gate_matrix, experts["w1"], experts["b1"],
                           experts["w2"], experts["b2"], k, routing)
    return check_finite(y, "moe layer output")


def _attention(x, wq, wk, wv, wo, allowed, num_heads, head_dim):
    b, t, _ = x.shape
    def heads(m):
        return m.reshape(b, t, num_heads, head_dim).transpose(0, 2, 1, 3)
    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    scale = 1.0 / math.sqrt(head_dim)
    scores = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, MASK_VALUE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(b, t, num_heads * head_dim)
    return ctx @ wo, (x, q, k, v, p, ctx)


def _attention_backward(dout, cache, wq, wk, wv, wo, num_heads, head_dim):
    x, q, k, v, p, ctx = cache
    b, t, d = x.shape
    a = num_heads * head_dim
    dwo = ctx.reshape(-1, a).T @ dout.reshape(-1, d)
    dctx = (dout @ wo.T).reshape(b, t, num_heads, head_dim).transpose(0, 2, 1, 3)
    dp = dctx @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / math.sqrt(head_dim)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(b * t, a)
    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    x2 = x.reshape(-1, d)
    dx = (dq @ wq.T + dk @ wk.T + dv @ wv.T).reshape(b, t, d)
    return dx, x2.T @ dq, x2.T @ dk, x2.T @ dv, dwo


def sinusoidal_positions(positions: np.ndarray, dim: int, dtype=np.float64) -> Tensor:
    positions = np.asarray(positions, dtype=np.float64)
    half = np.arange(0, dim, 2, dtype=np.float64)
    freqs = np.exp(-math.log(10000.0) * half / dim)
    angles = positions[..., None] * freqs
    pe = np.zeros(positions.shape + (dim,))
    pe[..., 0::2] = np.sin(angles)
    pe[..., 1::2] = np.cos(angles[..., : dim // 2])
    return pe.astype(dtype)


def segment_positions(segment_ids: np.ndarray) -> np.ndarray:
    """Position of each token within its own segment (restarts at every boundary)."""
    b, t = segment_ids.shape
    idx = np.broadcast_to(np.arange(t), (b, t))
    starts = np.ones((b, t), dtype=bool)
    starts[:, 1:] = segment_ids[:, 1:] != segment_ids[:, :-1]
    last_start = np.maximum.accumulate(np.where(starts, idx, 0), axis=1)
    return idx - last_start


# --- model ------------------------------------------------------------------

@dataclass
class ForwardResult:
    log_probs: Tensor  # [B, T, V]
    aux_loss: float  # mean over MoE layers
    routing_fractions: Dict[int, np.ndarray]  # MoE layer -> per-expert share of valid tokens, sums to k
    cache: Optional[dict] = field(default=None, repr=False)


class MoeLm:
    """Config plus weights in one working precision."""

    def __init__(self, config: MoeLmConfig, params: Dict[str, Tensor]):
        shapes = param_shapes(config)
        missing = sorted(set(shapes) - set(params))
        if missing:
            raise ConfigurationError(f"missing parameters: {missing[:5]}")
        self.config = config
        self.params = params

    @classmethod
    def from_checkpoint(cls, checkpoint: "Checkpoint", precision: str = "float64") -> "MoeLm":
        dtype = resolve_dtype(precision)
        return cls(checkpoint.config, {n: t.astype(dtype) for n, t in checkpoint.tensors.items()})

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def _output_matrix(self):
        return self.params["embed"].T if self.config.tied_embeddings else self.params["out_proj"]

    def forward(self, tokens: np.ndarray, segment_ids: Optional[np.ndarray] = None,
                keep_cache: bool = False) -> ForwardResult:
        cfg, P = self.config, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise ArgumentError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
            raise ArgumentError("token id outside the model vocabulary")
        if segment_ids is None:
            segment_ids = np.ones((b, t), dtype=np.int64)
        d = cfg.model_dim
        causal = np.tril(np.ones((t, t), dtype=bool))
        allowed = (causal[None] & (segment_ids[:, :, None] == segment_ids[:, None, :]))[:, None]
        token_mask = (segment_ids != 0).reshape(-1)

        positions = segment_positions(segment_ids)
        x = P["embed"][tokens] * math.sqrt(d) + sinusoidal_positions(positions, d, self.dtype)
        layers = []
        aux_total = 0.0
        fractions: Dict[int, np.ndarray] = {}
        for i in range(cfg.num_layers):
            p = f"layer{i}"
            h1, ln1 = _layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
            att, att_cache = _attention(h1, P[f"{p}.attn.wq"], P[f"{p}.attn.wk"], P[f"{p}.attn.wv"],
                                        P[f"{p}.attn.wo"], allowed, cfg.num_heads, cfg.head_dim)
            x = x + att
            h2, ln2 = _layer_norm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
            flat = h2.reshape(-1, d)
            if cfg.is_moe_layer(i):
                f, aux, ff_cache = _moe_forward(flat, P[f"{p}.moe.gate"], P[f"{p}.moe.w1"], P[f"{p}.moe.b1"],
                                                P[f"{p}.moe.w2"], P[f"{p}.moe.b2"], cfg.experts_per_token,
                                                cfg.routing, token_mask)
                aux_total += aux
                if ff_cache.num_valid > 0:
                    fractions[i] = ff_cache.load * ff_cache.gate.expert_indices.shape[-1]
            else:
                f, ff_cache = _ffn(flat, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"], P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
            x = x + f.reshape(b, t, d)
            layers.append((ln1, att_cache, ln2, ff_cache))

        xf, lnf = _layer_norm(x, P["final_ln.gain"], P["final_ln.bias"])
        log_probs = log_softmax(xf @ self._output_matrix())
        n_moe = len(cfg.moe_layers)
        aux_mean = aux_total / n_moe if n_moe else 0.0
        cache = None
        if keep_cache:
            cache = dict(tokens=tokens, layers=layers, xf=xf, lnf=lnf, token_mask=token_mask)
        return ForwardResult(log_probs, aux_mean, fractions, cache)

    def loss_and_grads(self, tokens: np.ndarray, segment_ids: np.ndarray, loss_mask: np.ndarray,
                       aux_loss_weight: Optional[float] = None):
        """
        Masked mean next-token cross-entropy plus weighted load-balance loss.

        ``loss_mask[b, t]`` selects positions whose prediction of ``tokens[b, t+1]``
        counts. Returns ``(total, ce, aux, grads, routing_fractions)``.
        """
        cfg, P = self.config, self.params
        w_aux = cfg.aux_loss_weight if aux_loss_weight is None else aux_loss_weight
        res = self.forward(tokens, segment_ids, keep_cache=True)
        c = res.cache
        tokens = c["tokens"]
        b, t = tokens.shape
        d, v = cfg.model_dim, cfg.vocab_size

        mask = np.asarray(loss_mask, dtype=self.dtype).copy()
        mask[:, -1] = 0.0
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        n_pred = mask.sum()
        if n_pred == 0:
            raise ArgumentError("batch has no positions to score")
        picked = np.take_along_axis(res.log_probs, targets[..., None], axis=-1)[..., 0]
        ce = float(-(picked * mask).sum() / n_pred)
        total = ce + w_aux * res.aux_loss

        grads = {name: np.zeros_like(p) for name, p in P.items()}
        dlogits = np.exp(res.log_probs)
        np.put_along_axis(dlogits, targets[..., None],
                          np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
        dlogits *= (mask / n_pred)[..., None]

        out = self._output_matrix()
        xf = c["xf"]
        dxf = dlogits @ out.T
        d_out = xf.reshape(-1, d).T @ dlogits.reshape(-1, v)
        if cfg.tied_embeddings:
            grads["embed"] += d_out.T
        else:
            grads["out_proj"] += d_out
        dx, grads["final_ln.gain"], grads["final_ln.bias"] = _layer_norm_backward(dxf, c["lnf"], P["final_ln.gain"])

        n_moe = len(cfg.moe_layers)
        daux = w_aux / n_moe if n_moe else 0.0
        for i in reversed(range(cfg.num_layers)):
            p = f"layer{i}"
            ln1, att_cache, ln2, ff_cache = c["layers"][i]
            dflat = dx.reshape(-1, d)
            if cfg.is_moe_layer(i):
                dh2, grads[f"{p}.moe.gate"], grads[f"{p}.moe.w1"], grads[f"{p}.moe.b1"], \
                    grads[f"{p}.moe.w2"], grads[f"{p}.moe.b2"] = _moe_backward(
                        dflat, ff_cache, P[f"{p}.moe.gate"], P[f"{p}.moe.w1"], P[f"{p}.moe.w2"], daux)
            else:
                dh2, grads[f"{p}.ffn.w1"], grads[f"{p}.ffn.b1"], grads[f"{p}.ffn.w2"], \
                    grads[f"{p}.ffn.b2"] = _ffn_backward(dflat, ff_cache, P[f"{p}.ffn.w1"], P[f"{p}.ffn.w2"])
            dmid, grads[f"{p}.ln2.gain"], grads[f"{p}.ln2.bias"] = _layer_norm_backward(
                dh2.reshape(b, t, d), ln2, P[f"{p}.ln2.gain"])
            dx = dx + dmid
            datt, grads[f"{p}.attn.wq"], grads[f"{p}.attn.wk"], grads[f"{p}.attn.wv"], \
                grads[f"{p}.attn.wo"] = _attention_backward(
                    dx, att_cache, P[f"{p}.attn.wq"], P[f"{p}.attn.wk"], P[f"{p}.attn.wv"],
                    P[f"{p}.attn.wo"], cfg.num_heads, cfg.head_dim)
            din, grads[f"{p}.ln1.gain"], grads[f"{p}.ln1.bias"] = _layer_norm_backward(
                datt, ln1, P[f"{p}.ln1.gain"])
            dx = dx + din

        np.add.at(grads["embed"], tokens.reshape(-1), dx.reshape(-1, d) * math.sqrt(d))
        return total, ce, res.aux_loss, grads, res.routing_fractions


def _as_model(model_or_checkpoint) -> MoeLm:
    if isinstance(model_or_checkpoint, MoeLm):
        return model_or_checkpoint
    return MoeLm.from_checkpoint(model_or_checkpoint)


def lm_forward(seq: Union[TokenSeq, Sequence[int]], checkpoint) -> Tuple[Tensor, float]:
    """Per-position log-distributions [T, V] for a BOS-prefixed sequence, plus the aux loss."""
    ids = np.asarray(seq.ids if isinstance(seq, TokenSeq) else seq, dtype=np.int64)
    model = _as_model(checkpoint)
    if ids.size == 0 or ids[0] != BOS_ID:
        raise ArgumentError("lm_forward expects a BOS-prefixed sequence")
    if ids.size > model.config.max_seq_len:
        raise ArgumentError(f"sequence length {ids.size} exceeds max_seq_len {model.config.max_seq_len}")
    res = model.forward(ids[None, :])
    return res.log_probs[0], res.aux_loss


# --- incremental scoring ----------------------------------------------------

@dataclass(frozen=True)
class LmState:
    keys: Tuple[Tensor, ...]  # per layer [H, position, head_dim]
    values: Tuple[Tensor, ...]
    position: int = 0


def initial_state(model) -> LmState:
    model = _as_model(model)
    cfg = model.config
    empty = np.zeros((cfg.num_heads, 0, cfg.head_dim), dtype=model.dtype)
    return LmState(tuple(empty for _ in range(cfg.num_layers)),
                   tuple(empty for _ in range(cfg.num_layers)), 0)


def lm_score_step(state: LmState, next_token: int, model) -> Tuple[LmState, Tensor]:
    """Feed one token; returns the extended state and log p(. | prefix + token)."""
    model = _as_model(model)
    cfg, P = model.config, model.params
    if state.position >= cfg.max_seq_len:
        raise ArgumentError(f"LM state already at max_seq_len {cfg.max_seq_len}")
    if not 0 <= next_token < cfg.vocab_size:
        raise ArgumentError(f"token id {next_token} outside vocab of size {cfg.vocab_size}")
    d, h, hd = cfg.model_dim, cfg.num_heads, cfg.head_dim
    x = P["embed"][next_token] * math.sqrt(d) + sinusoidal_positions(np.array(state.position), d, model.dtype)
    x = x[None, :]
    keys, values = [], []
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        h1, _ = _layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
        q = (h1 @ P[f"{p}.attn.wq"]).reshape(h, 1, hd)
        k = np.concatenate([state.keys[i], (h1 @ P[f"{p}.attn.wk"]).reshape(h, 1, hd)], axis=1)
        v = np.concatenate([state.values[i], (h1 @ P[f"{p}.attn.wv"]).reshape(h, 1, hd)], axis=1)
        keys.append(k)
        values.append(v)
        scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(hd)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=-1, keepdims=True)
        ctx = (w @ v).transpose(1, 0, 2).reshape(1, h * hd)
        x = x + ctx @ P[f"{p}.attn.wo"]
        h2, _ = _layer_norm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
        if cfg.is_moe_layer(i):
            f, _, _ = _moe_forward(h2, P[f"{p}.moe.gate"], P[f"{p}.moe.w1"], P[f"{p}.moe.b1"],
                                   P[f"{p}.moe.w2"], P[f"{p}.moe.b2"], cfg.experts_per_token, cfg.routing)
        else:
            f, _ = _ffn(h2, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"], P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
        x = x + f
    xf, _ = _layer_norm(x, P["final_ln.gain"], P["final_ln.bias"])
    log_probs = log_softmax(xf @ model._output_matrix())[0]
    return LmState(tuple(keys), tuple(values), state.position + 1), log_probs


# --- parameter / FLOP accounting --------------------------------------------

@dataclass(frozen=True)
class FlopReport:
    total_params: int
    active_params_per_token: int
    flops_per_token: Dict[str, int]  # 2 flops per multiply-add

    @property
    def total_flops(self) -> int:
        return sum(self.flops_per_token.values())

    @property
    def non_gating_flops(self) -> int:
        return self.total_flops - self.flops_per_token["gating"]

    @property
    def active_fraction(self) -> float:
        return self.active_params_per_token / self.total_params

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(total_flops=self.total_flops, active_fraction=self.active_fraction)
        return out


def count_params_flops(config: MoeLmConfig, context_len: Optional[int] = None) -> FlopReport:
    """
    Closed-form parameter and per-token FLOP counts.

    Attention score/value products assume ``context_len`` keys (default
    ``max_seq_len``). Elementwise work (norms, softmax, GELU) is not counted.
    """
    d, a, f = config.model_dim, config.attn_dim, config.ffn_dim
    e, k, v = config.num_experts, config.active_experts, config.vocab_size
    ctx = config.max_seq_len if context_len is None else context_len
    n_moe = len(config.moe_layers)
    n_dense = config.num_layers - n_moe

    ffn_params = 2 * d * f + f + d
    per_layer_shared = 4 * d * a + 4 * d
    embed = v * d * (1 if config.tied_embeddings else 2)
    total = (embed + config.num_layers * per_layer_shared + n_dense * ffn_params
             + n_moe * (e * ffn_params + d * e) + 2 * d)
    active = total - n_moe * (e - k) * ffn_params

    flops = {
        "attention": config.num_layers * (2 * 4 * d * a + 2 * 2 * ctx * a),
        "dense_ffn": n_dense * 2 * 2 * d * f,
        "moe_expert": n_moe * k * 2 * 2 * d * f,
        "gating": n_moe * 2 * d * e,
        "embedding_softmax": 2 * d * v,
    }
    return FlopReport(total_params=total, active_params_per_token=active, flops_per_token=flops)


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: MoeLmConfig
    tensors: Dict[str, np.ndarray]  # float32
    training_step: int = 0
    format_version: int = FORMAT_VERSION
    vocab_digest: Optional[str] = None

    @classmethod
    def from_params(cls, config, params, training_step=0, vocab_digest=None) -> "Checkpoint":
        tensors = {n: np.ascontiguousarray(params[n], dtype=np.float32) for n in param_shapes(config)}
        return cls(config, tensors, training_step, FORMAT_VERSION, vocab_digest)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(path / "weights.bin", "wb") as fh:
        for name in param_shapes(checkpoint.config):
            blob = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4").tobytes()
            index.append({"name": name, "dtype": "float32", "shape": list(checkpoint.tensors[name].shape),
                          "offset": offset, "length": len(blob)})
            fh.write(blob)
            offset += len(blob)
    manifest = {
        "format_version": checkpoint.format_version,
        "config": asdict(checkpoint.config),
        "training_step": checkpoint.training_step,
        "vocab_digest": checkpoint.vocab_digest,
        "tensors": index,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"saved checkpoint ({offset} bytes, step {checkpoint.training_step}) to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CorruptCheckpointError(f"{path}: missing manifest.json") from e
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({e})") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {manifest.get('format_version')} != supported {FORMAT_VERSION}"
        )
    try:
        config = config_from_dict(manifest["config"])
        entries = {t["name"]: t for t in manifest["tensors"]}
    except (KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"{path}: malformed manifest ({e})") from e
    try:
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError as e:
        raise CorruptCheckpointError(f"{path}: missing weights.bin") from e

    tensors = {}
    for name, shape in param_shapes(config).items():
        if name not in entries:
            raise CorruptCheckpointError(f"{path}: tensor {name!r} missing from manifest")
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointShapeError(name, shape, entry["shape"])
        start, length = entry["offset"], entry["length"]
        if length != 4 * int(np.prod(shape)) or start + length > len(blob):
            raise CorruptCheckpointError(f"{path}: weights.bin truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=start).astype(np.float32).reshape(shape)
    return Checkpoint(config, tensors, int(manifest.get("training_step", 0)),
                      manifest["format_version"], manifest.get("vocab_digest"))


def with_routing(config: MoeLmConfig, routing: str) -> MoeLmConfig:
    return replace(config, routing=routing)
