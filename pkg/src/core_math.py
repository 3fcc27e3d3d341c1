"""
Dense numeric kernels shared by the language model, the trainer and the decoder.

Tensors are plain ``numpy.ndarray`` values in row-major order. Every kernel here
rejects NaN/Inf input instead of propagating it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Tuple

import numpy as np
from scipy.special import erf

from src.errors import ArgumentError, DimensionError, NumericError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

PRECISIONS = {"float64": np.float64, "float32": np.float32}

# Tolerance for "this row is a normalized log-distribution", per precision.
# Lattices use the float32 entry since they may be stored at that precision.
NORMALIZATION_TOL = {np.dtype(np.float64): 1e-9, np.dtype(np.float32): 1e-5}


def resolve_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ArgumentError(
            f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}"
        ) from None


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return x


def as_tensor(values, dtype=np.float64) -> Tensor:
    t = np.ascontiguousarray(np.asarray(values, dtype=dtype))
    if any(d <= 0 for d in t.shape):
        raise DimensionError(f"tensor dimensions must be positive, got shape {t.shape}")
    return check_finite(t)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    check_finite(a, "left operand")
    check_finite(b, "right operand")
    return a @ b


def logsumexp(v: Tensor, axis: int = -1) -> Tensor:
    """ln(sum(exp(v))) along ``axis`` via max subtraction; never overflows."""
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ArgumentError("logsumexp of an empty vector")
    check_finite(v, "logsumexp input")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    out = np.squeeze(out, axis=axis)
    return out[()] if out.ndim == 0 else out


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ArgumentError("log_softmax of an empty vector")
    check_finite(logits, "log_softmax input")
    m = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return np.exp(log_softmax(logits, axis=axis))


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter: Tuple[str, int]
    checked: int


LossFn = Callable[[Dict[str, Tensor]], Tuple[float, Mapping[str, Tensor]]]


def grad_check(
    loss_fn: LossFn,
    params: Mapping[str, Tensor],
    epsilon: float = 1e-6,
    max_params: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare the analytic gradient returned by ``loss_fn`` with central finite
    differences.

    ``loss_fn(params) -> (loss, grads)`` where ``grads`` has one array per
    parameter name. Above ``max_params`` scalars a seeded random subset is checked.
    The relative error of one entry is |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ArgumentError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    work = {name: np.array(p, dtype=np.float64, copy=True) for name, p in params.items()}
    loss, grads = loss_fn(work)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite at the check point ({loss})")

    coords = [(name, i) for name in sorted(work) for i in range(work[name].size)]
    if len(coords) > max_params:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_params, replace=False))
        coords = [coords[i] for i in picked]

    worst = (0.0, ("", -1))
    for name, i in coords:
        flat = work[name].reshape(-1)
        original = flat[i]
        flat[i] = original + epsilon
        loss_plus, _ = loss_fn(work)
        flat[i] = original - epsilon
        loss_minus, _ = loss_fn(work)
        flat[i] = original
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise NumericError(f"loss became non-finite while perturbing {name}[{i}]")

        g_fd = (loss_plus - loss_minus) / (2.0 * epsilon)
        g_a = float(np.asarray(grads[name]).reshape(-1)[i])
        rel = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
        if rel > worst[0]:
            worst = (rel, (name, i))

    logger.debug(f"grad check: {len(coords)} coordinates, worst {worst}")
    return GradCheckReport(max_relative_error=worst[0], worst_parameter=worst[1], checked=len(coords))
