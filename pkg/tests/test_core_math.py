import math

import numpy as np
import pytest
from scipy.special import logsumexp as scipy_logsumexp

from src.core_math import (
    as_tensor,
    check_finite,
    gelu,
    gelu_grad,
    grad_check,
    log_softmax,
    logsumexp,
    matmul,
    resolve_dtype,
)
from src.errors import ArgumentError, DimensionError, NumericError


def test_matmul_identity_and_hand_case():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(m, np.eye(2)), m)
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_log_softmax_uniform_and_shift_invariance(rng):
    out = log_softmax(np.full(4, 7.5))
    assert np.allclose(out, math.log(0.25), atol=1e-12)
    v = rng.standard_normal(10)
    assert np.allclose(log_softmax(v + 5.0), log_softmax(v), atol=1e-9)


def test_log_softmax_large_logits_do_not_overflow():
    out = log_softmax(np.array([1000.0, 0.0]))
    assert out[0] == pytest.approx(-math.exp(-1000.0), abs=1e-300)
    assert out[1] == pytest.approx(-1000.0)


def test_log_softmax_rows_normalized(rng):
    v = rng.uniform(-1e3, 1e3, size=(10_000, 8))
    out = log_softmax(v)
    assert np.all(out <= 0)
    assert np.allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-6)


def test_log_softmax_rejects_empty_and_nan():
    with pytest.raises(ArgumentError):
        log_softmax(np.array([]))
    with pytest.raises(NumericError):
        log_softmax(np.array([0.0, np.nan]))


def test_logsumexp_examples():
    assert logsumexp(np.array([0.0, 0.0])) == pytest.approx(math.log(2.0))
    assert logsumexp(np.array([-3.25])) == -3.25
    assert logsumexp(np.array([700.0, 700.0])) == pytest.approx(700.0 + math.log(2.0))
    with pytest.raises(ArgumentError):
        logsumexp(np.array([]))


def test_logsumexp_bounds_and_scipy_oracle(rng):
    v = rng.uniform(-500, 500, size=(1000, 16))
    out = logsumexp(v)
    assert np.allclose(out, scipy_logsumexp(v, axis=-1), rtol=1e-12, atol=1e-9)
    assert np.all(out >= v.max(axis=-1))
    assert np.all(out <= v.max(axis=-1) + math.log(16) + 1e-12)


def test_check_finite_and_as_tensor():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.inf]))
    with pytest.raises(DimensionError):
        as_tensor(np.zeros((0, 3)))
    assert as_tensor([[1, 2]]).dtype == np.float64
    with pytest.raises(ArgumentError):
        resolve_dtype("float16")


def test_gelu_grad_matches_central_difference(rng):
    x = rng.standard_normal(50) * 3
    eps = 1e-6
    fd = (gelu(x + eps) - gelu(x - eps)) / (2 * eps)
    assert np.allclose(gelu_grad(x), fd, atol=1e-7)


def quadratic(params):
    theta = params["theta"]
    return 0.5 * float(theta @ theta), {"theta": theta.copy()}


def test_grad_check_quadratic_is_exact():
    report = grad_check(quadratic, {"theta": np.array([3.0, -1.0])})
    assert report.max_relative_error < 1e-6
    assert report.checked == 2


def test_grad_check_flags_a_wrong_gradient():
    def wrong(params):
        loss, grads = quadratic(params)
        grads["theta"][1] += 0.5
        return loss, grads

    report = grad_check(wrong, {"theta": np.array([3.0, -1.0])})
    assert report.max_relative_error > 0.1
    assert report.worst_parameter == ("theta", 1)


def test_grad_check_subsamples_large_parameter_sets():
    report = grad_check(quadratic, {"theta": np.linspace(-1, 1, 50)}, max_params=10, seed=3)
    assert report.checked == 10
    assert report.max_relative_error < 1e-6


def test_grad_check_errors():
    with pytest.raises(NumericError):
        grad_check(lambda p: (float("nan"), {"theta": p["theta"]}), {"theta": np.ones(2)})
    with pytest.raises(ArgumentError):
        grad_check(quadratic, {"theta": np.ones(2)}, epsilon=1e-2)
