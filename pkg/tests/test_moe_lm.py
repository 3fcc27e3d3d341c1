import json
import math
from dataclasses import replace

import numpy as np
import pytest

from src.core_math import gelu, grad_check, logsumexp, softmax
from src.errors import (
    ArgumentError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
)
from src.moe_lm import (
    PRESETS,
    Checkpoint,
    MoeLm,
    MoeLmConfig,
    count_params_flops,
    gate_topk,
    init_params,
    initial_state,
    lm_forward,
    lm_score_step,
    load_checkpoint,
    moe_layer_forward,
    param_shapes,
    save_checkpoint,
    segment_positions,
)
from src.tokenizer import BOS_ID


def random_experts(rng, num_experts, d, f):
    return {
        "w1": rng.standard_normal((num_experts, d, f)) / math.sqrt(d),
        "b1": 0.1 * rng.standard_normal((num_experts, f)),
        "w2": rng.standard_normal((num_experts, f, d)) / math.sqrt(f),
        "b2": 0.1 * rng.standard_normal((num_experts, d)),
    }


def ffn(x, experts, e):
    return gelu(x @ experts["w1"][e] + experts["b1"][e]) @ experts["w2"][e] + experts["b2"][e]


# --- gating -----------------------------------------------------------------

def test_gate_topk_hand_examples():
    g = gate_topk(np.array([1.0, 3.0, 2.0, -1.0]), np.eye(4), k=2)
    assert g.expert_indices.tolist() == [1, 2]
    assert np.allclose(g.combine_weights, [0.7311, 0.2689], atol=1e-4)

    tie = gate_topk(np.array([5.0, 5.0, 0.0, 0.0]), np.eye(4), k=2)
    assert tie.expert_indices.tolist() == [0, 1]
    assert np.allclose(tie.combine_weights, [0.5, 0.5])


def test_gate_topk_k_equals_e_is_full_softmax(rng):
    x = rng.standard_normal(6)
    gate = rng.standard_normal((6, 2))
    g = gate_topk(x, gate, k=2)
    assert sorted(g.expert_indices.tolist()) == [0, 1]
    full = softmax(x @ gate)
    assert np.allclose(g.combine_weights, full[g.expert_indices], atol=1e-12)


def test_gate_topk_rejects_k_above_e():
    with pytest.raises(ConfigurationError):
        gate_topk(np.ones(4), np.eye(4), k=5)


@pytest.mark.parametrize("num_experts", [2, 4, 8, 64])
def test_routing_invariants_over_many_tokens(num_experts):
    rng = np.random.default_rng(num_experts)
    x = rng.standard_normal((100_000, 8))
    gate = rng.standard_normal((8, num_experts))
    g = gate_topk(x, gate, k=2)
    assert g.expert_indices.shape == (100_000, 2)
    assert np.all(g.expert_indices[:, 0] != g.expert_indices[:, 1])
    assert np.allclose(g.combine_weights.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(g.combine_weights > 0)
    again = gate_topk(x, gate, k=2)
    assert np.array_equal(g.expert_indices, again.expert_indices)


# --- MoE layer --------------------------------------------------------------

def test_single_expert_is_plain_dense_ffn(rng):
    x = rng.standard_normal((20, 6))
    experts = random_experts(rng, 1, 6, 24)
    y = moe_layer_forward(x, experts, rng.standard_normal((6, 1)), k=1)
    assert np.allclose(y, ffn(x, experts, 0), atol=1e-12)


def test_two_experts_reduce_to_dense_mixture(rng):
    x = rng.standard_normal((1000, 8))
    experts = random_experts(rng, 2, 8, 32)
    gate = rng.standard_normal((8, 2))
    w = softmax(x @ gate)
    dense = w[:, :1] * ffn(x, experts, 0) + w[:, 1:] * ffn(x, experts, 1)
    assert np.max(np.abs(moe_layer_forward(x, experts, gate, k=2) - dense)) < 1e-6
    assert np.max(np.abs(moe_layer_forward(x, experts, gate, k=2, routing="dense") - dense)) < 1e-6


def test_tokens_route_to_different_expert_pairs(rng):
    gate = np.eye(8)
    x = np.zeros((2, 8))
    x[0, [0, 1]] = [3.0, 2.0]
    x[1, [5, 6]] = [3.0, 2.0]
    g = gate_topk(x, gate, k=2)
    assert g.expert_indices[0].tolist() == [0, 1]
    assert g.expert_indices[1].tolist() == [5, 6]
    experts = random_experts(rng, 8, 8, 16)
    y = moe_layer_forward(x, experts, gate, k=2)
    expected = g.combine_weights[1, 0] * ffn(x[1:], experts, 5) + g.combine_weights[1, 1] * ffn(x[1:], experts, 6)
    assert np.allclose(y[1:], expected, atol=1e-12)


# --- forward / incremental scoring -------------------------------------------

@pytest.fixture
def tiny_model(tiny_config):
    return MoeLm(tiny_config, init_params(tiny_config, seed=0))


def test_layers_alternate_dense_then_moe():
    cfg = MoeLmConfig(num_layers=4, model_dim=16, num_heads=2, head_dim=8, num_experts=4, vocab_size=10)
    assert cfg.moe_layers == [1, 3]
    shapes = param_shapes(cfg)
    assert "layer0.ffn.w1" in shapes and "layer1.moe.gate" in shapes
    assert shapes["layer1.moe.w1"] == (4, 16, 64)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MoeLmConfig(num_experts=1, experts_per_token=2)
    with pytest.raises(ConfigurationError):
        MoeLmConfig(routing="random")


@pytest.mark.parametrize("layers,dim,experts", [(2, 16, 1), (2, 32, 2), (4, 16, 4), (4, 32, 8)])
def test_lm_forward_rows_are_normalized_and_causal(layers, dim, experts):
    rng = np.random.default_rng(layers * 100 + experts)
    cfg = MoeLmConfig(num_layers=layers, model_dim=dim, num_heads=2, head_dim=dim // 2,
                      num_experts=experts, experts_per_token=min(2, experts), vocab_size=30, max_seq_len=16)
    model = MoeLm(cfg, init_params(cfg, seed=1))
    seq = [BOS_ID] + rng.integers(4, 30, size=9).tolist()
    log_probs, _ = lm_forward(seq, model)
    assert log_probs.shape == (10, 30)
    assert np.allclose(logsumexp(log_probs, axis=-1), 0.0, atol=1e-5)

    t = 4
    changed = seq[: t + 1] + rng.integers(4, 30, size=len(seq) - t - 1).tolist()
    other, _ = lm_forward(changed, model)
    assert np.allclose(other[: t + 1], log_probs[: t + 1], atol=1e-12)


def test_fresh_model_is_near_uniform(tiny_model, rng):
    seq = [BOS_ID] + rng.integers(4, 24, size=20).tolist()
    log_probs, _ = lm_forward(seq, tiny_model)
    nll = -np.mean(log_probs[np.arange(len(seq) - 1), seq[1:]])
    assert abs(nll - math.log(24)) / math.log(24) < 0.05


def test_lm_forward_preconditions(tiny_model):
    with pytest.raises(ArgumentError):
        lm_forward([5, 6], tiny_model)
    with pytest.raises(ArgumentError):
        lm_forward([BOS_ID] * 33, tiny_model)


def test_stepwise_scores_match_full_forward(tiny_model, rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        seq = [BOS_ID] + rng.integers(3, 24, size=n).tolist()
        full, _ = lm_forward(seq, tiny_model)
        state = initial_state(tiny_model)
        for i, token in enumerate(seq):
            state, row = lm_score_step(state, token, tiny_model)
            assert np.max(np.abs(row - full[i])) < 1e-5
        assert state.position == len(seq)


def test_score_step_does_not_mutate_prior_state(tiny_model):
    state, _ = lm_score_step(initial_state(tiny_model), BOS_ID, tiny_model)
    keys = [k.copy() for k in state.keys]
    lm_score_step(state, 7, tiny_model)
    lm_score_step(state, 9, tiny_model)
    assert all(np.array_equal(a, b) for a, b in zip(keys, state.keys))
    assert state.position == 1


def test_score_step_overflow(tiny_config):
    cfg = replace(tiny_config, max_seq_len=3)
    model = MoeLm(cfg, init_params(cfg))
    state = initial_state(model)
    for token in (BOS_ID, 5, 6):
        state, _ = lm_score_step(state, token, model)
    with pytest.raises(ArgumentError):
        lm_score_step(state, 7, model)


def test_segments_restart_positions_and_do_not_attend_across(tiny_model, rng):
    seg = np.array([[1, 1, 1, 2, 2, 2, 0, 0]])
    assert segment_positions(seg).tolist() == [[0, 1, 2, 0, 1, 2, 0, 1]]
    tokens = np.array([[BOS_ID, 5, 6, BOS_ID, 7, 8, 0, 0]])
    base = tiny_model.forward(tokens, seg).log_probs
    perturbed = tokens.copy()
    perturbed[0, 1:3] = [9, 10]
    other = tiny_model.forward(perturbed, seg).log_probs
    assert np.allclose(base[0, 3:6], other[0, 3:6], atol=1e-12)
    alone, _ = lm_forward([BOS_ID, 7, 8], tiny_model)
    assert np.allclose(base[0, 3:6], alone, atol=1e-10)


# --- gradients ----------------------------------------------------------------

def test_full_loss_passes_gradient_check(tiny_config):
    model = MoeLm(tiny_config, init_params(tiny_config, seed=3))
    tokens = np.array([[BOS_ID, 5, 9, 2, BOS_ID, 7, 11, 2],
                       [BOS_ID, 12, 4, 6, 8, 2, 0, 0]])
    segs = np.array([[1, 1, 1, 1, 2, 2, 2, 2],
                     [1, 1, 1, 1, 1, 1, 0, 0]])
    mask = np.zeros_like(segs)
    mask[:, :-1] = (segs[:, :-1] != 0) & (segs[:, :-1] == segs[:, 1:])

    def loss_fn(params):
        total, _, _, grads, _ = MoeLm(tiny_config, params).loss_and_grads(tokens, segs, mask)
        return total, grads

    report = grad_check(loss_fn, model.params, epsilon=1e-5, seed=0)
    assert report.max_relative_error < 1e-4, report


def test_padding_positions_do_not_affect_loss_or_gradient(tiny_model):
    tokens = np.array([[BOS_ID, 5, 9, 2, 0, 0]])
    segs = np.array([[1, 1, 1, 1, 0, 0]])
    mask = np.array([[1, 1, 1, 0, 0, 0]])
    other = tokens.copy()
    other[0, 4:] = [13, 14]
    loss_a, _, _, grads_a, _ = tiny_model.loss_and_grads(tokens, segs, mask)
    loss_b, _, _, grads_b, _ = tiny_model.loss_and_grads(other, segs, mask)
    assert loss_a == pytest.approx(loss_b, abs=1e-12)
    for name in grads_a:
        assert np.allclose(grads_a[name], grads_b[name], atol=1e-12), name


# --- accounting -----------------------------------------------------------------

def test_glam_64e_parameter_counts():
    report = count_params_flops(PRESETS["glam-64e"])
    assert abs(report.total_params - 1.9e9) / 1.9e9 < 0.15
    assert abs(report.active_params_per_token - 145e6) / 145e6 < 0.20
    assert report.active_fraction < 0.08


def test_non_gating_flops_constant_in_experts():
    reports = {e: count_params_flops(replace(PRESETS["glam-64e"], num_experts=e)) for e in (2, 8, 64)}
    assert len({r.non_gating_flops for r in reports.values()}) == 1
    gating = {e: r.flops_per_token["gating"] for e, r in reports.items()}
    assert gating[8] == 4 * gating[2] and gating[64] == 32 * gating[2]
    assert reports[64].total_params > reports[8].total_params > reports[2].total_params


def test_dense_config_has_all_parameters_active():
    report = count_params_flops(PRESETS["dense-140m"])
    assert report.total_params == report.active_params_per_token


def test_param_count_matches_initialized_tensors(tiny_config):
    params = init_params(tiny_config)
    assert sum(p.size for p in params.values()) == count_params_flops(tiny_config).total_params


# --- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_model):
    ckpt = Checkpoint.from_params(tiny_model.config, tiny_model.params, training_step=7, vocab_digest="abc")
    save_checkpoint(ckpt, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert loaded.config == ckpt.config
    assert loaded.training_step == 7 and loaded.vocab_digest == "abc"
    for name, t in ckpt.tensors.items():
        assert np.array_equal(loaded.tensors[name], t)
    save_checkpoint(loaded, tmp_path / "b")
    assert (tmp_path / "a" / "weights.bin").read_bytes() == (tmp_path / "b" / "weights.bin").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
    seq = [BOS_ID, 4, 5, 6]
    assert np.array_equal(lm_forward(seq, ckpt)[0], lm_forward(seq, loaded)[0])


def test_checkpoint_errors(tmp_path, tiny_model):
    path = save_checkpoint(Checkpoint.from_params(tiny_model.config, tiny_model.params), tmp_path / "c")
    blob = (path / "weights.bin").read_bytes()
    manifest = json.loads((path / "manifest.json").read_text())

    (path / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
    (path / "weights.bin").write_bytes(blob)

    edited = json.loads(json.dumps(manifest))
    edited["tensors"][1]["shape"] = [1, 2]
    (path / "manifest.json").write_text(json.dumps(edited))
    with pytest.raises(CheckpointShapeError) as info:
        load_checkpoint(path)
    assert info.value.tensor_name == edited["tensors"][1]["name"]

    edited = dict(manifest, format_version=99)
    (path / "manifest.json").write_text(json.dumps(edited))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)

    (path / "manifest.json").unlink()
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
