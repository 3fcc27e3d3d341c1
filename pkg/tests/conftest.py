import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

import numpy as np
import pytest

from src.moe_lm import MoeLmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return MoeLmConfig(num_layers=2, model_dim=16, num_heads=2, head_dim=8, num_experts=4,
                       vocab_size=24, max_seq_len=32)


@pytest.fixture
def random_lattice():
    """Factory for seeded [steps, V] lattices of normalized log-distributions."""

    def make(rng, steps, vocab_size, sharpness=2.0):
        logits = sharpness * rng.standard_normal((steps, vocab_size))
        return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))

    return make
