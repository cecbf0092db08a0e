"""Shared fixtures: seeded generators, small layers and non-white statistics."""

import numpy as np
import pytest

from app.models.model import ActivationBatch, MlpVariant, ModelConfig
from app.services.calibration import generate_batches, make_covariance
from app.services.pipeline_service import random_layer, random_model


def spd(dim: int, rng: np.random.Generator, decay: float = 50.0) -> np.ndarray:
    """Non-white symmetric positive definite matrix with a known spectrum spread."""
    return make_covariance(dim, rng, decay_ratio=decay)


def make_batches(cfg: ModelConfig, rng: np.random.Generator, n_batches: int = 4, tokens: int = 16, decay: float = 50.0):
    return generate_batches(make_covariance(cfg.d_m, rng, decay_ratio=decay), n_batches, tokens, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mha_config():
    return ModelConfig(d_m=12, h_q=2, h_kv=2, d_qk=4, d_vo=4, d_inter=10)


@pytest.fixture
def rope_config():
    return ModelConfig(d_m=12, h_q=2, h_kv=2, d_qk=8, d_vo=4, d_inter=10, rope_enabled=True)


@pytest.fixture
def gqa_config():
    return ModelConfig(
        d_m=12, h_q=4, h_kv=2, d_qk=8, d_vo=4, d_inter=10, rope_enabled=True, mlp_variant=MlpVariant.GATED_SILU
    )


@pytest.fixture
def layer_factory():
    def build(cfg: ModelConfig, seed: int = 0):
        return random_layer(cfg, np.random.default_rng(seed))
    return build


@pytest.fixture
def model_factory():
    def build(cfg: ModelConfig, seed: int = 0):
        return random_model(cfg, np.random.default_rng(seed))
    return build


@pytest.fixture
def batch_factory():
    def build(cfg: ModelConfig, seed: int = 0, n_batches: int = 4, tokens: int = 16, decay: float = 50.0):
        return make_batches(cfg, np.random.default_rng(seed), n_batches, tokens, decay)
    return build


@pytest.fixture
def single_batch():
    def build(x: np.ndarray) -> ActivationBatch:
        x = np.asarray(x, dtype=np.float64)
        return ActivationBatch(x=x, positions=np.arange(x.shape[0]))
    return build
