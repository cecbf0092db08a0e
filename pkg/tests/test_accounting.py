import numpy as np
import pytest

from app.core.exceptions import ArgumentError
from app.models.model import MlpVariant, ModelConfig
from app.models.plan import CompressionPlan, LayerPlan
from app.models.solution import OvVariant
from app.services.accounting import (
    accounting,
    embedding_params,
    full_plan,
    low_rank_params,
    plan_params,
    ratio_to_ranks,
    saving_ratio,
    validate_plan,
    value_heads,
)
from app.services.baselines import plain_svd_layer

PIPELINE_CONFIG = ModelConfig(
    d_m=32, h_q=4, h_kv=2, d_qk=8, d_vo=8, d_inter=64, rope_enabled=True, mlp_variant=MlpVariant.GATED_SILU
)


def test_low_rank_params():
    assert low_rank_params(10, 20, 3) == 90
    assert saving_ratio(10, 10, 5) == pytest.approx(1.0)


@pytest.mark.parametrize("m", range(8, 65, 8))
@pytest.mark.parametrize("n", range(8, 65, 8))
def test_factored_parameter_count_matches_factors(m, n):
    w = np.random.default_rng(100 * m + n).standard_normal((m, n))
    for r in sorted({1, min(m, n) // 2, min(m, n)}):
        factors = plain_svd_layer(w, r)
        assert factors.left.size + factors.right.size == low_rank_params(m, n, r) == r * (m + n)


def test_uncompressed_layer_counts():
    cfg = ModelConfig(d_m=16, h_q=2, h_kv=2, d_qk=4, d_vo=4, d_inter=32)
    acc = accounting(cfg, full_plan(cfg), context_length=0)
    attention = 2 * 16 * 4 * 4
    assert acc.params_before == acc.params_after == attention + 2 * 16 * 32
    assert acc.flops_before == 2 * acc.params_before


def test_halving_ranks_halves_the_kv_cache():
    cfg = ModelConfig(d_m=16, h_q=2, h_kv=2, d_qk=8, d_vo=8, d_inter=32)
    acc = accounting(cfg, LayerPlan(r_qk=4, r_vo=4, r_mlp=32))
    assert acc.kv_bytes_before == 2 * (2 * 8 + 2 * 8)
    assert acc.kv_bytes_after == 2 * (2 * 4 + 2 * 4)


def test_flops_include_context_terms():
    cfg = ModelConfig(d_m=16, h_q=2, h_kv=2, d_qk=8, d_vo=8, d_inter=32)
    plan = LayerPlan(r_qk=4, r_vo=6, r_mlp=16)
    acc = accounting(cfg, plan, context_length=100)
    assert acc.flops_after == 2 * acc.params_after + 2 * 2 * 100 * (4 + 6)


def test_grouped_value_heads_depend_on_variant():
    assert value_heads(PIPELINE_CONFIG, OvVariant.GQA_JOINT) == 2
    assert value_heads(PIPELINE_CONFIG, OvVariant.PER_HEAD) == 4
    assert value_heads(PIPELINE_CONFIG, OvVariant.OVERALL) == 4


def test_overall_variant_shares_the_output_projection():
    cfg = ModelConfig(d_m=16, h_q=2, h_kv=2, d_qk=4, d_vo=4, d_inter=8)
    plan = LayerPlan(r_qk=4, r_vo=4, r_mlp=8, ov_variant=OvVariant.OVERALL)
    acc = accounting(cfg, plan, context_length=0)
    per_head = accounting(cfg, plan.model_copy(update={"ov_variant": OvVariant.PER_HEAD}), context_length=0)
    assert per_head.params_after - acc.params_after == 4 * 16


def test_ratio_half_maps_to_half_ranks():
    cfg = ModelConfig(d_m=32, h_q=4, h_kv=4, d_qk=8, d_vo=8, d_inter=64)
    layer = ratio_to_ranks(cfg, 0.5).layers[0]
    assert (layer.r_qk, layer.r_vo, layer.r_mlp) == (4, 4, 32)


def test_ratio_point_two_on_pipeline_shape():
    plan = ratio_to_ranks(PIPELINE_CONFIG, 0.2)
    layer = plan.layers[0]
    assert (layer.r_qk, layer.r_vo, layer.r_mlp) == (6, 6, 51)
    assert layer.ov_variant == OvVariant.GQA_JOINT
    before = accounting(PIPELINE_CONFIG, full_plan(PIPELINE_CONFIG)).params_before
    assert before == 4 * 32 * 8 + 2 * 32 * 8 + 2 * 32 * 8 + 4 * 8 * 32 + 3 * 32 * 64
    achieved = 1 - plan_params(PIPELINE_CONFIG, plan) / before
    assert abs(achieved - 0.2) < 0.05


def test_ratio_rounds_rope_rank_to_pairs():
    cfg = ModelConfig(d_m=16, h_q=2, h_kv=2, d_qk=8, d_vo=8, d_inter=16, rope_enabled=True)
    assert ratio_to_ranks(cfg, 0.3).layers[0].r_qk == 6
    assert ratio_to_ranks(cfg, 0.4).layers[0].r_qk == 4


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ArgumentError):
        ratio_to_ranks(PIPELINE_CONFIG, ratio)


def test_ratio_that_leaves_no_rank():
    cfg = ModelConfig(d_m=8, h_q=1, h_kv=1, d_qk=2, d_vo=2, d_inter=4)
    with pytest.raises(ArgumentError):
        ratio_to_ranks(cfg, 0.9)


def test_plan_covers_every_layer():
    cfg = PIPELINE_CONFIG.model_copy(update={"n_layers": 3})
    assert len(ratio_to_ranks(cfg, 0.2).layers) == 3
    with pytest.raises(ArgumentError):
        validate_plan(cfg, ratio_to_ranks(PIPELINE_CONFIG, 0.2))


def test_validate_plan_rejects_bad_ranks():
    with pytest.raises(ArgumentError):
        validate_plan(PIPELINE_CONFIG, CompressionPlan(layers=[LayerPlan(r_qk=5, r_vo=8, r_mlp=64)]))
    with pytest.raises(ArgumentError):
        validate_plan(PIPELINE_CONFIG, CompressionPlan(layers=[LayerPlan(r_qk=8, r_vo=9, r_mlp=64)]))
    overall = LayerPlan(r_qk=8, r_vo=20, r_mlp=64, ov_variant=OvVariant.OVERALL)
    validate_plan(PIPELINE_CONFIG, CompressionPlan(layers=[overall]))


def test_embedding_params():
    assert embedding_params(ModelConfig(vocab_size=100, d_m=32)) == 6400
