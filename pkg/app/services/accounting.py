"""Parameter, FLOP and KV-cache accounting for compression plans."""

import logging
from typing import Optional

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import ArgumentError
from app.models.model import MlpVariant, ModelConfig
from app.models.plan import CompressionPlan, LayerAccounting, LayerPlan
from app.models.solution import OvVariant

logger = logging.getLogger(__name__)


def low_rank_params(m: int, n: int, r: int) -> int:
    """Entries of an m x r by r x n factor pair."""
    return r * (m + n)


def saving_ratio(m: int, n: int, r: int) -> float:
    """Factored over dense size, (m + n) r / (m n)."""
    return low_rank_params(m, n, r) / (m * n)


def default_ov_variant(cfg: ModelConfig) -> OvVariant:
    return OvVariant.GQA_JOINT if cfg.is_gqa else OvVariant.PER_HEAD


def full_plan(cfg: ModelConfig) -> LayerPlan:
    return LayerPlan(r_qk=cfg.d_qk, r_vo=cfg.d_vo, r_mlp=cfg.d_inter, ov_variant=default_ov_variant(cfg))


def value_heads(cfg: ModelConfig, variant: OvVariant) -> int:
    """Value projections kept per layer; per-head and overall solutions cannot share them in GQA."""
    if variant == OvVariant.OVERALL or (variant == OvVariant.PER_HEAD and cfg.is_gqa):
        return cfg.h_q
    return cfg.h_kv


def output_heads(cfg: ModelConfig, variant: OvVariant) -> int:
    return 1 if variant == OvVariant.OVERALL else cfg.h_q


def _mlp_mats(cfg: ModelConfig) -> int:
    return 3 if cfg.mlp_variant == MlpVariant.GATED_SILU else 2


def _count(cfg: ModelConfig, r_qk: int, r_vo: int, r_mlp: int, variant: OvVariant, context: int):
    d_m = cfg.d_m
    attention = (
        cfg.h_q * d_m * r_qk
        + cfg.h_kv * d_m * r_qk
        + value_heads(cfg, variant) * d_m * r_vo
        + output_heads(cfg, variant) * r_vo * d_m
    )
    params = attention + _mlp_mats(cfg) * d_m * r_mlp
    # multiply-adds of the projections plus the score and mixing GEMMs over the context
    flops = 2 * params + 2 * cfg.h_q * context * (r_qk + r_vo)
    kv_elements = cfg.h_kv * r_qk + value_heads(cfg, variant) * r_vo
    return params, flops, kv_elements * get_settings().KV_ELEMENT_BYTES


def accounting(cfg: ModelConfig, plan: LayerPlan, context_length: Optional[int] = None) -> LayerAccounting:
    """Per-layer parameters, FLOPs per token and KV bytes per token, before and after."""
    context = get_settings().ACCOUNTING_CONTEXT_LENGTH if context_length is None else context_length
    baseline = default_ov_variant(cfg)
    variant = plan.ov_variant or baseline
    before = _count(cfg, cfg.d_qk, cfg.d_vo, cfg.d_inter, baseline, context)
    after = _count(cfg, plan.r_qk, plan.r_vo, plan.r_mlp, variant, context)
    return LayerAccounting(
        params_before=before[0],
        params_after=after[0],
        flops_before=before[1],
        flops_after=after[1],
        kv_bytes_before=before[2],
        kv_bytes_after=after[2],
    )


def plan_params(cfg: ModelConfig, plan: CompressionPlan) -> int:
    return sum(accounting(cfg, layer).params_after for layer in plan.layers)


def embedding_params(cfg: ModelConfig) -> int:
    """Input embedding plus an untied output head."""
    return 2 * cfg.vocab_size * cfg.d_m


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def ratio_to_ranks(cfg: ModelConfig, ratio: float) -> CompressionPlan:
    """Uniform relative rank reduction hitting `ratio` of the attention+MLP parameters."""
    if not 0.0 < ratio < 1.0:
        raise ArgumentError(f"compression ratio {ratio} outside (0, 1)")
    keep = 1.0 - ratio
    if cfg.rope_enabled:
        r_qk = 2 * _round_half_up(keep * cfg.d_qk / 2)
    else:
        r_qk = _round_half_up(keep * cfg.d_qk)
    r_vo = _round_half_up(keep * cfg.d_vo)
    r_mlp = _round_half_up(keep * cfg.d_inter)
    if min(r_qk, r_vo, r_mlp) < 1:
        raise ArgumentError(
            f"ratio {ratio} leaves a component without rank",
            details=f"r_qk={r_qk}, r_vo={r_vo}, r_mlp={r_mlp}",
        )
    layer = LayerPlan(r_qk=r_qk, r_vo=r_vo, r_mlp=r_mlp, ov_variant=default_ov_variant(cfg))
    logger.info(f"Ratio {ratio} maps to ranks qk={r_qk}, vo={r_vo}, mlp={r_mlp}")
    return CompressionPlan(layers=[layer.model_copy() for _ in range(cfg.n_layers)])


def validate_plan(cfg: ModelConfig, plan: CompressionPlan) -> None:
    """Ranks within range and even on RoPE layers."""
    if len(plan.layers) != cfg.n_layers:
        raise ArgumentError(f"plan covers {len(plan.layers)} layer(s), model has {cfg.n_layers}")
    for index, layer in enumerate(plan.layers):
        vo_limit = cfg.d_m if layer.ov_variant == OvVariant.OVERALL else cfg.d_vo
        if layer.r_qk > cfg.d_qk or layer.r_vo > vo_limit or layer.r_mlp > cfg.d_inter:
            raise ArgumentError(f"layer {index} plan exceeds the original dimensions")
        if cfg.rope_enabled and layer.r_qk % 2 != 0:
            raise ArgumentError(f"layer {index} RoPE rank {layer.r_qk} is odd")
