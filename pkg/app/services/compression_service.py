"""Layer and model compression: method dispatch for the three components."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import ConfigurationError
from app.models.calibration import LayerCorrelations, LayerStats, ModelStats
from app.models.model import ActivationBatch, LayerWeights, ModelConfig, TransformerModel
from app.models.plan import (
    CompressedLayer,
    CompressionOptions,
    CompressionPlan,
    Component,
    LayerPlan,
    MlpMethod,
    OvMethod,
    QkMethod,
)
from app.models.solution import MlpSolution, OvSolution, OvVariant, QkSolution
from app.services import baselines
from app.services.accounting import default_ov_variant, validate_plan
from app.services.calibration import collect_layer_stats, finalize_layer
from app.services.mlp_solver import apply_mlp, mlp_cur_select, selection_from_indices
from app.services.ov_solver import apply_ov, solve_ov_gqa, solve_ov_mha, solve_ov_overall
from app.services.qk_solver import (
    selection_solution,
    solve_qk_gqa,
    solve_qk_gqa_rope,
    solve_qk_mha,
    solve_qk_rope,
)
from app.services.tensor_core import psd_sqrt

logger = logging.getLogger(__name__)

_KV_PATH_QK = (QkMethod.PLAIN_SVD, QkMethod.WHITENED_SVD)
_KV_PATH_OV = (OvMethod.PLAIN_SVD, OvMethod.WHITENED_SVD)


def default_options() -> CompressionOptions:
    return CompressionOptions(damping=get_settings().DEFAULT_DAMPING)


def resolve_ov_variant(cfg: ModelConfig, plan: LayerPlan, options: CompressionOptions) -> OvVariant:
    """Run-level request, then the layer plan, then the natural layout of the model."""
    if plan.ov_method in _KV_PATH_OV:
        return default_ov_variant(cfg)
    return options.ov_variant or plan.ov_variant or default_ov_variant(cfg)


def validate_methods(cfg: ModelConfig, plan: LayerPlan, variant: OvVariant) -> None:
    if cfg.rope_enabled and plan.qk_method in _KV_PATH_QK:
        raise ConfigurationError(
            f"QK method {plan.qk_method.value} cannot be used on RoPE layers",
            details="the folded key factor would not commute with the rotation",
        )
    if variant == OvVariant.OVERALL and plan.ov_method != OvMethod.A3:
        raise ConfigurationError(f"the overall OV variant only supports method a3, got {plan.ov_method.value}")


def _group(cfg: ModelConfig, weights: LayerWeights, kv: int) -> List[np.ndarray]:
    g = cfg.group_size
    return [weights.wq[h] for h in range(kv * g, (kv + 1) * g)]


def solve_qk_component(
    weights: LayerWeights,
    cfg: ModelConfig,
    corr: LayerCorrelations,
    plan: LayerPlan,
    options: CompressionOptions,
) -> List[QkSolution]:
    """One solution per key/value group."""
    method, r, damping = plan.qk_method, plan.r_qk, options.damping
    eye = np.eye(cfg.d_m)
    r_qq = eye if method == QkMethod.A3_K_ONLY else corr.r_qq
    r_kv = eye if method == QkMethod.A3_Q_ONLY else corr.r_kv
    solutions = []
    for kv in range(cfg.h_kv):
        wq_group, wk = _group(cfg, weights, kv), weights.wk[kv]
        if method == QkMethod.CLOVER:
            solution = baselines.clover_qk_group(wq_group, wk, r, options.split, rope=cfg.rope_enabled)
        elif method in (QkMethod.A3, QkMethod.A3_Q_ONLY, QkMethod.A3_K_ONLY):
            if cfg.rope_enabled:
                solution = (
                    solve_qk_gqa_rope(wq_group, wk, r_qq, r_kv, r, damping)
                    if cfg.is_gqa
                    else solve_qk_rope(wq_group[0], wk, r_qq, r_kv, r, damping)
                )
            elif cfg.is_gqa:
                solution = solve_qk_gqa(wq_group, wk, r_qq, r_kv, r, damping, options.split)
            else:
                solution = solve_qk_mha(wq_group[0], wk, r_qq, r_kv, r, damping, options.split)
        elif method == QkMethod.PLAIN_SVD:
            solution = baselines.kv_svd_qk(wq_group, wk, r)
        elif method == QkMethod.WHITENED_SVD:
            solution = baselines.kv_svd_qk(wq_group, wk, r, corr.r_kv, damping)
        else:
            left_raw = np.vstack(wq_group)
            if method == QkMethod.ABS_W:
                keep = baselines.prune_abs_w(left_raw, wk.T, r, paired=cfg.rope_enabled)
            else:
                keep = baselines.prune_wanda(
                    left_raw,
                    wk.T,
                    np.tile(np.diag(corr.r_qq), len(wq_group)),
                    np.diag(corr.r_kv),
                    r,
                    paired=cfg.rope_enabled,
                )
            solution = selection_solution(wq_group, wk, keep, corr.r_qq, corr.r_kv, damping, rope=cfg.rope_enabled)
        solutions.append(solution)
    return solutions


def apply_qk(weights: LayerWeights, cfg: ModelConfig, solutions: Sequence[QkSolution]) -> LayerWeights:
    g = cfg.group_size
    wq = [solutions[cfg.kv_head(h)].wq_tilde[h % g] for h in range(cfg.h_q)]
    wk = [solution.wk_tilde for solution in solutions]
    freq = None
    if cfg.rope_enabled:
        freq = [solutions[cfg.kv_head(h)].freq_indices for h in range(cfg.h_q)]
    return weights.model_copy(update={"wq": wq, "wk": wk, "qk_freq_indices": freq})


def solve_ov_component(
    weights: LayerWeights,
    cfg: ModelConfig,
    corr: LayerCorrelations,
    plan: LayerPlan,
    options: CompressionOptions,
    variant: OvVariant,
) -> List[OvSolution]:
    """Solutions in head order: per query head, per group, or a single stacked one."""
    method, r, damping, split = plan.ov_method, plan.r_vo, options.damping, options.split
    g = cfg.group_size
    if method in _KV_PATH_OV:
        r_kv = corr.r_kv if method == OvMethod.WHITENED_SVD else None
        return [
            baselines.kv_svd_ov(weights.wv[kv], weights.wo[kv * g:(kv + 1) * g], r, r_kv, damping)
            for kv in range(cfg.h_kv)
        ]
    if variant == OvVariant.OVERALL:
        if corr.r_p_cat is None:
            raise ConfigurationError("the overall OV variant needs stacked context statistics")
        wv_all = [weights.wv[weights.value_head(cfg, h)] for h in range(cfg.h_q)]
        return [solve_ov_overall(wv_all, weights.wo, corr.r_p_cat, r, damping, split)]
    if method == OvMethod.CLOVER:
        if variant == OvVariant.PER_HEAD:
            return [
                baselines.clover_ov(weights.wv[weights.value_head(cfg, h)], weights.wo[h], r, split)
                for h in range(cfg.h_q)
            ]
        return [
            baselines.clover_ov_group(weights.wv[kv], weights.wo[kv * g:(kv + 1) * g], r, split)
            for kv in range(cfg.h_kv)
        ]
    if method == OvMethod.A3_XKV:
        head_stats = [corr.r_kv] * cfg.h_q
        group_stats = corr.r_kv
    else:
        head_stats = corr.r_p
        group_stats = corr.r_kv
    if variant == OvVariant.PER_HEAD:
        return [
            solve_ov_mha(weights.wv[weights.value_head(cfg, h)], weights.wo[h], head_stats[h], r, damping, split)
            for h in range(cfg.h_q)
        ]
    return [
        solve_ov_gqa(weights.wv[kv], weights.wo[kv * g:(kv + 1) * g], group_stats, r, damping, split)
        for kv in range(cfg.h_kv)
    ]


def solve_mlp_component(
    weights: LayerWeights,
    cfg: ModelConfig,
    corr: LayerCorrelations,
    plan: LayerPlan,
    options: CompressionOptions,
) -> MlpSolution:
    method, r = plan.mlp_method, plan.r_mlp
    if method == MlpMethod.A3:
        return mlp_cur_select(corr.r_d, weights.wd, r, options.scale_mode, options.damping)
    if method == MlpMethod.ABS_W:
        left = weights.wu if weights.wg is None else np.vstack([weights.wu, weights.wg])
        selected = baselines.prune_abs_w(left, weights.wd, r)
    else:
        d_inter = weights.inter_dim
        selected = baselines.prune_wanda(np.eye(d_inter), weights.wd, np.diag(corr.r_d), np.ones(cfg.d_m), r)
    return selection_from_indices(psd_sqrt(corr.r_d, options.damping), weights.wd, selected)


def compress_layer(
    weights: LayerWeights,
    cfg: ModelConfig,
    stats: LayerStats,
    plan: LayerPlan,
    options: Optional[CompressionOptions] = None,
    batches: Optional[Sequence[ActivationBatch]] = None,
) -> CompressedLayer:
    """
    Compress QK, OV and MLP of one layer; `weights` is left untouched.

    Args:
        weights: Original layer
        cfg: Shape of the layer, selecting the MHA, GQA and RoPE solver paths
        stats: Calibration accumulators of this layer
        plan: Ranks and methods per component
        options: Damping, MLP scaling, OV variant and factor split; settings defaults when omitted
        batches: Calibration batches, only needed with `recalibrate_after_qk`

    Returns:
        Compressed weights with the resolved plan and softmax dimension

    Raises:
        ConfigurationError: If a method does not fit the layer or the OV variant
        ArgumentError: If a rank is out of range
    """
    options = options or default_options()
    variant = resolve_ov_variant(cfg, plan, options)
    validate_methods(cfg, plan, variant)
    corr = finalize_layer(stats)

    qk_solutions = solve_qk_component(weights, cfg, corr, plan, options)
    compressed = apply_qk(weights, cfg, qk_solutions)

    ov_corr = corr
    if options.recalibrate_after_qk:
        if not batches:
            raise ConfigurationError("recalibration after QK compression needs calibration batches")
        ov_corr = finalize_layer(
            collect_layer_stats(compressed, cfg, batches, with_concat=variant == OvVariant.OVERALL)
        )
        logger.debug("recalibrated context statistics on the compressed QK path")
    compressed = apply_ov(compressed, solve_ov_component(compressed, cfg, ov_corr, plan, options, variant))
    compressed = apply_mlp(compressed, solve_mlp_component(weights, cfg, corr, plan, options))
    compressed.validate_against(cfg)

    softmax_dim = compressed.qk_dim if cfg.scale_by_reduced_dim else cfg.d_qk
    return CompressedLayer(
        weights=compressed,
        plan=plan.model_copy(update={"ov_variant": variant}),
        softmax_dim=softmax_dim,
        ov_variant=variant,
    )


def compress_model(
    model: TransformerModel,
    stats: ModelStats,
    plan: CompressionPlan,
    options: Optional[CompressionOptions] = None,
    batches: Optional[Sequence[ActivationBatch]] = None,
) -> Tuple[TransformerModel, List[CompressedLayer]]:
    cfg = model.config
    validate_plan(cfg, plan)
    if len(stats.layers) != len(model.layers):
        raise ConfigurationError(f"statistics cover {len(stats.layers)} layer(s), model has {len(model.layers)}")
    layers = []
    for index, (weights, layer_stats, layer_plan) in enumerate(zip(model.layers, stats.layers, plan.layers)):
        layers.append(compress_layer(weights, cfg, layer_stats, layer_plan, options, batches))
        logger.info(
            f"Compressed layer {index}: r_qk={layer_plan.r_qk} ({layer_plan.qk_method.value}), "
            f"r_vo={layer_plan.r_vo} ({layer_plan.ov_method.value}), "
            f"r_mlp={layer_plan.r_mlp} ({layer_plan.mlp_method.value})"
        )
    compressed = TransformerModel(config=cfg, layers=[layer.weights for layer in layers])
    return compressed, layers


def component_objective(
    weights: LayerWeights,
    cfg: ModelConfig,
    corr: LayerCorrelations,
    component: Component,
    rank: int,
    options: Optional[CompressionOptions] = None,
) -> float:
    """Closed-form objective of the default method for one component at `rank`."""
    options = options or default_options()
    plan = LayerPlan(
        r_qk=rank if component == Component.QK else cfg.d_qk,
        r_vo=rank if component == Component.OV else cfg.d_vo,
        r_mlp=rank if component == Component.MLP else cfg.d_inter,
    )
    if component == Component.QK:
        return float(sum(s.objective_value for s in solve_qk_component(weights, cfg, corr, plan, options)))
    if component == Component.OV:
        variant = resolve_ov_variant(cfg, plan, options)
        return float(sum(s.objective_value for s in solve_ov_component(weights, cfg, corr, plan, options, variant)))
    return solve_mlp_component(weights, cfg, corr, plan, options).objective_value
