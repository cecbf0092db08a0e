"""Streaming autocorrelation statistics and the synthetic calibration stream."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats as sps

from app.core.config import get_settings
from app.core.exceptions import ArgumentError, EmptyCalibrationError
from app.models.calibration import CorrAccumulator, LayerCorrelations, LayerStats, ModelStats
from app.models.model import ActivationBatch, LayerWeights, ModelConfig, TransformerModel
from app.services import forward
from app.services.tensor_core import psd_sqrt

logger = logging.getLogger(__name__)


def accumulate(acc: CorrAccumulator, x: np.ndarray) -> CorrAccumulator:
    """Add X^T X of a T x dim block; returns a new accumulator."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != acc.dim:
        raise ArgumentError(f"block of shape {x.shape} does not match accumulator dim {acc.dim}")
    return CorrAccumulator(dim=acc.dim, sum_outer=acc.sum_outer + x.T @ x, n=acc.n + x.shape[0])


def merge(a: CorrAccumulator, b: CorrAccumulator) -> CorrAccumulator:
    if a.dim != b.dim:
        raise ArgumentError(f"cannot merge accumulators of dims {a.dim} and {b.dim}")
    return CorrAccumulator(dim=a.dim, sum_outer=a.sum_outer + b.sum_outer, n=a.n + b.n)


def finalize(acc: CorrAccumulator) -> np.ndarray:
    """Sample autocorrelation sum_outer / n."""
    if acc.n == 0:
        raise EmptyCalibrationError("cannot finalize an accumulator without samples")
    r = acc.sum_outer / acc.n
    return 0.5 * (r + r.T)


def finalize_layer(stats: LayerStats) -> LayerCorrelations:
    return LayerCorrelations(
        r_qq=finalize(stats.r_qq),
        r_kv=finalize(stats.r_kv),
        r_p=[finalize(acc) for acc in stats.r_p],
        r_d=finalize(stats.r_d),
        r_p_cat=None if stats.r_p_cat is None else finalize(stats.r_p_cat),
    )


def empty_layer_stats(cfg: ModelConfig, d_inter: Optional[int] = None, with_concat: bool = False) -> LayerStats:
    d_inter = cfg.d_inter if d_inter is None else d_inter
    return LayerStats(
        r_qq=CorrAccumulator.zeros(cfg.d_m),
        r_kv=CorrAccumulator.zeros(cfg.d_m),
        r_p=[CorrAccumulator.zeros(cfg.d_m) for _ in range(cfg.h_q)],
        r_d=CorrAccumulator.zeros(d_inter),
        r_p_cat=CorrAccumulator.zeros(cfg.h_q * cfg.d_m) if with_concat else None,
    )


def merge_layer_stats(a: LayerStats, b: LayerStats) -> LayerStats:
    return LayerStats(
        r_qq=merge(a.r_qq, b.r_qq),
        r_kv=merge(a.r_kv, b.r_kv),
        r_p=[merge(x, y) for x, y in zip(a.r_p, b.r_p)],
        r_d=merge(a.r_d, b.r_d),
        r_p_cat=None if a.r_p_cat is None else merge(a.r_p_cat, b.r_p_cat),
    )


def accumulate_batch(
    stats: LayerStats, weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch
) -> LayerStats:
    """Fold one batch into every accumulator of a layer."""
    contexts = forward.head_contexts(weights, cfg, batch)
    x_d, _ = forward.mlp_forward(weights, cfg, batch.x)
    r_p_cat = None
    if stats.r_p_cat is not None:
        r_p_cat = accumulate(stats.r_p_cat, np.hstack(contexts))
    return LayerStats(
        r_qq=accumulate(stats.r_qq, batch.x),
        r_kv=accumulate(stats.r_kv, batch.kv),
        r_p=[accumulate(acc, p) for acc, p in zip(stats.r_p, contexts)],
        r_d=accumulate(stats.r_d, x_d),
        r_p_cat=r_p_cat,
    )


def collect_layer_stats(
    weights: LayerWeights,
    cfg: ModelConfig,
    batches: Sequence[ActivationBatch],
    with_concat: bool = False,
    workers: Optional[int] = None,
) -> LayerStats:
    """
    Calibrate one layer.

    Batches are split into contiguous shards, accumulated independently and merged
    in shard order, so the result does not depend on scheduling.

    Args:
        weights: Layer whose projections produce the context and MLP streams
        cfg: Shape of the layer
        batches: Calibration activations
        with_concat: Also accumulate the stacked context statistics for the overall OV variant
        workers: Shard count; defaults to CALIBRATION_WORKERS

    Returns:
        Unnormalised accumulators for every statistic family

    Raises:
        EmptyCalibrationError: If no batch is given
        ArgumentError: If the stacked statistics would exceed MAX_OVERALL_DIM
    """
    if not batches:
        raise EmptyCalibrationError("calibration needs at least one batch")
    workers = workers or get_settings().CALIBRATION_WORKERS
    workers = max(1, min(workers, len(batches)))
    if with_concat:
        guard = get_settings().MAX_OVERALL_DIM
        if cfg.h_q * cfg.d_m > guard:
            raise ArgumentError(f"stacked statistics of dim {cfg.h_q * cfg.d_m} exceed the limit {guard}")

    def run_shard(shard: Sequence[ActivationBatch]) -> LayerStats:
        stats = empty_layer_stats(cfg, weights.inter_dim, with_concat)
        for batch in shard:
            stats = accumulate_batch(stats, weights, cfg, batch)
        return stats

    bounds = np.linspace(0, len(batches), workers + 1).astype(int)
    shards = [batches[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    if workers == 1:
        partials = [run_shard(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run_shard, shards))
    stats = partials[0]
    for partial in partials[1:]:
        stats = merge_layer_stats(stats, partial)
    logger.debug(f"calibrated layer on {stats.r_qq.n} tokens across {workers} shard(s)")
    return stats


def collect_model_stats(
    model: TransformerModel,
    batches: Sequence[ActivationBatch],
    with_concat: bool = False,
    workers: Optional[int] = None,
) -> ModelStats:
    """Calibrate every layer; each layer reads the same hidden-state stream."""
    layers = [
        collect_layer_stats(layer, model.config, batches, with_concat=with_concat, workers=workers)
        for layer in model.layers
    ]
    logger.info(f"Calibrated {len(layers)} layer(s) on {len(batches)} batch(es)")
    return ModelStats(layers=layers)


def make_covariance(
    dim: int,
    rng: np.random.Generator,
    decay_ratio: float = 100.0,
    channel_spread: float = 1.0,
) -> np.ndarray:
    """Non-white covariance: random orthogonal basis, geometric spectrum, optional outlier channels."""
    if decay_ratio < 1.0 or channel_spread < 1.0:
        raise ArgumentError("decay_ratio and channel_spread must be >= 1")
    basis = sps.ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.ones((1, 1))
    spectrum = decay_ratio ** (-np.arange(dim) / max(dim - 1, 1))
    cov = (basis * spectrum) @ basis.T
    scales = np.sqrt(channel_spread ** np.linspace(0.0, 1.0, dim))
    scales = scales[rng.permutation(dim)]
    cov = cov * np.outer(scales, scales)
    return 0.5 * (cov + cov.T)


def sample_gaussian(cov: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rows drawn from N(0, cov); works for singular covariances."""
    root = psd_sqrt(cov)
    return rng.standard_normal((count, cov.shape[0])) @ root


def generate_batches(
    cov: np.ndarray,
    n_batches: int,
    tokens: int,
    rng: np.random.Generator,
    distinct_kv_cov: Optional[np.ndarray] = None,
) -> List[ActivationBatch]:
    """Seeded hidden-state sequences with positions 0..T-1."""
    if n_batches < 1 or tokens < 1:
        raise EmptyCalibrationError("calibration needs at least one batch of one token")
    batches = []
    for _ in range(n_batches):
        x = sample_gaussian(cov, tokens, rng)
        x_kv = None if distinct_kv_cov is None else sample_gaussian(distinct_kv_cov, tokens, rng)
        batches.append(ActivationBatch(x=x, positions=np.arange(tokens), x_kv=x_kv))
    return batches
