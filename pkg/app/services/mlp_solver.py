"""Intermediate-channel selection for the feed-forward block."""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ArgumentError, EmptyCalibrationError
from app.models.model import ActivationBatch, LayerWeights, ModelConfig
from app.models.solution import MlpSolution, MonteCarloEstimate, ScaleMode
from app.services import forward
from app.services.tensor_core import as_matrix, cur_residual, cur_scores, psd_sqrt, top_indices

logger = logging.getLogger(__name__)


def channel_scores(s: np.ndarray, wd: np.ndarray) -> np.ndarray:
    """lambda_i = ||S_:,i||^2 ||W_d,i,:||^2."""
    return cur_scores(s, wd)


def selection_weights(scores: np.ndarray, selected: np.ndarray, scale_mode: ScaleMode) -> np.ndarray:
    """u_i for each selected channel: 1, or 1/(r lambda_i) with zero-energy channels mapped to 0."""
    if scale_mode == ScaleMode.NONE:
        return np.ones(selected.shape[0])
    picked = scores[selected]
    u = np.zeros_like(picked)
    nonzero = picked > 0
    u[nonzero] = 1.0 / (selected.shape[0] * picked[nonzero])
    return u


def mlp_cur_select(
    r_d: np.ndarray,
    wd: np.ndarray,
    r: int,
    scale_mode: ScaleMode = ScaleMode.NONE,
    damping: float = 0.0,
) -> MlpSolution:
    """Keep the r intermediate channels whose rank-one terms of S W_d carry the most energy."""
    wd = as_matrix(wd, "Wd")
    d_inter = wd.shape[0]
    if not 1 <= r <= d_inter:
        raise ArgumentError(f"MLP rank {r} outside [1, {d_inter}]")
    s = psd_sqrt(r_d, damping)
    if s.shape[0] != d_inter:
        raise ArgumentError(f"intermediate statistics of dim {s.shape[0]} do not match Wd rows {d_inter}")
    scores = channel_scores(s, wd)
    selected = top_indices(scores, r)
    return selection_from_indices(s, wd, selected, scores, scale_mode)


def selection_from_indices(
    s: np.ndarray,
    wd: np.ndarray,
    selected: np.ndarray,
    scores: Optional[np.ndarray] = None,
    scale_mode: ScaleMode = ScaleMode.NONE,
) -> MlpSolution:
    """MlpSolution for an externally chosen channel set, scored with the whitened objective."""
    selected = np.sort(np.asarray(selected, dtype=np.int64))
    if scores is None:
        scores = channel_scores(s, wd)
    u = selection_weights(scores, selected, scale_mode)
    scale = None if scale_mode == ScaleMode.NONE else u
    objective = cur_residual(s, wd, selected, scale)
    logger.debug(f"MLP selection of {selected.shape[0]} channel(s): objective {objective:.6e}")
    return MlpSolution(selected=selected, scale_mode=scale_mode, u_values=u, objective_value=objective)


def compress_mlp(
    wu: np.ndarray,
    wg: Optional[np.ndarray],
    wd: np.ndarray,
    solution: MlpSolution,
) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """Slice the selected channels out of W_u, W_g and W_d; W_d rows are scaled by u."""
    d_inter = np.asarray(wd).shape[0]
    selected = solution.selected
    if selected.size == 0 or selected.min() < 0 or selected.max() >= d_inter:
        raise ArgumentError(f"selected channels outside [0, {d_inter})")
    if np.asarray(wu).shape[1] != d_inter or (wg is not None and np.asarray(wg).shape[1] != d_inter):
        raise ArgumentError("up/gate projections do not match the down projection")
    wu_tilde = np.asarray(wu, dtype=np.float64)[:, selected].copy()
    wg_tilde = None if wg is None else np.asarray(wg, dtype=np.float64)[:, selected].copy()
    wd_tilde = np.asarray(wd, dtype=np.float64)[selected, :] * solution.u_values[:, None]
    return wu_tilde, wg_tilde, wd_tilde


def apply_mlp(weights: LayerWeights, solution: MlpSolution) -> LayerWeights:
    wu, wg, wd = compress_mlp(weights.wu, weights.wg, weights.wd, solution)
    return weights.model_copy(update={"wu": wu, "wg": wg, "wd": wd})


def mlp_objective_mc(
    weights: LayerWeights,
    cfg: ModelConfig,
    solution: MlpSolution,
    batches: Sequence[ActivationBatch],
) -> MonteCarloEstimate:
    """Per-token mean of ||x_d U W_d - x_d W_d||^2 measured by running both MLPs."""
    if not batches:
        raise EmptyCalibrationError("MLP error estimation needs at least one batch")
    compressed = apply_mlp(weights, solution)
    values = []
    for batch in batches:
        _, y = forward.mlp_forward(weights, cfg, batch.x)
        _, y_tilde = forward.mlp_forward(compressed, cfg, batch.x)
        values.append(np.sum((y_tilde - y) ** 2, axis=1))
    values = np.concatenate(values)
    n = values.shape[0]
    std_error = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return MonteCarloEstimate(mean=float(values.mean()), std_error=std_error, samples=n)
