"""Output-preserving compression of value/output projections."""

import logging
from typing import List, Sequence

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import ArgumentError, EmptyCalibrationError
from app.models.model import ActivationBatch, LayerWeights, ModelConfig
from app.models.plan import OvErrorEstimate
from app.models.solution import FactorSplit, OvSolution, OvVariant
from app.services import forward
from app.services.qk_solver import split_factors
from app.services.tensor_core import as_matrix, squared_frobenius, svd, whitening_pair

logger = logging.getLogger(__name__)


def _fused(wv: np.ndarray, wo: np.ndarray) -> np.ndarray:
    wv = as_matrix(wv, "Wv")
    wo = as_matrix(wo, "Wo")
    if wv.shape[1] != wo.shape[0] or wv.shape[0] != wo.shape[1]:
        raise ArgumentError(f"value {wv.shape} and output {wo.shape} projections do not compose")
    return wv @ wo


def solve_ov_mha(
    wv: np.ndarray,
    wo: np.ndarray,
    r_p: np.ndarray,
    r: int,
    damping: float = 0.0,
    split: FactorSplit = FactorSplit.STANDARD,
) -> OvSolution:
    """One-sided whitened truncated SVD of W_v W_o under the head's context statistics."""
    w_vo = _fused(wv, wo)
    d_vo = np.asarray(wv).shape[1]
    if not 1 <= r <= d_vo:
        raise ArgumentError(f"OV rank {r} outside [1, {d_vo}]")
    s, s_inv = whitening_pair(r_p, damping)
    f = svd(s @ w_vo)
    left, right = split_factors(f.u[:, :r], f.s[:r], f.vt[:r, :], split)
    wv_tilde = s_inv @ left
    objective = float(squared_frobenius(s @ (w_vo - wv_tilde @ right)))
    logger.debug(f"OV per-head SVD rank {r}: objective {objective:.6e}")
    return OvSolution(
        wv_tilde=[wv_tilde],
        wo_tilde=[right],
        objective_value=objective,
        variant=OvVariant.PER_HEAD,
        kv_dim=r,
    )


def solve_ov_gqa(
    wv_shared: np.ndarray,
    wo_group: Sequence[np.ndarray],
    r_kv: np.ndarray,
    r: int,
    damping: float = 0.0,
    split: FactorSplit = FactorSplit.STANDARD,
) -> OvSolution:
    """Joint SVD of the horizontally stacked S_kv W_vo,i of one group.

    The singular values go to the shared value projection so that every output
    head is a plain slice of V^T.
    """
    if len(wo_group) < 1:
        raise ArgumentError("an OV group needs at least one output head")
    d_m, d_vo = np.asarray(wv_shared).shape
    if not 1 <= r <= d_vo:
        raise ArgumentError(f"OV rank {r} outside [1, {d_vo}]")
    fused = [_fused(wv_shared, wo) for wo in wo_group]
    s, s_inv = whitening_pair(r_kv, damping)
    f = svd(np.hstack([s @ w for w in fused]))
    if split == FactorSplit.BALANCED:
        root = np.sqrt(f.s[:r])
        left, right = f.u[:, :r] * root, root[:, None] * f.vt[:r, :]
    else:
        left, right = f.u[:, :r] * f.s[:r], f.vt[:r, :]
    wv_tilde = s_inv @ left
    wo_tilde = [right[:, i * d_m:(i + 1) * d_m].copy() for i in range(len(fused))]
    objective = float(sum(squared_frobenius(s @ (w - wv_tilde @ wo)) for w, wo in zip(fused, wo_tilde)))
    logger.debug(f"OV joint SVD over {len(fused)} head(s), rank {r}: objective {objective:.6e}")
    return OvSolution(
        wv_tilde=[wv_tilde],
        wo_tilde=wo_tilde,
        objective_value=objective,
        variant=OvVariant.GQA_JOINT,
        kv_dim=r,
    )


def solve_ov_overall(
    wv_all: Sequence[np.ndarray],
    wo_all: Sequence[np.ndarray],
    r_p_cat: np.ndarray,
    r: int,
    damping: float = 0.0,
    split: FactorSplit = FactorSplit.STANDARD,
) -> OvSolution:
    """Whitened SVD of the vertically stacked W_vo,i under the concatenated context statistics.

    Yields one value projection per query head and one output projection shared
    by all heads, so the value cache holds h_q * r elements per token.
    """
    if len(wv_all) != len(wo_all) or not wv_all:
        raise ArgumentError("overall OV needs one value and one output projection per query head")
    heads = len(wv_all)
    d_m = np.asarray(wv_all[0]).shape[0]
    guard = get_settings().MAX_OVERALL_DIM
    if heads * d_m > guard:
        raise ArgumentError(f"stacked OV dimension {heads * d_m} exceeds the limit {guard}")
    if not 1 <= r <= d_m:
        raise ArgumentError(f"overall OV rank {r} outside [1, {d_m}]")
    stacked = np.vstack([_fused(wv, wo) for wv, wo in zip(wv_all, wo_all)])
    s, s_inv = whitening_pair(r_p_cat, damping)
    if s.shape[0] != stacked.shape[0]:
        raise ArgumentError(f"stacked statistics of dim {s.shape[0]} do not match {stacked.shape[0]}")
    f = svd(s @ stacked)
    left, right = split_factors(f.u[:, :r], f.s[:r], f.vt[:r, :], split)
    left = s_inv @ left
    objective = float(squared_frobenius(s @ (stacked - left @ right)))
    logger.debug(f"OV overall SVD over {heads} head(s), rank {r}: objective {objective:.6e}")
    return OvSolution(
        wv_tilde=[left[i * d_m:(i + 1) * d_m].copy() for i in range(heads)],
        wo_tilde=[right],
        objective_value=objective,
        variant=OvVariant.OVERALL,
        kv_dim=heads * r,
    )


def apply_ov(weights: LayerWeights, solutions: Sequence[OvSolution]) -> LayerWeights:
    """Layer with its value/output projections replaced.

    Solutions are given in head order (query heads for per_head, groups for
    gqa_joint, a single one for overall); their projections are concatenated.
    """
    wv: List[np.ndarray] = []
    wo: List[np.ndarray] = []
    for solution in solutions:
        wv.extend(solution.wv_tilde)
        wo.extend(solution.wo_tilde)
    return weights.model_copy(update={"wv": wv, "wo": wo})


def ov_objective_mc(
    weights: LayerWeights,
    compressed: LayerWeights,
    cfg: ModelConfig,
    batches: Sequence[ActivationBatch],
) -> OvErrorEstimate:
    """Per-token attention-output error of `compressed`, with the per-head error sum for bound checks."""
    if not batches:
        raise EmptyCalibrationError("OV error estimation needs at least one batch")
    totals, head_sums, triangles = [], [], []
    for batch in batches:
        errors = [
            a - b
            for a, b in zip(forward.head_outputs(weights, cfg, batch), forward.head_outputs(compressed, cfg, batch))
        ]
        norms = np.sqrt([float(squared_frobenius(e)) for e in errors])
        totals.append(float(squared_frobenius(sum(errors))) / batch.tokens)
        head_sums.append(float(np.sum(norms ** 2)) / batch.tokens)
        triangles.append(float(np.sum(norms)) ** 2 / batch.tokens)
    return OvErrorEstimate(
        total=float(np.mean(totals)),
        per_head_sum=float(np.mean(head_sums)),
        batch_totals=totals,
        batch_per_head_sums=head_sums,
        batch_triangle_bounds=triangles,
        heads=cfg.h_q,
    )
