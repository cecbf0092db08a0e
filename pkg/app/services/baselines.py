"""Reference compressors sharing the solvers' interfaces."""

import logging
from typing import Optional, Sequence

import numpy as np

from app.core.exceptions import ArgumentError
from app.models.solution import FactorSplit, LowRankFactors, OvSolution, OvVariant, QkSolution
from app.services.ov_solver import solve_ov_gqa, solve_ov_mha
from app.services.qk_solver import solve_qk_gqa, solve_qk_gqa_rope
from app.services.tensor_core import (
    as_matrix,
    cur_scores,
    pair_columns,
    pair_sum,
    svd,
    top_indices,
    whitening_pair,
)

logger = logging.getLogger(__name__)


def plain_svd_layer(w: np.ndarray, r: int) -> LowRankFactors:
    """Eckart-Young truncation; error is the discarded squared singular values."""
    m = as_matrix(w, "W")
    if not 1 <= r <= min(m.shape):
        raise ArgumentError(f"rank {r} outside [1, {min(m.shape)}]")
    f = svd(m)
    return LowRankFactors(
        left=f.u[:, :r].copy(),
        right=f.s[:r, None] * f.vt[:r, :],
        error=float(np.sum(f.s[r:] ** 2)),
    )


def whitened_svd_layer(w: np.ndarray, r_xx: np.ndarray, r: int, damping: float = 0.0) -> LowRankFactors:
    """Minimises E||xW - xW~||^2 via (R^1/2)^-1 SVD_r(R^1/2 W)."""
    m = as_matrix(w, "W")
    s, s_inv = whitening_pair(r_xx, damping)
    if s.shape[0] != m.shape[0]:
        raise ArgumentError(f"statistics of dim {s.shape[0]} do not match W rows {m.shape[0]}")
    factors = plain_svd_layer(s @ m, r)
    return LowRankFactors(left=s_inv @ factors.left, right=factors.right, error=factors.error)


def clover_qk(
    wq: np.ndarray, wk: np.ndarray, r: int, split: FactorSplit = FactorSplit.STANDARD, rope: bool = False
) -> QkSolution:
    """The score-preserving SVD with identity statistics.

    On RoPE heads the SVD would mix rotated pairs, so the paired selection runs
    with identity statistics instead.
    """
    return clover_qk_group([wq], wk, r, split, rope)


def clover_qk_group(
    wq_group: Sequence[np.ndarray],
    wk: np.ndarray,
    r: int,
    split: FactorSplit = FactorSplit.STANDARD,
    rope: bool = False,
) -> QkSolution:
    eye = np.eye(np.asarray(wk).shape[0])
    if rope:
        return solve_qk_gqa_rope(wq_group, wk, eye, eye, r, 0.0)
    return solve_qk_gqa(wq_group, wk, eye, eye, r, 0.0, split)


def clover_ov(
    wv: np.ndarray, wo: np.ndarray, r: int, split: FactorSplit = FactorSplit.STANDARD
) -> OvSolution:
    eye = np.eye(np.asarray(wv).shape[0])
    return solve_ov_mha(wv, wo, eye, r, 0.0, split)


def clover_ov_group(
    wv: np.ndarray, wo_group: Sequence[np.ndarray], r: int, split: FactorSplit = FactorSplit.STANDARD
) -> OvSolution:
    eye = np.eye(np.asarray(wv).shape[0])
    return solve_ov_gqa(wv, wo_group, eye, r, 0.0, split)


def kv_svd_qk(
    wq_group: Sequence[np.ndarray],
    wk: np.ndarray,
    r: int,
    r_kv: Optional[np.ndarray] = None,
    damping: float = 0.0,
) -> QkSolution:
    """Factor the key projection alone, W_k ~ A B, and fold B into every query head.

    With `r_kv` the factorization is whitened by the key-input statistics.
    The objective is the key-projection fitting error.
    """
    factors = plain_svd_layer(wk, r) if r_kv is None else whitened_svd_layer(wk, r_kv, r, damping)
    return QkSolution(
        wq_tilde=[np.asarray(w, dtype=np.float64) @ factors.right.T for w in wq_group],
        wk_tilde=factors.left,
        objective_value=factors.error,
    )


def kv_svd_ov(
    wv: np.ndarray,
    wo_group: Sequence[np.ndarray],
    r: int,
    r_kv: Optional[np.ndarray] = None,
    damping: float = 0.0,
) -> OvSolution:
    """Factor the value projection alone, W_v ~ A B, and fold B into every output head."""
    factors = plain_svd_layer(wv, r) if r_kv is None else whitened_svd_layer(wv, r_kv, r, damping)
    return OvSolution(
        wv_tilde=[factors.left],
        wo_tilde=[factors.right @ np.asarray(wo, dtype=np.float64) for wo in wo_group],
        objective_value=factors.error,
        variant=OvVariant.GQA_JOINT if len(wo_group) > 1 else OvVariant.PER_HEAD,
        kv_dim=r,
    )


def _select(scores: np.ndarray, r: int, paired: bool) -> np.ndarray:
    d = scores.shape[0]
    if not 1 <= r <= d:
        raise ArgumentError(f"selection size {r} outside [1, {d}]")
    if not paired:
        return top_indices(scores, r)
    if r % 2 != 0:
        raise ArgumentError(f"paired selection size {r} must be even")
    return pair_columns(top_indices(pair_sum(scores), r // 2))


def prune_abs_w(left: np.ndarray, right: np.ndarray, r: int, paired: bool = False) -> np.ndarray:
    """Keep columns of L / rows of R by their summed absolute weights."""
    left = as_matrix(left, "L")
    right = as_matrix(right, "R")
    if left.shape[1] != right.shape[0]:
        raise ArgumentError(f"L {left.shape} and R {right.shape} do not compose")
    scores = np.sum(np.abs(left), axis=0) + np.sum(np.abs(right), axis=1)
    return _select(scores, r, paired)


def prune_wanda(
    left_raw: np.ndarray,
    right_raw: np.ndarray,
    diag_left: np.ndarray,
    diag_right: np.ndarray,
    r: int,
    paired: bool = False,
) -> np.ndarray:
    """Whitened energy scoring with the statistics reduced to their diagonals."""
    left_raw = as_matrix(left_raw, "L")
    right_raw = as_matrix(right_raw, "R")
    diag_left = np.asarray(diag_left, dtype=np.float64)
    diag_right = np.asarray(diag_right, dtype=np.float64)
    if diag_left.shape != (left_raw.shape[0],) or diag_right.shape != (right_raw.shape[1],):
        raise ArgumentError("diagonal statistics do not match the weight shapes")
    if np.any(diag_left < 0) or np.any(diag_right < 0):
        raise ArgumentError("diagonal statistics must be non-negative")
    left = np.sqrt(diag_left)[:, None] * left_raw
    right = right_raw * np.sqrt(diag_right)[None, :]
    return _select(cur_scores(left, right), r, paired)
