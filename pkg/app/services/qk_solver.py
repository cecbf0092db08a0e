"""Score-preserving compression of query/key projections.

Every path minimises the expected squared pre-softmax score error, which for
independent query and key/value inputs reduces to
||R_qq^1/2 (W_qk - W~_qk) R_kv^1/2||_F^2.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ArgumentError
from app.models.solution import FactorSplit, MonteCarloEstimate, QkSolution
from app.services.calibration import sample_gaussian
from app.services.tensor_core import (
    as_matrix,
    cur_residual,
    cur_scores,
    pair_columns,
    pair_sum,
    squared_frobenius,
    svd,
    top_indices,
    whitening_pair,
)

logger = logging.getLogger(__name__)

_MC_CHUNK = 100_000


def _check_rank(r: int, d_qk: int) -> None:
    if not 1 <= r <= d_qk:
        raise ArgumentError(f"QK rank {r} outside [1, {d_qk}]")


def _check_group(wq_group: Sequence[np.ndarray], wk_shared: np.ndarray) -> Tuple[list, np.ndarray]:
    if len(wq_group) < 1:
        raise ArgumentError("a QK group needs at least one query head")
    wk = as_matrix(wk_shared, "Wk")
    wqs = [as_matrix(w, "Wq") for w in wq_group]
    if any(w.shape != wk.shape for w in wqs):
        raise ArgumentError(
            "query and key projections of a group must share one shape",
            details=f"Wk {wk.shape}, Wq {[w.shape for w in wqs]}",
        )
    return wqs, wk


def split_factors(
    u: np.ndarray, s: np.ndarray, vt: np.ndarray, split: FactorSplit
) -> Tuple[np.ndarray, np.ndarray]:
    """Left factor U and right factor diag(s) Vt, or sqrt(s) on both sides."""
    if split == FactorSplit.BALANCED:
        root = np.sqrt(s)
        return u * root, root[:, None] * vt
    return u, s[:, None] * vt


def qk_objective(w_qk: np.ndarray, w_tilde: np.ndarray, s_q: np.ndarray, s_kv: np.ndarray) -> np.ndarray:
    """||S_q (W - W~) S_kv||_F^2; broadcasts over stacked candidates."""
    return squared_frobenius(s_q @ (w_qk - w_tilde) @ s_kv)


def solve_qk_mha(
    wq: np.ndarray,
    wk: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    r: int,
    damping: float = 0.0,
    split: FactorSplit = FactorSplit.STANDARD,
) -> QkSolution:
    """Two-sided whitened truncated SVD of one head's fused W_q W_k^T."""
    return solve_qk_gqa([wq], wk, r_qq, r_kv, r, damping, split)


def solve_qk_gqa(
    wq_group: Sequence[np.ndarray],
    wk_shared: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    r: int,
    damping: float = 0.0,
    split: FactorSplit = FactorSplit.STANDARD,
) -> QkSolution:
    """Joint SVD over the vertically stacked whitened heads of one group."""
    wqs, wk = _check_group(wq_group, wk_shared)
    d_m, d_qk = wk.shape
    _check_rank(r, d_qk)
    s_q, s_q_inv = whitening_pair(r_qq, damping)
    s_kv, s_kv_inv = whitening_pair(r_kv, damping)
    fused = [w @ wk.T for w in wqs]
    stacked = np.vstack([s_q @ w @ s_kv for w in fused])
    f = svd(stacked)
    left, right = split_factors(f.u[:, :r], f.s[:r], f.vt[:r, :], split)
    wq_tilde = [s_q_inv @ left[i * d_m:(i + 1) * d_m] for i in range(len(wqs))]
    wk_tilde = (right @ s_kv_inv).T
    objective = float(sum(qk_objective(w, wq_t @ wk_tilde.T, s_q, s_kv) for w, wq_t in zip(fused, wq_tilde)))
    logger.debug(f"QK joint SVD over {len(wqs)} head(s), rank {r}: objective {objective:.6e}")
    return QkSolution(wq_tilde=wq_tilde, wk_tilde=wk_tilde, objective_value=objective)


def rope_factors(
    wq_group: Sequence[np.ndarray],
    wk: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    damping: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """L = stacked S_q W_q,i and R = W_k^T S_kv."""
    s_q, _ = whitening_pair(r_qq, damping)
    s_kv, _ = whitening_pair(r_kv, damping)
    left = np.vstack([s_q @ np.asarray(w, dtype=np.float64) for w in wq_group])
    right = np.asarray(wk, dtype=np.float64).T @ s_kv
    return left, right


def solve_qk_rope(
    wq: np.ndarray,
    wk: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    r: int,
    damping: float = 0.0,
) -> QkSolution:
    """Paired column/row selection that keeps RoPE frequencies intact."""
    return solve_qk_gqa_rope([wq], wk, r_qq, r_kv, r, damping)


def solve_qk_gqa_rope(
    wq_group: Sequence[np.ndarray],
    wk_shared: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    r: int,
    damping: float = 0.0,
) -> QkSolution:
    """Paired selection scored on the stacked whitened query heads of a group.

    Retained columns keep their original weight values so the rotation still
    applies to them. Every head of the group shares one set of frequencies.
    """
    wqs, wk = _check_group(wq_group, wk_shared)
    d_qk = wk.shape[1]
    if d_qk % 2 != 0:
        raise ArgumentError(f"RoPE head dimension {d_qk} is odd")
    _check_rank(r, d_qk)
    if r % 2 != 0:
        raise ArgumentError(f"RoPE rank {r} must be even so whole pairs are kept")
    left, right = rope_factors(wqs, wk, r_qq, r_kv, damping)
    pairs = top_indices(pair_sum(cur_scores(left, right)), r // 2)
    keep = pair_columns(pairs)
    logger.debug(f"RoPE selection kept pairs {pairs.tolist()}")
    return selection_solution(wqs, wk, keep, r_qq, r_kv, damping, rope=True)


def selection_solution(
    wq_group: Sequence[np.ndarray],
    wk: np.ndarray,
    keep: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    damping: float = 0.0,
    rope: bool = False,
) -> QkSolution:
    """QK solution keeping the original columns `keep` of every projection."""
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    left, right = rope_factors(wq_group, wk, r_qq, r_kv, damping)
    return QkSolution(
        wq_tilde=[np.asarray(w, dtype=np.float64)[:, keep].copy() for w in wq_group],
        wk_tilde=np.asarray(wk, dtype=np.float64)[:, keep].copy(),
        freq_indices=keep if rope else None,
        objective_value=cur_residual(left, right, keep),
    )


def qk_objective_mc(
    delta_w: np.ndarray,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    sample_count: int,
    seed: Optional[int] = None,
) -> MonteCarloEstimate:
    """Sample mean of (x_q dW x_kv^T)^2 with x_q ~ N(0, R_qq) and x_kv ~ N(0, R_kv) independent."""
    if sample_count < 1:
        raise ArgumentError("sample_count must be positive")
    delta_w = as_matrix(delta_w, "delta_w")
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    remaining = sample_count
    while remaining > 0:
        n = min(remaining, _MC_CHUNK)
        x_q = sample_gaussian(r_qq, n, rng)
        x_kv = sample_gaussian(r_kv, n, rng)
        values = np.sum((x_q @ delta_w) * x_kv, axis=1) ** 2
        total += float(values.sum())
        total_sq += float(np.dot(values, values))
        remaining -= n
    return _estimate(total, total_sq, sample_count)


def qk_solution_mc(
    wq: np.ndarray,
    wk: np.ndarray,
    solution: QkSolution,
    r_qq: np.ndarray,
    r_kv: np.ndarray,
    sample_count: int,
    seed: Optional[int] = None,
    head: int = 0,
) -> MonteCarloEstimate:
    """Monte-Carlo score error of one head of `solution` against W_q W_k^T."""
    delta = np.asarray(wq) @ np.asarray(wk).T - solution.fused(head)
    return qk_objective_mc(delta, r_qq, r_kv, sample_count, seed)


def _estimate(total: float, total_sq: float, n: int) -> MonteCarloEstimate:
    mean = total / n
    if n < 2:
        return MonteCarloEstimate(mean=mean, std_error=0.0, samples=n)
    variance = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return MonteCarloEstimate(mean=mean, std_error=float(np.sqrt(variance / n)), samples=n)
