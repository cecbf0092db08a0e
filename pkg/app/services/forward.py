"""Forward computations of one desk-scale transformer layer.

Row-vector convention throughout: a token is a row x, projections are x @ W.
Attention is causal; RoPE rotates adjacent element pairs (2j, 2j+1).
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from app.core.exceptions import ArgumentError
from app.models.model import ActivationBatch, LayerWeights, MlpVariant, ModelConfig

logger = logging.getLogger(__name__)


def pair_frequencies(base_dim: int, theta: float, freq_indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Angular frequency of every retained pair.

    Frequencies are defined against the original head dimension `base_dim`;
    `freq_indices` maps retained pair j to original pair freq_indices[2j] // 2.
    """
    if freq_indices is None:
        pairs = np.arange(base_dim // 2)
    else:
        pairs = np.asarray(freq_indices)[0::2] // 2
    return theta ** (-2.0 * pairs / base_dim)


def apply_rope(
    m: np.ndarray,
    positions: np.ndarray,
    base_dim: int,
    theta: float,
    freq_indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Rotate every row of `m` (T x d) by its position."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] % 2 != 0:
        raise ArgumentError(f"RoPE needs an even dimension, got {m.shape[-1]}")
    omega = pair_frequencies(base_dim, theta, freq_indices)
    if omega.shape[0] != m.shape[-1] // 2:
        raise ArgumentError("frequency indices do not match the head dimension")
    angles = np.multiply.outer(np.asarray(positions, dtype=np.float64), omega)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = m[..., 0::2], m[..., 1::2]
    out = np.empty_like(m)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(
    v: np.ndarray,
    pos: int,
    freq_indices: Optional[np.ndarray] = None,
    theta: float = 10000.0,
    base_dim: Optional[int] = None,
) -> np.ndarray:
    """Rotate a single vector to position `pos`.

    Without `freq_indices` the vector is a full head and `base_dim` defaults to its
    length. A reduced vector needs `base_dim`, the original head dimension its
    frequencies were defined against.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ArgumentError("rope_rotate expects a vector")
    if v.shape[0] % 2 != 0:
        raise ArgumentError(f"RoPE needs an even dimension, got {v.shape[0]}")
    if base_dim is None:
        if freq_indices is not None:
            raise ArgumentError("rope_rotate needs the original head dimension with freq_indices")
        base_dim = v.shape[0]
    return apply_rope(v[None, :], np.array([pos]), base_dim, theta, freq_indices)[0]


def rotation_matrix(pos: int, base_dim: int, theta: float = 10000.0) -> np.ndarray:
    """Phi_pos such that rope_rotate(v, pos) == v @ Phi_pos."""
    return apply_rope(np.eye(base_dim), np.full(base_dim, pos), base_dim, theta)


def _check_head(cfg: ModelConfig, head: int) -> None:
    if not 0 <= head < cfg.h_q:
        raise ArgumentError(f"head {head} outside [0, {cfg.h_q})")


def _check_input(cfg: ModelConfig, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != cfg.d_m:
        raise ArgumentError(f"inputs of shape {x.shape} do not match d_m={cfg.d_m}")


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax with entries above the diagonal masked to exactly zero."""
    t = scores.shape[0]
    masked = np.where(np.tril(np.ones((t, t), dtype=bool)), scores, -np.inf)
    return special.softmax(masked, axis=1)


def project_qk(
    weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch, head: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Query and key rows of one head, rotated when RoPE is on."""
    _check_head(cfg, head)
    _check_input(cfg, batch.x)
    kv = cfg.kv_head(head)
    q = batch.x @ weights.wq[head]
    k = batch.kv @ weights.wk[kv]
    if q.shape[1] != k.shape[1]:
        raise ArgumentError(f"query dim {q.shape[1]} differs from key dim {k.shape[1]}")
    if cfg.rope_enabled:
        indices = None if weights.qk_freq_indices is None else weights.qk_freq_indices[head]
        q = apply_rope(q, batch.positions, cfg.d_qk, cfg.rope_theta, indices)
        k = apply_rope(k, batch.positions, cfg.d_qk, cfg.rope_theta, indices)
    return q, k


def attention_scores(
    weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch, head: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Pre-softmax scores Q K^T (unscaled) and causal post-softmax scores."""
    q, k = project_qk(weights, cfg, batch, head)
    a_pre = q @ k.T
    scale_dim = q.shape[1] if cfg.scale_by_reduced_dim else cfg.d_qk
    a_post = causal_softmax(a_pre / np.sqrt(scale_dim))
    return a_pre, a_post


def head_outputs(weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch) -> List[np.ndarray]:
    """Per-head attention outputs A'_i V_i W_o,i (each T x d_m)."""
    outputs = []
    for head in range(cfg.h_q):
        _, a_post = attention_scores(weights, cfg, batch, head)
        v = batch.kv @ weights.wv[weights.value_head(cfg, head)]
        wo = weights.output_head(head)
        if v.shape[1] != wo.shape[0]:
            raise ArgumentError(f"value dim {v.shape[1]} differs from output dim {wo.shape[0]}")
        outputs.append(a_post @ v @ wo)
    return outputs


def attention_output(weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch) -> np.ndarray:
    """Sum of the per-head outputs."""
    out = np.zeros((batch.tokens, cfg.d_m))
    for o in head_outputs(weights, cfg, batch):
        out += o
    return out


def head_contexts(weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch) -> List[np.ndarray]:
    """P_i = A'_i X_kv for every query head."""
    return [attention_scores(weights, cfg, batch, head)[1] @ batch.kv for head in range(cfg.h_q)]


def mlp_forward(weights: LayerWeights, cfg: ModelConfig, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Intermediate activations X_d and the block output Y = X_d W_d."""
    _check_input(cfg, x)
    if cfg.mlp_variant == MlpVariant.GATED_SILU:
        if weights.wg is None:
            raise ArgumentError("gated MLP requires Wg")
        y_g = x @ weights.wg
        x_d = y_g * special.expit(y_g) * (x @ weights.wu)
    else:
        x_d = np.maximum(x @ weights.wu, 0.0)
    return x_d, x_d @ weights.wd


def kv_cache_elements(weights: LayerWeights, cfg: ModelConfig, batch: ActivationBatch) -> int:
    """Cached key and value elements per token, counted from the tensors a decoder would store."""
    cache = []
    for head in range(cfg.h_kv):
        cache.append(batch.kv @ weights.wk[head])
    for head in range(len(weights.wv)):
        cache.append(batch.kv @ weights.wv[head])
    total = sum(tensor.size for tensor in cache)
    return total // batch.tokens
