from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class MlpVariant(str, Enum):
    """Feed-forward block variant."""
    TWO_LAYER_RELU = "two_layer_relu"
    GATED_SILU = "gated_silu"


class ModelConfig(BaseModel):
    """Shape of one transformer layer family."""
    model_config = ConfigDict(extra="forbid")

    d_m: int = Field(32, ge=1, description="Model hidden size")
    h_q: int = Field(4, ge=1, description="Query head count")
    h_kv: int = Field(4, ge=1, description="Key/value head count")
    d_qk: int = Field(8, ge=1, description="QK head dimension")
    d_vo: int = Field(8, ge=1, description="OV head dimension")
    d_inter: int = Field(64, ge=1, description="MLP intermediate size")
    rope_enabled: bool = False
    rope_theta: float = Field(10000.0, gt=0.0)
    mlp_variant: MlpVariant = MlpVariant.TWO_LAYER_RELU
    n_layers: int = Field(1, ge=1)
    vocab_size: int = Field(0, ge=0, description="Only used for the embedding-inclusive ratio")
    scale_by_reduced_dim: bool = False

    @model_validator(mode="after")
    def validate_shape(self):
        if self.h_q % self.h_kv != 0:
            raise ValueError(f"h_q={self.h_q} must be a multiple of h_kv={self.h_kv}")
        if self.rope_enabled and self.d_qk % 2 != 0:
            raise ValueError(f"d_qk={self.d_qk} must be even when RoPE is enabled")
        return self

    @property
    def group_size(self) -> int:
        return self.h_q // self.h_kv

    @property
    def is_gqa(self) -> bool:
        return self.group_size > 1

    def kv_head(self, head: int) -> int:
        """Index of the key/value head read by query head `head`."""
        return head // self.group_size


class LayerWeights(BaseModel):
    """Per-head weight matrices of one layer (row-vector convention, x @ W)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    wq: List[np.ndarray]
    wk: List[np.ndarray]
    wv: List[np.ndarray]
    wo: List[np.ndarray]
    wu: np.ndarray
    wd: np.ndarray
    wg: Optional[np.ndarray] = None
    qk_freq_indices: Optional[List[np.ndarray]] = None

    @property
    def qk_dim(self) -> int:
        return self.wq[0].shape[1]

    @property
    def vo_dim(self) -> int:
        return self.wv[0].shape[1]

    @property
    def inter_dim(self) -> int:
        return self.wd.shape[0]

    def value_head(self, cfg: ModelConfig, head: int) -> int:
        """Value head read by query head `head`.

        Stacked-OV layers carry one value head per query head.
        """
        if len(self.wv) == cfg.h_q:
            return head
        return cfg.kv_head(head)

    def output_head(self, head: int) -> np.ndarray:
        if len(self.wo) == 1:
            return self.wo[0]
        return self.wo[head]

    def validate_against(self, cfg: ModelConfig) -> None:
        """Check per-head shapes against `cfg`; reduced head dims are allowed."""
        if len(self.wq) != cfg.h_q or len(self.wk) != cfg.h_kv:
            raise ValueError(
                f"expected {cfg.h_q} query and {cfg.h_kv} key heads, "
                f"got {len(self.wq)} and {len(self.wk)}"
            )
        if len(self.wv) not in (cfg.h_kv, cfg.h_q) or len(self.wo) not in (1, cfg.h_q):
            raise ValueError(f"unexpected value/output head counts {len(self.wv)}/{len(self.wo)}")
        r_qk = self.qk_dim
        for w in list(self.wq) + list(self.wk):
            if w.shape != (cfg.d_m, r_qk):
                raise ValueError(f"QK projection of shape {w.shape}, expected ({cfg.d_m}, {r_qk})")
        r_vo = self.vo_dim
        for w in self.wv:
            if w.shape != (cfg.d_m, r_vo):
                raise ValueError(f"value projection of shape {w.shape}, expected ({cfg.d_m}, {r_vo})")
        for w in self.wo:
            if w.shape != (r_vo, cfg.d_m):
                raise ValueError(f"output projection of shape {w.shape}, expected ({r_vo}, {cfg.d_m})")
        d_inter = self.inter_dim
        if self.wu.shape != (cfg.d_m, d_inter) or self.wd.shape != (d_inter, cfg.d_m):
            raise ValueError(f"MLP shapes {self.wu.shape}/{self.wd.shape} inconsistent")
        if cfg.mlp_variant == MlpVariant.GATED_SILU:
            if self.wg is None:
                raise ValueError("gated MLP requires Wg")
            if self.wg.shape != self.wu.shape:
                raise ValueError(f"Wg shape {self.wg.shape} differs from Wu shape {self.wu.shape}")
        if self.qk_freq_indices is not None:
            if len(self.qk_freq_indices) != cfg.h_q:
                raise ValueError("qk_freq_indices must hold one array per query head")
            for idx in self.qk_freq_indices:
                validate_freq_indices(idx, r_qk)


def validate_freq_indices(indices: np.ndarray, length: int) -> None:
    """Retained RoPE indices: strictly increasing, whole adjacent pairs."""
    indices = np.asarray(indices)
    if indices.shape != (length,):
        raise ValueError(f"frequency index array of length {indices.shape}, expected {length}")
    if length % 2 != 0:
        raise ValueError("frequency index arrays must hold whole pairs")
    if np.any(np.diff(indices) <= 0):
        raise ValueError("frequency indices must be strictly increasing")
    even, odd = indices[0::2], indices[1::2]
    if np.any(even % 2 != 0) or np.any(odd != even + 1):
        raise ValueError("frequency indices must be adjacent (2j, 2j+1) pairs")


class ActivationBatch(BaseModel):
    """Hidden vectors of one sequence with their positions."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    positions: np.ndarray
    x_kv: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_batch(self):
        if self.x.ndim != 2:
            raise ValueError("activation batch must be a T x d_m matrix")
        positions = np.asarray(self.positions)
        if positions.shape != (self.x.shape[0],):
            raise ValueError("positions must hold one entry per token")
        if np.any(positions < 0) or np.any(np.diff(positions) <= 0):
            raise ValueError("positions must be non-negative and strictly increasing")
        if self.x_kv is not None and self.x_kv.shape != self.x.shape:
            raise ValueError("key/value stream must match the query stream shape")
        return self

    @property
    def tokens(self) -> int:
        return self.x.shape[0]

    @property
    def kv(self) -> np.ndarray:
        return self.x if self.x_kv is None else self.x_kv


class TransformerModel(BaseModel):
    """A simple sequential stack of layers sharing one configuration."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    layers: List[LayerWeights]
