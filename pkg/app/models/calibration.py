from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class CorrAccumulator(BaseModel):
    """Streaming sum of x^T x over samples, kept in double precision."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int = Field(..., ge=1)
    sum_outer: np.ndarray
    n: int = Field(0, ge=0)

    @classmethod
    def zeros(cls, dim: int) -> "CorrAccumulator":
        return cls(dim=dim, sum_outer=np.zeros((dim, dim), dtype=np.float64), n=0)


class LayerStats(BaseModel):
    """Autocorrelation accumulators needed to compress one layer."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    r_qq: CorrAccumulator
    r_kv: CorrAccumulator
    r_p: List[CorrAccumulator]
    r_d: CorrAccumulator
    r_p_cat: Optional[CorrAccumulator] = None


class ModelStats(BaseModel):
    """Statistics for every layer of a model."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layers: List[LayerStats]


class LayerCorrelations(BaseModel):
    """Finalized autocorrelation matrices of one layer."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    r_qq: np.ndarray
    r_kv: np.ndarray
    r_p: List[np.ndarray]
    r_d: np.ndarray
    r_p_cat: Optional[np.ndarray] = None
