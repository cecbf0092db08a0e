"""Solver outputs."""

from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class FactorSplit(str, Enum):
    """Where the singular values of a truncated SVD are folded."""
    STANDARD = "standard"
    BALANCED = "balanced"


class OvVariant(str, Enum):
    PER_HEAD = "per_head"
    GQA_JOINT = "gqa_joint"
    OVERALL = "overall"


class ScaleMode(str, Enum):
    NONE = "none"
    MONTE_CARLO = "monte_carlo"


class SvdFactors(BaseModel):
    """Thin SVD A = U diag(S) Vt, singular values descending."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


class LowRankFactors(BaseModel):
    """Left/right factors of a rank-r approximation with its discarded energy."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    left: np.ndarray
    right: np.ndarray
    error: float = Field(..., ge=0.0)


class QkSolution(BaseModel):
    """Reduced query/key projections for one head or one GQA group."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    wq_tilde: List[np.ndarray]
    wk_tilde: np.ndarray
    freq_indices: Optional[np.ndarray] = None
    objective_value: float

    @property
    def rank(self) -> int:
        return self.wk_tilde.shape[1]

    def fused(self, head: int = 0) -> np.ndarray:
        return self.wq_tilde[head] @ self.wk_tilde.T


class OvSolution(BaseModel):
    """Reduced value/output projections.

    per_head: one value and one output head. gqa_joint: one shared value head and
    one output head per query head of the group. overall: one value head per query
    head and a single output head shared by all of them.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    wv_tilde: List[np.ndarray]
    wo_tilde: List[np.ndarray]
    objective_value: float
    variant: OvVariant
    kv_dim: int

    @property
    def rank(self) -> int:
        return self.wv_tilde[0].shape[1]

    def fused(self, head: int = 0) -> np.ndarray:
        wv = self.wv_tilde[head] if len(self.wv_tilde) > 1 else self.wv_tilde[0]
        wo = self.wo_tilde[head] if len(self.wo_tilde) > 1 else self.wo_tilde[0]
        return wv @ wo


class MlpSolution(BaseModel):
    """Retained intermediate channels of the down projection."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    selected: np.ndarray
    scale_mode: ScaleMode = ScaleMode.NONE
    u_values: np.ndarray
    objective_value: float

    @property
    def rank(self) -> int:
        return int(self.selected.shape[0])


class MonteCarloEstimate(BaseModel):
    """Sample mean of a squared error with its standard error."""
    mean: float
    std_error: float
    samples: int = Field(..., ge=1)

    def agrees_with(self, value: float, sigmas: float = 3.0) -> bool:
        return abs(self.mean - value) <= sigmas * self.std_error
