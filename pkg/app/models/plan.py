from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.model import LayerWeights
from app.models.solution import FactorSplit, OvVariant, ScaleMode


class QkMethod(str, Enum):
    A3 = "a3"
    A3_Q_ONLY = "a3_q_only"
    A3_K_ONLY = "a3_k_only"
    CLOVER = "clover"
    PLAIN_SVD = "plain_svd"
    WHITENED_SVD = "whitened_svd"
    ABS_W = "abs_w"
    WANDA = "wanda"


class OvMethod(str, Enum):
    A3 = "a3"
    A3_XKV = "a3_xkv"
    CLOVER = "clover"
    PLAIN_SVD = "plain_svd"
    WHITENED_SVD = "whitened_svd"


class MlpMethod(str, Enum):
    A3 = "a3"
    ABS_W = "abs_w"
    WANDA = "wanda"


class Component(str, Enum):
    QK = "qk"
    OV = "ov"
    MLP = "mlp"


class LayerPlan(BaseModel):
    """Ranks and methods for the three components of one layer."""
    model_config = ConfigDict(extra="forbid")

    r_qk: int = Field(..., ge=1)
    r_vo: int = Field(..., ge=1)
    r_mlp: int = Field(..., ge=1)
    qk_method: QkMethod = QkMethod.A3
    ov_method: OvMethod = OvMethod.A3
    mlp_method: MlpMethod = MlpMethod.A3
    ov_variant: Optional[OvVariant] = None

    def rank(self, component: Component) -> int:
        return {Component.QK: self.r_qk, Component.OV: self.r_vo, Component.MLP: self.r_mlp}[component]

    def with_rank(self, component: Component, rank: int) -> "LayerPlan":
        field = {Component.QK: "r_qk", Component.OV: "r_vo", Component.MLP: "r_mlp"}[component]
        return self.model_copy(update={field: rank})


class CompressionPlan(BaseModel):
    """Per-layer plan for a whole model."""
    model_config = ConfigDict(extra="forbid")

    layers: List[LayerPlan]


class CompressionOptions(BaseModel):
    """Solver knobs shared by every layer of one compression run."""
    model_config = ConfigDict(extra="forbid")

    damping: float = Field(1e-6, ge=0.0)
    scale_mode: ScaleMode = ScaleMode.NONE
    ov_variant: Optional[OvVariant] = None
    split: FactorSplit = FactorSplit.STANDARD
    recalibrate_after_qk: bool = False


class CompressedLayer(BaseModel):
    """Factored weights of one layer with the plan that produced them."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: LayerWeights
    plan: LayerPlan
    softmax_dim: int
    ov_variant: OvVariant


class LayerAccounting(BaseModel):
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    kv_bytes_before: int
    kv_bytes_after: int


class LayerErrorReport(BaseModel):
    """Functional errors of one layer plus its compression accounting."""
    layer: int
    score_mse: float
    output_mse: float
    mlp_mse: float
    score_rel: float
    output_rel: float
    mlp_rel: float
    accounting: LayerAccounting


class ErrorReport(BaseModel):
    layers: List[LayerErrorReport]
    embedding_params: int = 0

    @property
    def params_before(self) -> int:
        return sum(layer.accounting.params_before for layer in self.layers)

    @property
    def params_after(self) -> int:
        return sum(layer.accounting.params_after for layer in self.layers)

    @property
    def ratio(self) -> float:
        """Fraction of attention+MLP parameters removed."""
        if self.params_before == 0:
            return 0.0
        return 1.0 - self.params_after / self.params_before

    @property
    def ratio_with_embeddings(self) -> float:
        before = self.params_before + self.embedding_params
        if before == 0:
            return 0.0
        return 1.0 - (self.params_after + self.embedding_params) / before


class OvErrorEstimate(BaseModel):
    """Attention-output error against the per-head error sum, batch by batch."""
    total: float
    per_head_sum: float
    batch_totals: List[float]
    batch_per_head_sums: List[float]
    batch_triangle_bounds: List[float]
    heads: int

    def bound_violations(self) -> int:
        """Batches breaking either the triangle or the h_q-scaled squared bound."""
        violations = 0
        for total, head_sum, triangle in zip(
            self.batch_totals, self.batch_per_head_sums, self.batch_triangle_bounds
        ):
            if total > triangle * (1 + 1e-12) or total > self.heads * head_sum * (1 + 1e-12):
                violations += 1
        return violations
