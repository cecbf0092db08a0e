from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.model import ModelConfig
from app.models.plan import CompressionOptions, CompressionPlan, MlpMethod, OvMethod, QkMethod
from app.models.solution import FactorSplit, OvVariant, ScaleMode
from app.models.store import TensorDType


class CalibrationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batches: int = Field(8, ge=1)
    tokens_per_batch: int = Field(64, ge=1)
    covariance_decay: float = Field(100.0, ge=1.0)
    channel_spread: float = Field(1.0, ge=1.0)
    workers: Optional[int] = Field(None, ge=1)


class CompressionConfig(BaseModel):
    """Either a uniform `ratio` or an explicit per-layer `plan`."""
    model_config = ConfigDict(extra="forbid")

    ratio: Optional[float] = Field(0.2, gt=0.0, lt=1.0)
    plan: Optional[CompressionPlan] = None
    qk_method: QkMethod = QkMethod.A3
    ov_method: OvMethod = OvMethod.A3
    mlp_method: MlpMethod = MlpMethod.A3
    damping: float = Field(1e-6, ge=0.0)
    scale_mode: ScaleMode = ScaleMode.NONE
    ov_variant: Optional[OvVariant] = None
    split: FactorSplit = FactorSplit.STANDARD
    recalibrate_after_qk: bool = False

    @model_validator(mode="after")
    def validate_source(self):
        if self.ratio is None and self.plan is None:
            raise ValueError("compression needs a ratio or an explicit plan")
        return self

    def options(self) -> CompressionOptions:
        return CompressionOptions(
            damping=self.damping,
            scale_mode=self.scale_mode,
            ov_variant=self.ov_variant,
            split=self.split,
            recalibrate_after_qk=self.recalibrate_after_qk,
        )


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    held_out_batches: int = Field(4, ge=1)


class AllocationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    budget_ratio: float = Field(0.2, gt=0.0, lt=1.0, description="Fraction of attention+MLP parameters to remove")
    granularity: int = Field(1, ge=1)


class StoreConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    weight_dtype: TensorDType = TensorDType.F64


class RunConfig(BaseModel):
    """Everything one run of the command-line tool needs; every field is defaulted."""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    seed: int = Field(0, ge=0)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    compression: CompressionConfig = Field(default_factory=CompressionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    allocation: AllocationConfig = Field(default_factory=AllocationConfig)
    store: StoreConfig = Field(default_factory=StoreConfig)
