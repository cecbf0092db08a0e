from enum import Enum
from typing import Any, Dict, List

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TensorDType(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy_dtype(self) -> str:
        return "<f4" if self == TensorDType.F32 else "<f8"

    @property
    def itemsize(self) -> int:
        return 4 if self == TensorDType.F32 else 8


class TensorEntry(BaseModel):
    """One contiguous row-major tensor inside the blob."""
    model_config = ConfigDict(extra="forbid")

    name: str
    dtype: TensorDType
    shape: List[int]
    byte_offset: int = Field(..., ge=0)
    byte_length: int = Field(..., ge=0)

    @model_validator(mode="after")
    def validate_length(self):
        if any(dim < 0 for dim in self.shape):
            raise ValueError(f"tensor {self.name} has a negative dimension")
        size = 1
        for dim in self.shape:
            size *= dim
        if size * self.dtype.itemsize != self.byte_length:
            raise ValueError(f"tensor {self.name} byte_length {self.byte_length} does not match its shape")
        return self


class TensorManifest(BaseModel):
    """Human-readable index of a tensor blob."""
    model_config = ConfigDict(extra="forbid")

    format_version: int = 1
    kind: str
    blob: str
    blob_length: int = Field(..., ge=0)
    metadata: Dict[str, Any] = Field(default_factory=dict)
    entries: List[TensorEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_layout(self):
        names = set()
        end = 0
        for entry in self.entries:
            if entry.name in names:
                raise ValueError(f"duplicate tensor name {entry.name}")
            names.add(entry.name)
            if entry.byte_offset < end:
                raise ValueError(f"tensor {entry.name} overlaps its predecessor or is out of order")
            end = entry.byte_offset + entry.byte_length
        if end > self.blob_length:
            raise ValueError(f"entries extend to byte {end}, past the blob length {self.blob_length}")
        return self
