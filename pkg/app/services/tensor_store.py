"""Manifest + blob persistence for models, statistics and compressed models.

A store named `name` in `directory` is two files: `name.manifest.json`
listing every tensor and `name.blob` holding the little-endian values
back to back in manifest order.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import StoreError
from app.models.calibration import CorrAccumulator, LayerStats, ModelStats
from app.models.model import LayerWeights, ModelConfig, TransformerModel
from app.models.plan import CompressionPlan
from app.models.store import TensorDType, TensorEntry, TensorManifest

logger = logging.getLogger(__name__)


def _paths(directory: Path, name: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{name}.manifest.json", directory / f"{name}.blob"


def write_store(
    directory: Path,
    name: str,
    kind: str,
    tensors: Dict[str, np.ndarray],
    metadata: Optional[Dict[str, Any]] = None,
    dtype: TensorDType = TensorDType.F64,
) -> Path:
    """Write `tensors` in insertion order; returns the manifest path."""
    manifest_path, blob_path = _paths(directory, name)
    entries = []
    chunks = []
    offset = 0
    for key, value in tensors.items():
        data = np.ascontiguousarray(np.asarray(value, dtype=dtype.numpy_dtype))
        raw = data.tobytes(order="C")
        entries.append(
            TensorEntry(name=key, dtype=dtype, shape=list(data.shape), byte_offset=offset, byte_length=len(raw))
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = TensorManifest(
        kind=kind, blob=blob_path.name, blob_length=offset, metadata=metadata or {}, entries=entries
    )
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(b"".join(chunks))
        manifest_path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        logger.error(f"Failed to write store {name}: {e}")
        raise StoreError(f"cannot write store {name}", details=str(e))
    logger.info(f"Wrote {len(entries)} tensor(s) to {manifest_path}")
    return manifest_path


def read_store(directory: Path, name: str, kind: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read every tensor of a store as float64 arrays, with its metadata."""
    manifest_path, _ = _paths(directory, name)
    try:
        manifest = TensorManifest.model_validate(json.loads(manifest_path.read_text()))
        blob = (manifest_path.parent / manifest.blob).read_bytes()
    except OSError as e:
        logger.error(f"Failed to read store {name}: {e}")
        raise StoreError(f"cannot read store {name}", details=str(e))
    except (ValidationError, json.JSONDecodeError) as e:
        raise StoreError(f"malformed manifest {manifest_path}", details=str(e))
    if kind is not None and manifest.kind != kind:
        raise StoreError(f"store {name} holds {manifest.kind}, expected {kind}")
    if len(blob) != manifest.blob_length:
        raise StoreError(f"blob of {name} has {len(blob)} bytes, manifest says {manifest.blob_length}")
    tensors = {}
    for entry in manifest.entries:
        data = np.frombuffer(blob, dtype=entry.dtype.numpy_dtype, count=entry.byte_length // entry.dtype.itemsize,
                             offset=entry.byte_offset)
        tensors[entry.name] = data.reshape(entry.shape).astype(np.float64)
    return tensors, manifest.metadata


def _require(tensors: Dict[str, np.ndarray], key: str) -> np.ndarray:
    if key not in tensors:
        raise StoreError(f"missing tensor {key}")
    return tensors[key]


def _layer_tensors(prefix: str, layer: LayerWeights) -> Dict[str, np.ndarray]:
    out = {}
    for field in ("wq", "wk", "wv", "wo"):
        for head, w in enumerate(getattr(layer, field)):
            out[f"{prefix}.{field}.{head}"] = w
    out[f"{prefix}.wu"] = layer.wu
    out[f"{prefix}.wd"] = layer.wd
    if layer.wg is not None:
        out[f"{prefix}.wg"] = layer.wg
    if layer.qk_freq_indices is not None:
        for head, idx in enumerate(layer.qk_freq_indices):
            out[f"{prefix}.qk_freq_indices.{head}"] = idx
    return out


def _load_layer(prefix: str, tensors: Dict[str, np.ndarray], counts: Dict[str, int]) -> LayerWeights:
    heads = {field: [_require(tensors, f"{prefix}.{field}.{h}") for h in range(counts[field])]
             for field in ("wq", "wk", "wv", "wo")}
    freq = None
    if f"{prefix}.qk_freq_indices.0" in tensors:
        freq = [_require(tensors, f"{prefix}.qk_freq_indices.{h}").astype(np.int64) for h in range(counts["wq"])]
    return LayerWeights(
        **heads,
        wu=_require(tensors, f"{prefix}.wu"),
        wd=_require(tensors, f"{prefix}.wd"),
        wg=tensors.get(f"{prefix}.wg"),
        qk_freq_indices=freq,
    )


def save_model(
    directory: Path,
    name: str,
    model: TransformerModel,
    plan: Optional[CompressionPlan] = None,
    dtype: TensorDType = TensorDType.F64,
) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    counts = []
    for index, layer in enumerate(model.layers):
        tensors.update(_layer_tensors(f"layers.{index}", layer))
        counts.append({field: len(getattr(layer, field)) for field in ("wq", "wk", "wv", "wo")})
    metadata = {"config": model.config.model_dump(mode="json"), "head_counts": counts}
    if plan is not None:
        metadata["plan"] = plan.model_dump(mode="json")
    return write_store(directory, name, "model", tensors, metadata, dtype)


def load_model(directory: Path, name: str) -> Tuple[TransformerModel, Optional[CompressionPlan]]:
    tensors, metadata = read_store(directory, name, kind="model")
    try:
        cfg = ModelConfig.model_validate(metadata["config"])
        plan = CompressionPlan.model_validate(metadata["plan"]) if "plan" in metadata else None
        counts = metadata["head_counts"]
    except (KeyError, ValidationError) as e:
        raise StoreError(f"store {name} has invalid model metadata", details=str(e))
    layers = [_load_layer(f"layers.{i}", tensors, counts[i]) for i in range(len(counts))]
    for layer in layers:
        try:
            layer.validate_against(cfg)
        except ValueError as e:
            raise StoreError(f"store {name} holds inconsistent weights", details=str(e))
    return TransformerModel(config=cfg, layers=layers), plan


def save_stats(directory: Path, name: str, stats: ModelStats) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    samples = []
    for index, layer in enumerate(stats.layers):
        prefix = f"layers.{index}"
        accumulators = {"r_qq": layer.r_qq, "r_kv": layer.r_kv, "r_d": layer.r_d}
        accumulators.update({f"r_p.{h}": acc for h, acc in enumerate(layer.r_p)})
        if layer.r_p_cat is not None:
            accumulators["r_p_cat"] = layer.r_p_cat
        for key, acc in accumulators.items():
            tensors[f"{prefix}.{key}"] = acc.sum_outer
        samples.append({key: acc.n for key, acc in accumulators.items()})
    return write_store(directory, name, "stats", tensors, {"samples": samples})


def load_stats(directory: Path, name: str) -> ModelStats:
    tensors, metadata = read_store(directory, name, kind="stats")
    layers = []
    try:
        for index, samples in enumerate(metadata["samples"]):
            prefix = f"layers.{index}"

            def acc(key: str) -> CorrAccumulator:
                sum_outer = _require(tensors, f"{prefix}.{key}")
                return CorrAccumulator(dim=sum_outer.shape[0], sum_outer=sum_outer, n=samples[key])

            heads = sorted(int(k.split(".")[1]) for k in samples if k.startswith("r_p."))
            layers.append(
                LayerStats(
                    r_qq=acc("r_qq"),
                    r_kv=acc("r_kv"),
                    r_p=[acc(f"r_p.{h}") for h in heads],
                    r_d=acc("r_d"),
                    r_p_cat=acc("r_p_cat") if "r_p_cat" in samples else None,
                )
            )
    except (KeyError, ValidationError) as e:
        raise StoreError(f"store {name} has invalid statistics metadata", details=str(e))
    return ModelStats(layers=layers)
