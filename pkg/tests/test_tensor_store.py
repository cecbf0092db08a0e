import json

import numpy as np
import pytest

from app.core.exceptions import StoreError
from app.models.plan import CompressionPlan, LayerPlan
from app.models.store import TensorDType
from app.services import tensor_store
from app.services.calibration import collect_model_stats
from app.services.compression_service import compress_model


def test_store_files_and_manifest(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4)}
    manifest_path = tensor_store.write_store(tmp_path, "demo", "test", tensors, {"note": "x"})
    assert manifest_path == tmp_path / "demo.manifest.json"
    assert (tmp_path / "demo.blob").stat().st_size == 10 * 8
    manifest = json.loads(manifest_path.read_text())
    assert [e["name"] for e in manifest["entries"]] == ["a", "b"]
    assert manifest["entries"][1]["byte_offset"] == 48
    loaded, metadata = tensor_store.read_store(tmp_path, "demo", kind="test")
    np.testing.assert_array_equal(loaded["a"], tensors["a"])
    assert metadata == {"note": "x"}


def test_single_precision_store(tmp_path):
    values = np.array([[1.0 / 3.0, 2.0]])
    tensor_store.write_store(tmp_path, "f32", "test", {"w": values}, dtype=TensorDType.F32)
    loaded, _ = tensor_store.read_store(tmp_path, "f32")
    assert loaded["w"].dtype == np.float64
    np.testing.assert_allclose(loaded["w"], values, rtol=1e-7)
    assert (tmp_path / "f32.blob").stat().st_size == 8


def test_model_round_trip_with_plan(tmp_path, gqa_config, model_factory, batch_factory):
    model = model_factory(gqa_config)
    stats = collect_model_stats(model, batch_factory(gqa_config, n_batches=2))
    plan = CompressionPlan(layers=[LayerPlan(r_qk=4, r_vo=2, r_mlp=6)])
    compressed, layers = compress_model(model, stats, plan)
    resolved = CompressionPlan(layers=[layer.plan for layer in layers])
    tensor_store.save_model(tmp_path, "compressed", compressed, plan=resolved)
    loaded, loaded_plan = tensor_store.load_model(tmp_path, "compressed")
    assert loaded.config == gqa_config
    assert loaded_plan == resolved
    original, restored = compressed.layers[0], loaded.layers[0]
    for field in ("wq", "wk", "wv", "wo"):
        for a, b in zip(getattr(original, field), getattr(restored, field)):
            np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(original.wg, restored.wg)
    assert restored.qk_freq_indices[0].dtype == np.int64
    np.testing.assert_array_equal(original.qk_freq_indices[2], restored.qk_freq_indices[2])


def test_stats_round_trip(tmp_path, mha_config, model_factory, batch_factory):
    model = model_factory(mha_config)
    stats = collect_model_stats(model, batch_factory(mha_config, n_batches=2), with_concat=True)
    tensor_store.save_stats(tmp_path, "stats", stats)
    loaded = tensor_store.load_stats(tmp_path, "stats")
    layer, restored = stats.layers[0], loaded.layers[0]
    assert restored.r_qq.n == layer.r_qq.n == 32
    assert len(restored.r_p) == mha_config.h_q
    np.testing.assert_array_equal(restored.r_p[1].sum_outer, layer.r_p[1].sum_outer)
    np.testing.assert_array_equal(restored.r_p_cat.sum_outer, layer.r_p_cat.sum_outer)


def test_missing_store(tmp_path):
    with pytest.raises(StoreError):
        tensor_store.read_store(tmp_path, "absent")


def test_wrong_kind(tmp_path):
    tensor_store.write_store(tmp_path, "demo", "stats", {"a": np.zeros(2)})
    with pytest.raises(StoreError):
        tensor_store.load_model(tmp_path, "demo")


def test_truncated_blob(tmp_path):
    tensor_store.write_store(tmp_path, "demo", "test", {"a": np.zeros(4)})
    blob = tmp_path / "demo.blob"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(StoreError):
        tensor_store.read_store(tmp_path, "demo")


def test_overlapping_entries_are_rejected(tmp_path):
    path = tensor_store.write_store(tmp_path, "demo", "test", {"a": np.zeros(2), "b": np.zeros(2)})
    manifest = json.loads(path.read_text())
    manifest["entries"][1]["byte_offset"] = 8
    path.write_text(json.dumps(manifest))
    with pytest.raises(StoreError):
        tensor_store.read_store(tmp_path, "demo")


def test_missing_tensor(tmp_path, mha_config, model_factory):
    tensor_store.save_model(tmp_path, "model", model_factory(mha_config))
    path = tmp_path / "model.manifest.json"
    manifest = json.loads(path.read_text())
    manifest["entries"] = [e for e in manifest["entries"] if e["name"] != "layers.0.wu"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(StoreError):
        tensor_store.load_model(tmp_path, "model")
