import json

import pandas as pd
import pytest

from app.core.config import load_run_config
from app.core.exceptions import ConfigurationError
from app.models.plan import CompressionPlan, Component
from app.services import pipeline_service as ps
from app.services.accounting import full_plan, plan_params
from app.services.calibration import collect_model_stats
from app.services.compression_service import compress_model
from app.services.evaluation import format_report, functional_errors, parse_report
from main import main

MODEL_OVERRIDES = [
    "model.d_m=32",
    "model.h_q=4",
    "model.h_kv=2",
    "model.d_qk=8",
    "model.d_vo=8",
    "model.d_inter=64",
    "model.rope_enabled=true",
    "model.mlp_variant=gated_silu",
    "calibration.batches=4",
    "calibration.tokens_per_batch=32",
    "evaluation.held_out_batches=2",
    "seed=7",
]


@pytest.fixture
def config():
    return load_run_config(overrides=MODEL_OVERRIDES)


def _run(service, config, workdir):
    service.generate(config, workdir)
    service.calibrate(config, workdir)
    plan = service.compress(config, workdir)
    report = service.evaluate(config, workdir)
    return plan, report


def test_end_to_end_at_ratio_point_two(tmp_path, config):
    service = ps.PipelineService()
    plan, report = _run(service, config, tmp_path)
    layer = plan.layers[0]
    assert (layer.r_qk, layer.r_vo, layer.r_mlp) == (6, 6, 51)
    assert report.ratio == pytest.approx(1 - 7200 / 9216)
    for name in ("model", "stats", "compressed"):
        assert (tmp_path / f"{name}.manifest.json").exists() and (tmp_path / f"{name}.blob").exists()
    blocks = parse_report((tmp_path / ps.REPORT_FILE).read_text())
    assert int(blocks["total"]["params_after"]) == 7200
    assert float(blocks["layer 0"]["score_rel"]) > 0.0
    assert int(blocks["layer 0"]["kv_bytes_after"]) == 2 * (2 * 6 + 2 * 6)


def test_reports_are_reproducible(tmp_path, config):
    first, second = tmp_path / "a", tmp_path / "b"
    _run(ps.PipelineService(), config, first)
    _run(ps.PipelineService(), config, second)
    assert (first / ps.REPORT_FILE).read_bytes() == (second / ps.REPORT_FILE).read_bytes()
    assert (first / "compressed.blob").read_bytes() == (second / "compressed.blob").read_bytes()


def test_in_memory_report_matches_stored_run(tmp_path, config):
    service = ps.PipelineService()
    _run(service, config, tmp_path)
    model = ps.random_model(config.model, ps.seed_streams(config.seed)["weights"])
    stats = collect_model_stats(model, service.calibration_batches(config), workers=config.calibration.workers)
    compressed, layers = compress_model(model, stats, service.plan_for(config), config.compression.options())
    plan = CompressionPlan(layers=[layer.plan for layer in layers])
    report = functional_errors(model, compressed, service.evaluation_batches(config), plan)
    assert format_report(report) == (tmp_path / ps.REPORT_FILE).read_text()


def test_seed_streams_are_independent():
    streams = ps.seed_streams(3)
    assert set(streams) == {"weights", "covariance", "calibration", "evaluation"}
    assert streams["weights"].standard_normal() != streams["calibration"].standard_normal()
    assert ps.seed_streams(3)["weights"].standard_normal() == ps.seed_streams(3)["weights"].standard_normal()


def test_mismatched_model_configuration(tmp_path, config):
    service = ps.PipelineService()
    service.generate(config, tmp_path)
    other = config.model_copy(update={"model": config.model.model_copy(update={"d_inter": 32})})
    with pytest.raises(ConfigurationError):
        service.calibrate(other, tmp_path)


def test_sweep_writes_table(tmp_path, config):
    service = ps.PipelineService()
    service.generate(config, tmp_path)
    service.calibrate(config, tmp_path)
    frame = service.sweep(config, tmp_path, [Component.QK, Component.OV])
    assert list(frame.columns) == ["layer", "component", "rank", "objective", "functional_error"]
    qk = frame[frame.component == "qk"]
    assert list(qk["rank"]) == [2, 4, 6, 8]
    assert qk.iloc[-1]["objective"] == 0.0
    assert len(frame[frame.component == "ov"]) == 8
    written = pd.read_csv(tmp_path / ps.SWEEP_FILE)
    assert len(written) == len(frame)


def test_allocation_respects_budget(tmp_path, config):
    service = ps.PipelineService()
    service.generate(config, tmp_path)
    service.calibrate(config, tmp_path)
    plan = service.allocate(config, tmp_path)
    full = plan_params(config.model, CompressionPlan(layers=[full_plan(config.model)]))
    assert plan_params(config.model, plan) <= int(0.8 * full)
    stored = CompressionPlan.model_validate(json.loads((tmp_path / ps.ALLOCATION_FILE).read_text()))
    assert stored == plan
    assert all(layer.r_qk % 2 == 0 for layer in plan.layers)


def _cli(tmp_path, command, *extra):
    args = [command, "--workdir", str(tmp_path / "run")]
    for override in MODEL_OVERRIDES:
        args += ["--set", override]
    return main(args + list(extra))


def test_cli_pipeline_and_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert _cli(tmp_path, "compress") == 4
    assert _cli(tmp_path, "generate", "--set", "model.d_qk=7") == 2
    assert _cli(tmp_path, "generate") == 0
    assert _cli(tmp_path, "calibrate") == 0
    assert _cli(tmp_path, "compress", "--ratio", "0.5") == 0
    assert "r_qk=4" in capsys.readouterr().out
    assert _cli(tmp_path, "evaluate") == 0
    assert (tmp_path / "run" / ps.REPORT_FILE).exists()
    assert _cli(tmp_path, "allocate") == 0
    assert _cli(tmp_path, "compress", "--plan", str(tmp_path / "run" / ps.ALLOCATION_FILE)) == 0
    assert _cli(tmp_path, "compress", "--plan", str(tmp_path / "missing.json")) == 2


def test_cli_log_level_and_log_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["--log-level", "DEBUG", "generate", "--workdir", str(tmp_path / "run")]) == 0
    assert (tmp_path / "logs" / "a3_compress.log").exists()
