"""Functional errors of a compressed model and their textual reports."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tabulate import tabulate

from app.core.config import get_settings
from app.core.exceptions import ArgumentError, EmptyCalibrationError
from app.models.model import ActivationBatch, LayerWeights, ModelConfig, TransformerModel
from app.models.plan import CompressionPlan, ErrorReport, LayerErrorReport
from app.services import forward
from app.services.accounting import accounting, embedding_params, full_plan

logger = logging.getLogger(__name__)

# score, output and MLP sums of squared errors, then of squared signals, then counts
_Sums = Tuple[np.ndarray, np.ndarray, np.ndarray]


def _batch_sums(
    original: LayerWeights, compressed: LayerWeights, cfg: ModelConfig, batch: ActivationBatch
) -> _Sums:
    err = np.zeros(3)
    signal = np.zeros(3)
    count = np.zeros(3)
    for head in range(cfg.h_q):
        a, _ = forward.attention_scores(original, cfg, batch, head)
        a_tilde, _ = forward.attention_scores(compressed, cfg, batch, head)
        err[0] += np.sum((a - a_tilde) ** 2)
        signal[0] += np.sum(a * a)
        count[0] += a.size
    o = forward.attention_output(original, cfg, batch)
    o_tilde = forward.attention_output(compressed, cfg, batch)
    _, y = forward.mlp_forward(original, cfg, batch.x)
    _, y_tilde = forward.mlp_forward(compressed, cfg, batch.x)
    err[1], signal[1] = np.sum((o - o_tilde) ** 2), np.sum(o * o)
    err[2], signal[2] = np.sum((y - y_tilde) ** 2), np.sum(y * y)
    count[1] = count[2] = batch.tokens
    return err, signal, count


def layer_errors(
    original: LayerWeights,
    compressed: LayerWeights,
    cfg: ModelConfig,
    batches: Sequence[ActivationBatch],
    workers: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean squared score error per entry, output and MLP errors per token, and their relative forms."""
    if not batches:
        raise EmptyCalibrationError("evaluation needs at least one batch")
    workers = max(1, min(workers or get_settings().CALIBRATION_WORKERS, len(batches)))

    def run(batch: ActivationBatch) -> _Sums:
        return _batch_sums(original, compressed, cfg, batch)

    if workers == 1:
        partials = [run(batch) for batch in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run, batches))
    err, signal, count = np.zeros(3), np.zeros(3), np.zeros(3)
    for e, s, c in partials:
        err += e
        signal += s
        count += c
    mse = err / count
    rel = np.divide(err, signal, out=np.zeros(3), where=signal > 0)
    return mse, rel


def functional_errors(
    original: TransformerModel,
    compressed: TransformerModel,
    batches: Sequence[ActivationBatch],
    plan: Optional[CompressionPlan] = None,
) -> ErrorReport:
    """
    Score, attention-output and MLP errors of every layer plus its accounting.

    Every layer is fed the same batches.

    Args:
        original: Uncompressed model
        compressed: Model produced by `compress_model`
        batches: Held-out activations
        plan: Resolved plan for the accounting; full rank when omitted

    Returns:
        Per-layer errors and accounting with the totals

    Raises:
        ArgumentError: If the two models do not share one configuration
        EmptyCalibrationError: If no batch is given
    """
    cfg = original.config
    if compressed.config != cfg or len(compressed.layers) != len(original.layers):
        raise ArgumentError("original and compressed models do not share one configuration")
    plans = plan.layers if plan is not None else [full_plan(cfg) for _ in original.layers]
    reports = []
    for index, (a, b, layer_plan) in enumerate(zip(original.layers, compressed.layers, plans)):
        mse, rel = layer_errors(a, b, cfg, batches)
        reports.append(
            LayerErrorReport(
                layer=index,
                score_mse=float(mse[0]),
                output_mse=float(mse[1]),
                mlp_mse=float(mse[2]),
                score_rel=float(rel[0]),
                output_rel=float(rel[1]),
                mlp_rel=float(rel[2]),
                accounting=accounting(cfg, layer_plan),
            )
        )
    report = ErrorReport(layers=reports, embedding_params=embedding_params(cfg))
    logger.info(f"Evaluated {len(reports)} layer(s) on {len(batches)} batch(es): ratio {report.ratio:.4f}")
    return report


def _lines(values, float_format: str) -> List[str]:
    lines = []
    for key, value in values:
        text = format(value, float_format) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return lines


def format_report(report: ErrorReport, float_format: Optional[str] = None) -> str:
    """`[layer N]` and `[total]` blocks of `key = value` lines."""
    float_format = float_format or get_settings().REPORT_FLOAT_FORMAT
    blocks = []
    for layer in report.layers:
        acct = layer.accounting
        values = [
            ("score_mse", layer.score_mse),
            ("output_mse", layer.output_mse),
            ("mlp_mse", layer.mlp_mse),
            ("score_rel", layer.score_rel),
            ("output_rel", layer.output_rel),
            ("mlp_rel", layer.mlp_rel),
            ("params_before", acct.params_before),
            ("params_after", acct.params_after),
            ("flops_before", acct.flops_before),
            ("flops_after", acct.flops_after),
            ("kv_bytes_before", acct.kv_bytes_before),
            ("kv_bytes_after", acct.kv_bytes_after),
        ]
        blocks.append("\n".join([f"[layer {layer.layer}]"] + _lines(values, float_format)))
    totals = [
        ("params_before", report.params_before),
        ("params_after", report.params_after),
        ("embedding_params", report.embedding_params),
        ("ratio", report.ratio),
        ("ratio_with_embeddings", report.ratio_with_embeddings),
        ("flops_before", sum(layer.accounting.flops_before for layer in report.layers)),
        ("flops_after", sum(layer.accounting.flops_after for layer in report.layers)),
        ("kv_bytes_before", sum(layer.accounting.kv_bytes_before for layer in report.layers)),
        ("kv_bytes_after", sum(layer.accounting.kv_bytes_after for layer in report.layers)),
    ]
    blocks.append("\n".join(["[total]"] + _lines(totals, float_format)))
    return "\n\n".join(blocks) + "\n"


def parse_report(text: str) -> dict:
    """Inverse of `format_report`: {block name: {key: raw string}}."""
    blocks, current = {}, None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = blocks.setdefault(line[1:-1], {})
        elif current is not None and " = " in line:
            key, value = line.split(" = ", 1)
            current[key] = value
    return blocks


def report_table(report: ErrorReport) -> str:
    """Console summary."""
    frame = pd.DataFrame(
        [
            {
                "layer": layer.layer,
                "score_rel": layer.score_rel,
                "output_rel": layer.output_rel,
                "mlp_rel": layer.mlp_rel,
                "params": f"{layer.accounting.params_after}/{layer.accounting.params_before}",
                "kv_bytes": f"{layer.accounting.kv_bytes_after}/{layer.accounting.kv_bytes_before}",
            }
            for layer in report.layers
        ]
    )
    return tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=".4e")
