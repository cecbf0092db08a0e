"""End-to-end pipeline: generate, calibrate, compress, evaluate, sweep and allocate."""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from app.core.exceptions import ConfigurationError, StoreError
from app.models.model import ActivationBatch, LayerWeights, MlpVariant, ModelConfig, TransformerModel
from app.models.plan import CompressionPlan, Component, ErrorReport
from app.models.run_config import RunConfig
from app.models.solution import OvVariant
from app.services import tensor_store
from app.services.accounting import full_plan, plan_params, ratio_to_ranks, validate_plan
from app.services.allocation import mixed_rank_allocate
from app.services.calibration import collect_model_stats, finalize_layer, generate_batches, make_covariance
from app.services.compression_service import compress_layer, compress_model, component_objective
from app.services.evaluation import format_report, functional_errors, layer_errors

logger = logging.getLogger(__name__)

MODEL_STORE = "model"
STATS_STORE = "stats"
COMPRESSED_STORE = "compressed"
REPORT_FILE = "report.txt"
SWEEP_FILE = "sweep.csv"
ALLOCATION_FILE = "allocation.json"

_STREAMS = ("weights", "covariance", "calibration", "evaluation")


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators per artifact, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(_STREAMS, children)}


def random_layer(cfg: ModelConfig, rng: np.random.Generator) -> LayerWeights:
    """Gaussian weights scaled by fan-in."""
    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    return LayerWeights(
        wq=[draw(cfg.d_m, cfg.d_qk) for _ in range(cfg.h_q)],
        wk=[draw(cfg.d_m, cfg.d_qk) for _ in range(cfg.h_kv)],
        wv=[draw(cfg.d_m, cfg.d_vo) for _ in range(cfg.h_kv)],
        wo=[draw(cfg.d_vo, cfg.d_m) for _ in range(cfg.h_q)],
        wu=draw(cfg.d_m, cfg.d_inter),
        wd=draw(cfg.d_inter, cfg.d_m),
        wg=draw(cfg.d_m, cfg.d_inter) if cfg.mlp_variant == MlpVariant.GATED_SILU else None,
    )


def random_model(cfg: ModelConfig, rng: np.random.Generator) -> TransformerModel:
    return TransformerModel(config=cfg, layers=[random_layer(cfg, rng) for _ in range(cfg.n_layers)])


class PipelineServiceInterface(ABC):
    """Interface for the compression pipeline."""

    @abstractmethod
    def generate(self, config: RunConfig, workdir: Path) -> TransformerModel:
        """Write a seeded random model."""
        pass

    @abstractmethod
    def calibrate(self, config: RunConfig, workdir: Path) -> Path:
        """Collect and persist per-layer statistics."""
        pass

    @abstractmethod
    def compress(self, config: RunConfig, workdir: Path) -> CompressionPlan:
        """Compress the stored model with the stored statistics."""
        pass

    @abstractmethod
    def evaluate(self, config: RunConfig, workdir: Path) -> ErrorReport:
        """Measure functional errors of the compressed model and write the report."""
        pass

    @abstractmethod
    def sweep(self, config: RunConfig, workdir: Path, components: Sequence[Component]) -> pd.DataFrame:
        """Objective and functional error of every rank of every component."""
        pass

    @abstractmethod
    def allocate(self, config: RunConfig, workdir: Path) -> CompressionPlan:
        """Greedy mixed-rank plan for the configured budget."""
        pass


class PipelineService(PipelineServiceInterface):
    """Pipeline over a working directory holding every store of one run."""

    def _covariance(self, config: RunConfig) -> np.ndarray:
        rng = seed_streams(config.seed)["covariance"]
        return make_covariance(
            config.model.d_m,
            rng,
            decay_ratio=config.calibration.covariance_decay,
            channel_spread=config.calibration.channel_spread,
        )

    def calibration_batches(self, config: RunConfig) -> List[ActivationBatch]:
        return generate_batches(
            self._covariance(config),
            config.calibration.batches,
            config.calibration.tokens_per_batch,
            seed_streams(config.seed)["calibration"],
        )

    def evaluation_batches(self, config: RunConfig) -> List[ActivationBatch]:
        return generate_batches(
            self._covariance(config),
            config.evaluation.held_out_batches,
            config.calibration.tokens_per_batch,
            seed_streams(config.seed)["evaluation"],
        )

    def _load_model(self, config: RunConfig, workdir: Path, name: str = MODEL_STORE):
        model, plan = tensor_store.load_model(workdir, name)
        if model.config != config.model:
            raise ConfigurationError(
                f"store {name} was generated for a different model configuration",
                details=f"stored {model.config.model_dump()}, requested {config.model.model_dump()}",
            )
        return model, plan

    def plan_for(self, config: RunConfig) -> CompressionPlan:
        """Explicit plan, or the uniform ratio plan with the configured methods."""
        compression = config.compression
        if compression.plan is not None:
            plan = compression.plan
        else:
            plan = ratio_to_ranks(config.model, compression.ratio)
            methods = {
                "qk_method": compression.qk_method,
                "ov_method": compression.ov_method,
                "mlp_method": compression.mlp_method,
            }
            plan = CompressionPlan(layers=[layer.model_copy(update=methods) for layer in plan.layers])
        validate_plan(config.model, plan)
        return plan

    def generate(self, config: RunConfig, workdir: Path) -> TransformerModel:
        model = random_model(config.model, seed_streams(config.seed)["weights"])
        tensor_store.save_model(workdir, MODEL_STORE, model, dtype=config.store.weight_dtype)
        logger.info(f"Generated a {config.model.n_layers}-layer model with seed {config.seed}")
        # reload so the in-memory model matches what later commands read
        model, _ = tensor_store.load_model(workdir, MODEL_STORE)
        return model

    def calibrate(self, config: RunConfig, workdir: Path) -> Path:
        model, _ = self._load_model(config, workdir)
        with_concat = config.compression.ov_variant == OvVariant.OVERALL
        stats = collect_model_stats(
            model, self.calibration_batches(config), with_concat=with_concat, workers=config.calibration.workers
        )
        return tensor_store.save_stats(workdir, STATS_STORE, stats)

    def compress(self, config: RunConfig, workdir: Path) -> CompressionPlan:
        """
        Compress the stored model with the stored statistics.

        Args:
            config: Run configuration; its ratio or explicit plan selects the ranks
            workdir: Directory holding the model and statistics stores

        Returns:
            Plan with the OV variant resolved per layer, as stored with the compressed model

        Raises:
            StoreError: If a store is missing or malformed
            ConfigurationError: If the stored model does not match `config.model`
        """
        model, _ = self._load_model(config, workdir)
        stats = tensor_store.load_stats(workdir, STATS_STORE)
        plan = self.plan_for(config)
        batches = self.calibration_batches(config) if config.compression.recalibrate_after_qk else None
        compressed, layers = compress_model(model, stats, plan, config.compression.options(), batches)
        resolved = CompressionPlan(layers=[layer.plan for layer in layers])
        tensor_store.save_model(workdir, COMPRESSED_STORE, compressed, plan=resolved)
        return resolved

    def evaluate(self, config: RunConfig, workdir: Path) -> ErrorReport:
        """
        Measure the compressed model on held-out batches and write the report.

        Args:
            config: Run configuration; the seed fixes the held-out stream
            workdir: Directory holding the model and compressed stores

        Returns:
            Error report, also written as text to REPORT_FILE

        Raises:
            StoreError: If a store is missing or the report cannot be written
        """
        model, _ = self._load_model(config, workdir)
        compressed, plan = self._load_model(config, workdir, COMPRESSED_STORE)
        report = functional_errors(model, compressed, self.evaluation_batches(config), plan)
        path = Path(workdir) / REPORT_FILE
        try:
            path.write_text(format_report(report))
        except OSError as e:
            raise StoreError(f"cannot write report {path}", details=str(e))
        logger.info(f"Report written to {path}")
        return report

    def sweep(
        self, config: RunConfig, workdir: Path, components: Sequence[Component] = tuple(Component)
    ) -> pd.DataFrame:
        """Every rank of every requested component with the others at full rank; written to SWEEP_FILE."""
        model, _ = self._load_model(config, workdir)
        stats = tensor_store.load_stats(workdir, STATS_STORE)
        cfg = model.config
        options = config.compression.options()
        held_out = self.evaluation_batches(config)
        limits = {Component.QK: cfg.d_qk, Component.OV: cfg.d_vo, Component.MLP: cfg.d_inter}
        metric = {Component.QK: 0, Component.OV: 1, Component.MLP: 2}
        rows = []
        for index, (weights, layer_stats) in enumerate(zip(model.layers, stats.layers)):
            corr = finalize_layer(layer_stats)
            for component in components:
                step = 2 if component == Component.QK and cfg.rope_enabled else 1
                for rank in range(step, limits[component] + 1, step):
                    plan = full_plan(cfg).with_rank(component, rank)
                    layer = compress_layer(weights, cfg, layer_stats, plan, options)
                    mse, _ = layer_errors(weights, layer.weights, cfg, held_out)
                    rows.append(
                        {
                            "layer": index,
                            "component": component.value,
                            "rank": rank,
                            "objective": component_objective(weights, cfg, corr, component, rank, options),
                            "functional_error": float(mse[metric[component]]),
                        }
                    )
        frame = pd.DataFrame(rows, columns=["layer", "component", "rank", "objective", "functional_error"])
        path = Path(workdir) / SWEEP_FILE
        try:
            frame.to_csv(path, index=False, float_format="%.12e")
        except OSError as e:
            raise StoreError(f"cannot write sweep table {path}", details=str(e))
        logger.info(f"Sweep of {len(rows)} point(s) written to {path}")
        return frame

    def allocate(self, config: RunConfig, workdir: Path) -> CompressionPlan:
        model, _ = self._load_model(config, workdir)
        stats = tensor_store.load_stats(workdir, STATS_STORE)
        full = plan_params(config.model, CompressionPlan(layers=[full_plan(config.model)] * len(model.layers)))
        budget = int(np.floor((1.0 - config.allocation.budget_ratio) * full))
        plan = mixed_rank_allocate(
            model, stats, budget, config.allocation.granularity, options=config.compression.options()
        )
        path = Path(workdir) / ALLOCATION_FILE
        try:
            path.write_text(plan.model_dump_json(indent=2) + "\n")
        except OSError as e:
            raise StoreError(f"cannot write allocation {path}", details=str(e))
        logger.info(f"Allocation for a budget of {budget}/{full} parameters written to {path}")
        return plan
