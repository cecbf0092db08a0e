"""Greedy mixed-rank allocation under a parameter budget."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

from app.core.exceptions import ArgumentError, InfeasibleBudgetError
from app.models.calibration import LayerCorrelations, ModelStats
from app.models.model import TransformerModel
from app.models.plan import CompressionOptions, CompressionPlan, Component, LayerPlan
from app.services.accounting import accounting, full_plan
from app.services.calibration import finalize_layer
from app.services.compression_service import component_objective, default_options

logger = logging.getLogger(__name__)

_ORDER = (Component.QK, Component.OV, Component.MLP)


class _ObjectiveCache:
    """Closed-form objectives memoised per (layer, component, rank)."""

    def __init__(self, model: TransformerModel, correlations: List[LayerCorrelations], options: CompressionOptions):
        self.model = model
        self.correlations = correlations
        self.options = options
        self._values: Dict[Tuple[int, Component, int], float] = {}

    def __call__(self, layer: int, component: Component, rank: int) -> float:
        key = (layer, component, rank)
        if key not in self._values:
            self._values[key] = component_objective(
                self.model.layers[layer],
                self.model.config,
                self.correlations[layer],
                component,
                rank,
                self.options,
            )
        return self._values[key]


def _params(model: TransformerModel, plans: Sequence[LayerPlan]) -> int:
    return sum(accounting(model.config, plan).params_after for plan in plans)


def mixed_rank_allocate(
    model: TransformerModel,
    stats: ModelStats,
    budget: int,
    granularity: int = 1,
    components: Sequence[Component] = _ORDER,
    options: Optional[CompressionOptions] = None,
) -> CompressionPlan:
    """Greedy rank decrements until the attention+MLP parameter count fits `budget`.

    Each step takes the single (layer, component) decrement with the smallest
    objective increase per parameter saved; ties go to the lower layer, then to
    QK before OV before MLP.
    """
    if granularity < 1:
        raise ArgumentError(f"granularity must be positive, got {granularity}")
    cfg = model.config
    options = options or default_options()
    plans = [full_plan(cfg) for _ in model.layers]
    if _params(model, plans) <= budget:
        logger.info("Budget already met by the uncompressed model")
        return CompressionPlan(layers=plans)

    objective = _ObjectiveCache(model, [finalize_layer(s) for s in stats.layers], options)
    steps = {
        Component.QK: granularity + granularity % 2 if cfg.rope_enabled else granularity,
        Component.OV: granularity,
        Component.MLP: granularity,
    }
    while _params(model, plans) > budget:
        best = None
        for index, plan in enumerate(plans):
            current = _params(model, [plan])
            for component in _ORDER:
                if component not in components:
                    continue
                rank = plan.rank(component)
                target = rank - steps[component]
                if target < 1:
                    continue
                candidate = plan.with_rank(component, target)
                saved = current - _params(model, [candidate])
                increase = objective(index, component, target) - objective(index, component, rank)
                score = increase / saved
                if best is None or score < best[0]:
                    best = (score, index, candidate)
        if best is None:
            raise InfeasibleBudgetError(
                f"budget of {budget} parameters cannot be met",
                details=f"minimum reachable is {_params(model, plans)}",
            )
        _, index, candidate = best
        plans[index] = candidate
    logger.info(f"Allocated ranks for {len(plans)} layer(s) at {_params(model, plans)} parameters")
    return CompressionPlan(layers=plans)
