"""Brute-force references for the optimality tests."""

import logging
from itertools import combinations
from math import comb
from typing import Callable, Optional, Tuple

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import ArgumentError
from app.services.tensor_core import cur_residual, pair_columns

logger = logging.getLogger(__name__)

_CHUNK = 1024

Objective = Callable[[np.ndarray], np.ndarray]


def oracle_random_rank_r(
    objective: Objective,
    dims: Tuple[int, int],
    r: int,
    n_samples: int,
    seed: Optional[int] = None,
    transforms: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    center: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    perturbation: float = 1e-2,
) -> float:
    """Smallest objective over random rank-r candidates A B.

    `objective` maps a stack of m x n candidates to their values. Candidates are
    Gaussian factor pairs in raw space; with `transforms` = (T_l, T_r) a second
    half is drawn in a whitened space and mapped back as T_l A B T_r; with
    `center` = (A0, B0) every factor pair is additionally perturbed around it.
    """
    if n_samples < 1:
        raise ArgumentError("n_samples must be positive")
    m, n = dims
    rng = np.random.default_rng(seed)
    raw_count = n_samples if transforms is None else (n_samples + 1) // 2
    best = np.inf
    drawn = 0
    while drawn < n_samples:
        k = min(_CHUNK, n_samples - drawn)
        a = rng.standard_normal((k, m, r))
        b = rng.standard_normal((k, r, n))
        if center is not None:
            a = center[0] + perturbation * a
            b = center[1] + perturbation * b
        candidates = a @ b
        in_whitened = np.arange(drawn, drawn + k) >= raw_count
        if transforms is not None and np.any(in_whitened):
            candidates[in_whitened] = transforms[0] @ candidates[in_whitened] @ transforms[1]
        best = min(best, float(np.min(objective(candidates))))
        drawn += k
    logger.debug(f"random rank-{r} search over {n_samples} candidate(s): best {best:.6e}")
    return best


def oracle_exhaustive_cur(
    left: np.ndarray, right: np.ndarray, r: int, paired: bool = False
) -> Tuple[np.ndarray, float]:
    """Exact minimum of ||L U R - L R||_F^2 over all size-r selections (whole pairs when paired)."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    d = left.shape[1]
    if right.shape[0] != d:
        raise ArgumentError(f"L {left.shape} and R {right.shape} do not compose")
    units, size = (d // 2, r // 2) if paired else (d, r)
    if paired and (d % 2 != 0 or r % 2 != 0):
        raise ArgumentError("paired selection needs even dimension and rank")
    if not 1 <= size <= units:
        raise ArgumentError(f"selection size {r} outside [1, {d}]")
    total = comb(units, size)
    guard = get_settings().MAX_EXHAUSTIVE_SUBSETS
    if total > guard:
        raise ArgumentError(f"{total} subsets exceed the exhaustive search limit {guard}")
    best_keep, best_value = None, np.inf
    for subset in combinations(range(units), size):
        keep = pair_columns(np.array(subset)) if paired else np.array(subset, dtype=np.int64)
        value = cur_residual(left, right, keep)
        if value < best_value:
            best_keep, best_value = keep, value
    return best_keep, best_value


def random_subset_values(
    left: np.ndarray, right: np.ndarray, r: int, n_samples: int, seed: Optional[int] = None, paired: bool = False
) -> np.ndarray:
    """Objective of uniformly drawn size-r selections."""
    rng = np.random.default_rng(seed)
    d = left.shape[1]
    units, size = (d // 2, r // 2) if paired else (d, r)
    values = np.empty(n_samples)
    for i in range(n_samples):
        subset = np.sort(rng.choice(units, size=size, replace=False))
        keep = pair_columns(subset) if paired else subset
        values[i] = cur_residual(left, right, keep)
    return values
