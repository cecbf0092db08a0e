"""Dense linear-algebra kernels shared by every solver.

All routines work on float64 copies and never mutate their inputs.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from app.core.config import get_settings
from app.core.exceptions import ArgumentError, DegenerateMatrixError, NumericalError, SvdConvergenceError
from app.models.solution import SvdFactors

logger = logging.getLogger(__name__)

_SVD_DRIVERS = ("gesdd", "gesvd")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return `a` as a finite 2-D float64 array."""
    m = np.array(a, dtype=np.float64, copy=True)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ArgumentError(f"{name} must be a non-empty 2-D array", details=f"shape={m.shape}")
    if not np.all(np.isfinite(m)):
        raise ArgumentError(f"{name} contains NaN or Inf entries")
    return m


def svd(a) -> SvdFactors:
    """Thin SVD with descending singular values.

    Falls back from the divide-and-conquer driver to the QR-iteration driver before
    giving up.
    """
    m = as_matrix(a)
    attempts = 0
    for driver in _SVD_DRIVERS:
        attempts += 1
        try:
            u, s, vt = linalg.svd(m, full_matrices=False, lapack_driver=driver, check_finite=False)
        except (linalg.LinAlgError, ValueError) as e:
            logger.warning(f"SVD driver {driver} failed on {m.shape}: {e}")
            continue
        return SvdFactors(u=u, s=s, vt=vt)
    raise SvdConvergenceError(m.shape[0], m.shape[1], attempts)


def truncated_svd(a, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """Best rank-r factors (Ar, Br) with the singular values folded into Br."""
    m = as_matrix(a)
    if not 1 <= r <= min(m.shape):
        raise ArgumentError(f"rank {r} outside [1, {min(m.shape)}]")
    f = svd(m)
    return f.u[:, :r].copy(), f.s[:r, None] * f.vt[:r, :]


def _damped_eigh(r, damping: float) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of R + damping * mean(diag R) * I."""
    settings = get_settings()
    m = as_matrix(r, "autocorrelation")
    if m.shape[0] != m.shape[1]:
        raise ArgumentError(f"autocorrelation must be square, got {m.shape}")
    if damping < 0:
        raise ArgumentError(f"damping must be non-negative, got {damping}")
    scale = max(np.abs(m).max(), np.finfo(np.float64).tiny)
    asymmetry = np.abs(m - m.T).max() / scale
    if asymmetry > settings.SYMMETRY_TOLERANCE:
        raise ArgumentError(
            "autocorrelation is not symmetric",
            details=f"relative asymmetry {asymmetry:.3e}",
        )
    m = 0.5 * (m + m.T)
    if damping > 0:
        m = m + damping * np.mean(np.diag(m)) * np.eye(m.shape[0])
    try:
        w, v = linalg.eigh(m, check_finite=False)
    except (linalg.LinAlgError, ValueError) as e:
        logger.error(f"eigendecomposition failed on {m.shape}: {e}")
        raise NumericalError(
            f"eigendecomposition of a {m.shape[0]}x{m.shape[1]} autocorrelation failed", details=str(e)
        )
    floor = -settings.NEGATIVE_EIGEN_TOLERANCE * max(np.abs(w).max(), np.finfo(np.float64).tiny)
    if w[0] < floor:
        raise DegenerateMatrixError("autocorrelation has a negative eigenvalue", float(w[0]))
    if w[0] < 0:
        logger.debug(f"clipping negative eigenvalue {w[0]:.3e}")
    return np.clip(w, 0.0, None), v


def _compose(v: np.ndarray, diag: np.ndarray) -> np.ndarray:
    out = (v * diag) @ v.T
    return 0.5 * (out + out.T)


def _inverse_roots(w: np.ndarray) -> np.ndarray:
    cutoff = get_settings().PINV_CUTOFF * (w.max() if w.size else 0.0)
    inv = np.zeros_like(w)
    keep = w > cutoff
    inv[keep] = 1.0 / np.sqrt(w[keep])
    if not np.all(keep):
        logger.warning(f"pseudo-inverting {int((~keep).sum())} of {w.size} eigenvalues")
    return inv


def psd_sqrt(r, damping: float = 0.0) -> np.ndarray:
    """Unique symmetric PSD square root of the damped autocorrelation."""
    w, v = _damped_eigh(r, damping)
    return _compose(v, np.sqrt(w))


def psd_inv_sqrt(r, damping: float = 0.0) -> np.ndarray:
    """Pseudo-inverse of `psd_sqrt(r, damping)`; tiny eigenvalues map to zero."""
    w, v = _damped_eigh(r, damping)
    return _compose(v, _inverse_roots(w))


def whitening_pair(r, damping: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """(R'^1/2, (R'^1/2)^-1) from a single eigendecomposition."""
    w, v = _damped_eigh(r, damping)
    return _compose(v, np.sqrt(w)), _compose(v, _inverse_roots(w))


def identity_pair(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    eye = np.eye(dim)
    return eye, eye.copy()


def squared_frobenius(a: np.ndarray, axes: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Squared Frobenius norm over the last two axes (broadcasts over leading ones)."""
    a = np.asarray(a, dtype=np.float64)
    if axes is None:
        axes = (-2, -1)
    return np.sum(a * a, axis=axes)


def top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Ascending indices of the `count` largest scores; lowest index wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= count <= scores.shape[0]:
        raise ArgumentError(f"cannot keep {count} of {scores.shape[0]} entries")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def pair_sum(values: np.ndarray) -> np.ndarray:
    """values[2j] + values[2j+1]."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] % 2 != 0:
        raise ArgumentError(f"cannot pair {values.shape[0]} entries")
    return values[0::2] + values[1::2]


def pair_columns(pairs: np.ndarray) -> np.ndarray:
    """Expand pair indices j into column indices (2j, 2j+1)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    return np.stack([2 * pairs, 2 * pairs + 1], axis=1).reshape(-1)


def cur_scores(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """||L_:,i||^2 ||R_i,:||^2, the energy of each rank-one term of L R."""
    return np.sum(left * left, axis=0) * np.sum(right * right, axis=1)


def cur_residual(
    left: np.ndarray, right: np.ndarray, keep: np.ndarray, scale: Optional[np.ndarray] = None
) -> float:
    """||L U R - L R||_F^2 where U keeps `keep` (optionally reweighted by `scale`)."""
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size and (keep.min() < 0 or keep.max() >= left.shape[1]):
        raise ArgumentError(f"selection outside [0, {left.shape[1]})")
    if scale is None:
        dropped = np.setdiff1d(np.arange(left.shape[1]), keep)
        return float(squared_frobenius(left[:, dropped] @ right[dropped, :]))
    approx = (left[:, keep] * scale) @ right[keep, :]
    return float(squared_frobenius(approx - left @ right))
