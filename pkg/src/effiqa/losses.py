"""Training objectives: MSE, the PLCC loss and their weighted sum.

Every loss returns its value together with the gradient with respect to the
predictions; targets are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BatchTooSmall,
    ConstantPredictions,
    ConstantTargets,
    EmptyBatch,
    LengthMismatch,
)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _check(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise EmptyBatch("loss on an empty batch")
    return p, t


def mse_loss(predictions: Sequence[float], targets: Sequence[float]) -> LossResult:
    p, t = _check(predictions, targets)
    diff = p - t
    n = p.size
    return LossResult(float(np.dot(diff, diff) / n), (2.0 / n) * diff)


def _plcc_terms(p: np.ndarray, t: np.ndarray) -> LossResult:
    # test constancy directly: the centered vector of equal values can be
    # nonzero by one rounding unit
    if np.all(t == t[0]):
        raise ConstantTargets("targets have zero variance")
    if np.all(p == p[0]):
        raise ConstantPredictions("predictions have zero variance")
    a = p - p.mean()
    b = t - t.mean()
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    na, nb = np.sqrt(aa), np.sqrt(bb)
    rho = float(np.dot(a, b) / (na * nb))
    # d(rho)/dp; centering is absorbed because a and b are already centered
    drho = b / (na * nb) - rho * a / aa
    rho = min(1.0, max(-1.0, rho))
    return LossResult((1.0 - rho) / 2.0, -0.5 * drho)


def plcc_loss(predictions: Sequence[float], targets: Sequence[float]) -> LossResult:
    p, t = _check(predictions, targets)
    if p.size < 2:
        raise BatchTooSmall("PLCC loss needs at least 2 samples")
    return _plcc_terms(p, t)


def total_loss(predictions: Sequence[float], targets: Sequence[float], cfg: LossConfig = LossConfig()) -> LossResult:
    """MSE plus ``cfg.lam`` times the PLCC loss.

    The PLCC term is dropped for a batch where it is undefined (fewer than two
    samples, or zero variance in predictions or targets).
    """
    p, t = _check(predictions, targets)
    out = mse_loss(p, t)
    if cfg.lam == 0.0 or p.size < 2:
        return out
    try:
        corr = _plcc_terms(p, t)
    except (ConstantPredictions, ConstantTargets):
        return out
    return LossResult(out.value + cfg.lam * corr.value, out.grad + cfg.lam * corr.grad)
