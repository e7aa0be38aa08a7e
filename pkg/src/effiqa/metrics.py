"""Correlation metrics used to score quality predictors.

SRCC is computed as the Pearson correlation of average-tie ranks. Both
correlations are clamped to [-1, 1] and refuse degenerate (zero-variance)
inputs instead of quietly returning 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConstantSequence, LengthMismatch, TooFewSamples


@dataclass(frozen=True)
class EvalReport:
    srcc: float
    plcc: float
    score: float
    param_count: int = 0
    flops: int = 0

    def as_dict(self) -> dict[str, float | int]:
        return {
            "srcc": self.srcc,
            "plcc": self.plcc,
            "score": self.score,
            "params": self.param_count,
            "flops": self.flops,
        }


def _as_pairs(predictions: Sequence[float], targets: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size < 2:
        raise TooFewSamples(f"correlation needs at least 2 pairs, got {p.size}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite value in score pairs")
    return p, t


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if np.all(x == x[0]):
        raise ConstantSequence("zero variance in predictions")
    if np.all(y == y[0]):
        raise ConstantSequence("zero variance in targets")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(np.dot(xc, xc))
    ny = np.sqrt(np.dot(yc, yc))
    rho = float(np.dot(xc, yc) / (nx * ny))
    return min(1.0, max(-1.0, rho))


def fractional_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot rank an empty sequence")
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], v.size]
    run_rank = (starts + ends + 1) / 2.0  # mean of positions starts+1 .. ends
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def plcc(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p, t = _as_pairs(predictions, targets)
    return _pearson(p, t)


def srcc(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p, t = _as_pairs(predictions, targets)
    return _pearson(fractional_ranks(p), fractional_ranks(t))


def combine(srcc_value: float, plcc_value: float) -> float:
    """Challenge score: the plain mean of SRCC and PLCC."""
    return (srcc_value + plcc_value) / 2.0


def challenge_score(predictions: Sequence[float], targets: Sequence[float]) -> EvalReport:
    s = srcc(predictions, targets)
    r = plcc(predictions, targets)
    return EvalReport(srcc=s, plcc=r, score=combine(s, r))
