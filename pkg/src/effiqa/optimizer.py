"""AdamW with decoupled weight decay, plus the step-decay LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch, UnsupportedVersion
from .regressor import FORMAT_VERSION, GradientSet, RegressorParams


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every_epochs: int = 10

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")


def lr_at_epoch(cfg: OptimConfig, epoch: int) -> float:
    # Binary floats drift (1e-4 * 0.1 * 0.1 != 1e-6); evaluate on the decimal
    # literals and round once.
    k = epoch // cfg.decay_every_epochs
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay_factor)) ** k)


@dataclass
class OptimState:
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: RegressorParams) -> "OptimState":
        arrs = params.arrays()
        return cls(0, [np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "step_count": self.step_count,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any], params: RegressorParams) -> "OptimState":
        if doc.get("format_version") != FORMAT_VERSION:
            raise UnsupportedVersion(f"optimizer state format_version {doc.get('format_version')!r}")
        shapes = [a.shape for a in params.arrays()]
        if len(doc["m"]) != len(shapes) or len(doc["v"]) != len(shapes):
            raise ShapeMismatch("optimizer state does not match the parameters")
        m = [np.asarray(x, dtype=np.float64).reshape(s) for x, s in zip(doc["m"], shapes)]
        v = [np.asarray(x, dtype=np.float64).reshape(s) for x, s in zip(doc["v"], shapes)]
        return cls(int(doc["step_count"]), m, v)


def step(
    params: RegressorParams,
    grads: GradientSet,
    state: OptimState,
    lr: float,
    cfg: OptimConfig,
) -> None:
    """Apply one AdamW update to ``params`` and ``state`` in place.

    Decay shrinks weights by ``lr * weight_decay`` before the adaptive step and
    is never folded into the moment estimates. Biases are not decayed.
    """
    p_arrs = params.arrays()
    g_arrs = grads.arrays()
    if not state.m:
        state.m = [np.zeros_like(a) for a in p_arrs]
        state.v = [np.zeros_like(a) for a in p_arrs]
    if len(g_arrs) != len(p_arrs) or len(state.m) != len(p_arrs):
        raise ShapeMismatch("gradient/state layer count differs from parameters")
    for p, g, m in zip(p_arrs, g_arrs, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, (p, g) in enumerate(zip(p_arrs, g_arrs)):
        m, v = state.m[k], state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        is_weight = k % 2 == 0
        if is_weight and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
