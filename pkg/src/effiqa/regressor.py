"""Multilayer-perceptron quality regressor with hand-written backprop.

Hidden layers are affine + ReLU, the output layer is affine with no
activation. Predictions live in normalized score space; the min/max
constants needed to map them back travel with the parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import CorruptCheckpoint, ShapeMismatch, StaleCache, UnsupportedVersion

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    head_dims: tuple[int, ...] = (128, 1)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if self.input_dim < 1 or any(d < 1 for d in self.hidden_dims + self.head_dims):
            raise ValueError(f"layer widths must be positive: {self}")
        if not self.head_dims or self.head_dims[-1] != 1:
            raise ValueError("the regression head must end in a single output unit")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, *self.head_dims)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every affine layer."""
        d = self.dims
        return [(d[i + 1], d[i]) for i in range(len(d) - 1)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "head_dims": list(self.head_dims),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchSpec":
        return cls(int(d["input_dim"]), tuple(d.get("hidden_dims", ())), tuple(d.get("head_dims", (128, 1))))


# Desk-scale stand-ins for the large and small backbones.
TEACHER_ARCH = ArchSpec(64, (256, 128))
STUDENT_ARCH = ArchSpec(64, (16,))


@dataclass
class RegressorParams:
    arch: ArchSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mos_min: float = 0.0
    mos_max: float = 1.0

    def __post_init__(self):
        shapes = self.arch.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ShapeMismatch(f"expected {len(shapes)} layers, got {len(self.weights)}/{len(self.biases)}")
        for i, ((o, n), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != (o, n) or b.shape != (o,):
                raise ShapeMismatch(f"layer {i}: weight {w.shape}, bias {b.shape}; expected ({o}, {n}), ({o},)")
        if not self.mos_max > self.mos_min:
            raise ValueError("mos_max must exceed mos_min")

    def copy(self) -> "RegressorParams":
        return RegressorParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.mos_min,
            self.mos_max,
        )

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def denormalize(self, predictions: np.ndarray) -> np.ndarray:
        return np.asarray(predictions) * (self.mos_max - self.mos_min) + self.mos_min

    def equals(self, other: "RegressorParams") -> bool:
        """Bitwise equality of every array and constant."""
        if self.arch != other.arch:
            return False
        if (self.mos_min, self.mos_max) != (other.mos_min, other.mos_max):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class ForwardCache:
    # activations[0] is the input batch, activations[i] the output of layer i-1
    activations: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def init(arch: ArchSpec, seed: int, mos_min: float = 0.0, mos_max: float = 1.0) -> RegressorParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in arch.layer_shapes:
        bound = 1.0 / np.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return RegressorParams(arch, weights, biases, mos_min, mos_max)


def forward(params: RegressorParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ShapeMismatch(f"batch shape {x.shape}, model expects (N, {params.arch.input_dim})")
    cache = ForwardCache(activations=[x])
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        cache.preacts.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        cache.activations.append(h)
    return h[:, 0], cache


def predict(params: RegressorParams, batch: np.ndarray) -> np.ndarray:
    return forward(params, batch)[0]


def backward(params: RegressorParams, cache: ForwardCache, grad_predictions: np.ndarray) -> GradientSet:
    g = np.asarray(grad_predictions, dtype=np.float64).ravel()
    n_layers = len(params.weights)
    if len(cache.preacts) != n_layers or len(cache.activations) != n_layers + 1:
        raise StaleCache("cache depth does not match the model")
    n = cache.activations[0].shape[0]
    if g.size != n:
        raise StaleCache(f"{g.size} output gradients for a cached batch of {n}")
    for z, w in zip(cache.preacts, params.weights):
        if z.shape != (n, w.shape[0]):
            raise StaleCache("cached activations do not match layer widths")

    dw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = g[:, None]
    for i in range(n_layers - 1, -1, -1):
        dw[i] = delta.T @ cache.activations[i]
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (cache.preacts[i - 1] > 0.0)
    return GradientSet(dw, db)


def count_params(arch_or_params: ArchSpec | RegressorParams) -> int:
    arch = arch_or_params.arch if isinstance(arch_or_params, RegressorParams) else arch_or_params
    return sum(o * i + o for o, i in arch.layer_shapes)


def estimate_flops(arch_or_params: ArchSpec | RegressorParams) -> int:
    """Per-sample multiply-add count of the affine layers, 2 FLOPs each."""
    arch = arch_or_params.arch if isinstance(arch_or_params, RegressorParams) else arch_or_params
    return sum(2 * o * i for o, i in arch.layer_shapes)


# -- checkpoints ------------------------------------------------------------

def params_to_dict(params: RegressorParams) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "arch": params.arch.to_dict(),
        "norm": {"mos_min": float(params.mos_min), "mos_max": float(params.mos_max)},
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def params_from_dict(doc: dict[str, Any]) -> RegressorParams:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
    try:
        arch = ArchSpec.from_dict(doc["arch"])
        norm = doc["norm"]
        layers = doc["layers"]
        if len(layers) != len(arch.layer_shapes):
            raise CorruptCheckpoint(f"{len(layers)} layers stored, architecture has {len(arch.layer_shapes)}")
        weights, biases = [], []
        for i, ((o, n), layer) in enumerate(zip(arch.layer_shapes, layers)):
            w = np.asarray(layer["weight"], dtype=np.float64)
            b = np.asarray(layer["bias"], dtype=np.float64)
            if list(layer.get("shape", [o, n])) != [o, n] or w.size != o * n or b.shape != (o,):
                raise CorruptCheckpoint(f"layer {i} does not match architecture ({o}x{n})")
            weights.append(w.reshape(o, n))
            biases.append(b)
        return RegressorParams(arch, weights, biases, float(norm["mos_min"]), float(norm["mos_max"]))
    except CorruptCheckpoint:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(params: RegressorParams, path: str | os.PathLike, optim_state: Any = None) -> None:
    """Write a JSON checkpoint; floats are emitted with round-trip precision."""
    doc = params_to_dict(params)
    if optim_state is not None:
        doc["optimizer"] = optim_state.to_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _read_doc(path: str | os.PathLike) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: not a valid checkpoint document ({exc})") from exc
    if not isinstance(doc, dict):
        raise CorruptCheckpoint(f"{path}: not a valid checkpoint document")
    return doc


def load_checkpoint(path: str | os.PathLike) -> RegressorParams:
    return params_from_dict(_read_doc(path))


def load_checkpoint_with_state(path: str | os.PathLike) -> tuple[RegressorParams, dict[str, Any] | None]:
    """Load parameters plus the raw optimizer-state section, if one was saved."""
    doc = _read_doc(path)
    return params_from_dict(doc), doc.get("optimizer")
