"""Scored samples, label provenance, splits, batching and storage.

A dataset is an immutable, ordered tuple of :class:`Sample`. Labels are kept
in whatever space the caller put them in; :func:`normalize_scores` maps human
MOS onto [0, 1], which is where all training and pseudo-labeling happens.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    AlreadyLabeled,
    DegenerateScale,
    DuplicateId,
    MissingPrediction,
    ParseError,
    TooFewSamples,
)

HUMAN = "human"
TEACHER_V1 = "teacher_v1"
TEACHER_V2 = "teacher_v2"
PROVENANCES = (HUMAN, TEACHER_V1, TEACHER_V2)
PSEUDO_PROVENANCES = (TEACHER_V1, TEACHER_V2)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True, eq=False)
class Sample:
    """One item. Exactly one of ``features``/``image`` is set.

    Unlabeled samples have ``mos is None`` and ``provenance is None``.
    """

    id: str
    features: np.ndarray | None = None
    image: str | None = None
    mos: float | None = None
    provenance: str | None = None

    def __post_init__(self):
        if (self.features is None) == (self.image is None):
            raise ValueError(f"sample {self.id!r}: exactly one of features/image is required")
        if self.features is not None:
            f = np.array(self.features, dtype=np.float64).ravel()
            f.setflags(write=False)
            object.__setattr__(self, "features", f)
        if self.mos is not None:
            object.__setattr__(self, "mos", float(self.mos))
            if not math.isfinite(self.mos):
                raise ValueError(f"sample {self.id!r}: non-finite mos")
            if self.provenance not in PROVENANCES:
                raise ValueError(f"sample {self.id!r}: labeled sample needs a provenance, got {self.provenance!r}")
        elif self.provenance is not None:
            raise ValueError(f"sample {self.id!r}: provenance set on an unlabeled sample")

    @property
    def labeled(self) -> bool:
        return self.mos is not None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.id, self.image, self.mos, self.provenance) != (other.id, other.image, other.mos, other.provenance):
            return False
        if self.features is None or other.features is None:
            return self.features is other.features
        return self.features.shape == other.features.shape and self.features.tobytes() == other.features.tobytes()

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...] = ()
    norm: tuple[float, float] | None = None
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: dict[str, int] = {}
        for i, s in enumerate(self.samples):
            if s.id in seen:
                raise DuplicateId(f"duplicate sample id {s.id!r}")
            seen[s.id] = i
        object.__setattr__(self, "_index", seen)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.norm == other.norm and len(self) == len(other) and all(
            a == b for a, b in zip(self.samples, other.samples)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    @property
    def is_labeled(self) -> bool:
        return all(s.labeled for s in self.samples)

    @property
    def has_images(self) -> bool:
        return any(s.image is not None for s in self.samples)

    def labels(self) -> np.ndarray:
        if not self.is_labeled:
            raise ValueError("dataset contains unlabeled samples")
        return np.array([s.mos for s in self.samples], dtype=np.float64)

    def feature_matrix(self) -> np.ndarray:
        if self.has_images:
            raise ValueError("dataset has image payloads; preprocess them first")
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([s.features for s in self.samples])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.norm)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    n = len(data)
    if n < 2:
        raise TooFewSamples(f"cannot split {n} samples")
    n_train = round_half_away(spec.train_fraction * n)
    if n_train < 1 or n_train >= n:
        raise TooFewSamples(f"{n} samples leave an empty side at train_fraction={spec.train_fraction}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(n, seed, epoch)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray
    targets: np.ndarray | None


def batches(
    data: Dataset,
    batch_size: int,
    seed: int,
    epoch: int,
    featurize: Callable[[Dataset, np.ndarray], np.ndarray] | None = None,
) -> Iterator[Batch]:
    """Iterate one epoch. ``featurize`` maps (dataset, indices) to a feature
    matrix; by default the stored feature vectors are stacked."""
    matrix = None if featurize is not None else data.feature_matrix()
    labels = data.labels() if data.is_labeled else None
    for idx in batch_indices(len(data), batch_size, seed, epoch):
        feats = featurize(data, idx) if featurize is not None else matrix[idx]
        yield Batch([data.samples[i].id for i in idx], feats, None if labels is None else labels[idx])


def normalize_scores(data: Dataset) -> tuple[Dataset, float, float]:
    y = data.labels()
    lo, hi = float(y.min()), float(y.max())
    if not hi > lo:
        raise DegenerateScale("all labels are equal; cannot min-max normalize")
    return apply_normalization(data, lo, hi), lo, hi


def apply_normalization(data: Dataset, mos_min: float, mos_max: float) -> Dataset:
    span = mos_max - mos_min
    out = tuple(replace(s, mos=(s.mos - mos_min) / span) for s in data.samples)
    return Dataset(out, (mos_min, mos_max))


def denormalize_scores(data: Dataset, mos_min: float, mos_max: float) -> Dataset:
    span = mos_max - mos_min
    return Dataset(tuple(replace(s, mos=s.mos * span + mos_min) for s in data.samples), None)


def attach_pseudo_labels(pool: Dataset, predictions: Mapping[str, float], provenance: str) -> Dataset:
    if provenance not in PSEUDO_PROVENANCES:
        raise ValueError(f"pseudo-label provenance must be one of {PSEUDO_PROVENANCES}, got {provenance!r}")
    out = []
    for s in pool.samples:
        if s.labeled:
            raise AlreadyLabeled(f"sample {s.id!r} already carries a {s.provenance} label")
        if s.id not in predictions:
            raise MissingPrediction(f"no prediction for sample {s.id!r}")
        y = float(predictions[s.id])
        out.append(replace(s, mos=min(1.0, max(0.0, y)), provenance=provenance))
    return Dataset(tuple(out), pool.norm)


def check_disjoint(*datasets: Dataset) -> None:
    from .errors import PoolOverlap

    seen: set[str] = set()
    for d in datasets:
        ids = set(d.ids)
        common = seen & ids
        if common:
            raise PoolOverlap(f"{len(common)} ids shared between pools, e.g. {sorted(common)[0]!r}")
        seen |= ids


# -- synthetic benchmark ------------------------------------------------------

ORACLE_HIDDEN = 8


@dataclass(frozen=True)
class SyntheticSpec:
    n_labeled: int = 2000
    n_pool1: int = 10000
    n_pool2: int = 10000
    feature_dim: int = 64
    noise_sigma: float = 0.02
    seed: int = 0
    oracle_seed: int = 0

    def __post_init__(self):
        if min(self.n_labeled, self.n_pool1, self.n_pool2, self.feature_dim) < 1:
            raise ValueError("synthetic sizes must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


class QualityOracle:
    """Hidden ground-truth scoring function of the synthetic benchmark.

    A seeded 8-unit ReLU network whose positive hidden biases keep most units
    active (a mildly nonlinear target), followed by a logistic squashing. The
    pre-logistic output is centered and scaled on a fixed calibration draw so
    scores spread over (0, 1).
    """

    def __init__(self, feature_dim: int, seed: int = 0):
        rng = np.random.default_rng([seed, feature_dim, 0x0AC1E])
        self.w1 = rng.standard_normal((ORACLE_HIDDEN, feature_dim)) / np.sqrt(feature_dim)
        self.b1 = 1.0 + 0.5 * rng.standard_normal(ORACLE_HIDDEN)
        self.w2 = rng.standard_normal(ORACLE_HIDDEN)
        calib = self._hidden(rng.standard_normal((4096, feature_dim))) @ self.w2
        self.b2 = -float(calib.mean())
        self.gain = 1.5 / float(calib.std())

    def _hidden(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(np.atleast_2d(x) @ self.w1.T + self.b1, 0.0)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        z = self.gain * (self._hidden(features) @ self.w2 + self.b2)
        return 1.0 / (1.0 + np.exp(-z))


def _features(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.standard_normal((n, d))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    oracle = QualityOracle(spec.feature_dim, spec.oracle_seed)
    ss = np.random.SeedSequence([spec.seed, 0x5EED])
    r_lab, r_p1, r_p2, r_noise = (np.random.default_rng(s) for s in ss.spawn(4))

    x = _features(r_lab, spec.n_labeled, spec.feature_dim)
    g = oracle(x)
    if spec.noise_sigma > 0:
        y = np.clip(g + r_noise.normal(0.0, spec.noise_sigma, size=g.shape), 0.0, 1.0)
    else:
        y = g
    labeled = Dataset(tuple(
        Sample(f"L{i:06d}", features=x[i], mos=float(y[i]), provenance=HUMAN) for i in range(spec.n_labeled)
    ))
    pools = []
    for prefix, rng, n in (("P1", r_p1, spec.n_pool1), ("P2", r_p2, spec.n_pool2)):
        xp = _features(rng, n, spec.feature_dim)
        pools.append(Dataset(tuple(Sample(f"{prefix}-{i:06d}", features=xp[i]) for i in range(n))))
    return labeled, pools[0], pools[1]


def synthetic_answers(pool: Dataset, spec: SyntheticSpec) -> dict[str, float]:
    """Noise-free oracle scores for every sample of a synthetic pool."""
    oracle = QualityOracle(spec.feature_dim, spec.oracle_seed)
    g = oracle(pool.feature_matrix())
    return {s.id: float(v) for s, v in zip(pool.samples, g)}


# -- storage ------------------------------------------------------------------

_KEYS = {"id", "provenance", "features", "image", "mos"}


def _record(s: Sample) -> dict:
    rec: dict = {"id": s.id, "provenance": s.provenance}
    if s.features is not None:
        rec["features"] = s.features.tolist()
    else:
        rec["image"] = s.image
    if s.mos is not None:
        rec["mos"] = s.mos
    return rec


def save_dataset(data: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in data.samples:
            fh.write(json.dumps(_record(s), allow_nan=False) + "\n")
    os.replace(tmp, path)


def _parse_record(line: str, lineno: int) -> Sample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid record ({exc.msg})", lineno) from exc
    if not isinstance(rec, dict):
        raise ParseError("record is not a key-value document", lineno)
    unknown = set(rec) - _KEYS
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", lineno)
    for key in ("id", "provenance"):
        if key not in rec:
            raise ParseError(f"missing required key {key!r}", lineno)
    prov = rec["provenance"]
    if prov is not None and prov not in PROVENANCES:
        raise ParseError(f"unknown provenance {prov!r}", lineno)
    if ("features" in rec) == ("image" in rec):
        raise ParseError("exactly one of 'features'/'image' is required", lineno)
    if not isinstance(rec["id"], str):
        raise ParseError("id must be a string", lineno)
    try:
        return Sample(
            rec["id"],
            features=rec.get("features"),
            image=rec.get("image"),
            mos=rec.get("mos"),
            provenance=prov,
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), lineno) from exc


def load_dataset(path: str | os.PathLike) -> Dataset:
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            s = _parse_record(line, lineno)
            if s.id in seen:
                raise DuplicateId(f"line {lineno}: duplicate sample id {s.id!r}")
            seen.add(s.id)
            samples.append(s)
    return Dataset(tuple(samples))


def save_answers(answers: Mapping[str, float], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} {float(v)!r}\n" for k, v in answers.items()), encoding="utf-8")


def load_answers(path: str | os.PathLike) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'id value'", lineno)
            try:
                out[parts[0]] = float(parts[1])
            except ValueError as exc:
                raise ParseError(f"bad value {parts[1]!r}", lineno) from exc
    return out
