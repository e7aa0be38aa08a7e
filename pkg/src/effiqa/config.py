"""The single config document that drives every stage.

Config files are YAML with nested sections. Unknown keys are rejected so a
typo cannot silently fall back to a default. The digest is a SHA-256 over a
canonical JSON rendering and is what resumable runs compare against.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import SyntheticSpec
from .errors import ConfigError
from .losses import LossConfig
from .optimizer import OptimConfig
from .regressor import STUDENT_ARCH, TEACHER_ARCH, ArchSpec
from .preprocess import INFERENCE_RESOLUTION, STUDENT_RESOLUTION, TEACHER_RESOLUTION


@dataclass(frozen=True)
class Resolutions:
    teacher: int = TEACHER_RESOLUTION
    student: int = STUDENT_RESOLUTION
    inference: int = INFERENCE_RESOLUTION


@dataclass(frozen=True)
class DataPaths:
    labeled: str | None = None
    pool1: str | None = None
    pool2: str | None = None
    image_root: str | None = None

    @property
    def synthetic(self) -> bool:
        return self.labeled is None


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 1
    work_dir: str = "runs/default"
    teacher_arch: ArchSpec = TEACHER_ARCH
    student_arch: ArchSpec = STUDENT_ARCH
    optim: OptimConfig = OptimConfig()
    epochs: int = 30
    batch_size: int = 32
    loss: LossConfig = LossConfig()
    train_fraction: float = 0.8
    resolution: Resolutions = Resolutions()
    warm_start_enhanced: bool = False
    data: DataPaths = DataPaths()
    synthetic: SyntheticSpec | None = None
    shards: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if self.shards < 1:
            raise ConfigError("pseudo_label.shards must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.teacher_arch.input_dim != self.student_arch.input_dim:
            raise ConfigError("teacher and student must share input_dim")
        if self.data.synthetic and self.synthetic is None:
            object.__setattr__(self, "synthetic", SyntheticSpec(seed=self.seed))
        if self.synthetic is not None and self.synthetic.feature_dim != self.teacher_arch.input_dim:
            raise ConfigError("synthetic.feature_dim must equal the model input_dim")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- document form ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "seed": self.seed,
            "work_dir": self.work_dir,
            "arch": {"teacher": self.teacher_arch.to_dict(), "student": self.student_arch.to_dict()},
            "optim": dataclasses.asdict(self.optim),
            "train": {
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "warm_start_enhanced": self.warm_start_enhanced,
            },
            "loss": {"lambda": self.loss.lam},
            "split": {"train_fraction": self.train_fraction},
            "preprocess": dataclasses.asdict(self.resolution),
            "data": dataclasses.asdict(self.data),
            "pseudo_label": {"shards": self.shards},
        }
        if self.synthetic is not None:
            doc["synthetic"] = dataclasses.asdict(self.synthetic)
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> "TrainConfig":
        doc = dict(doc or {})
        try:
            return _build(doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        doc = self.to_dict()
        # neither parallelism nor the output location changes any result
        doc.pop("pseudo_label", None)
        doc.pop("work_dir", None)
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(doc: dict, name: str, allowed: set[str]) -> dict:
    sec = doc.pop(name, None) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(unknown))}")
    return sec


def _num(value: Any, kind: type, key: str):
    # PyYAML reads "1e-4" (no dot) as a string; accept numeric strings
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and value != out:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return out


def _typed(sec: dict, spec: dict[str, type], where: str) -> dict:
    out = {}
    for k, v in sec.items():
        kind = spec[k]
        if kind is bool:
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected true/false, got {v!r}")
            out[k] = v
        elif kind is str:
            out[k] = None if v is None else str(v)
        else:
            out[k] = _num(v, kind, f"{where}.{k}")
    return out


def _arch(sec: Any, where: str, default: ArchSpec) -> ArchSpec:
    if sec is None:
        return default
    if not isinstance(sec, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(sec) - {"input_dim", "hidden_dims", "head_dims"}
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(sorted(unknown))}")
    merged = {**default.to_dict(), **sec}
    try:
        return ArchSpec(
            _num(merged["input_dim"], int, f"{where}.input_dim"),
            tuple(_num(d, int, f"{where}.hidden_dims") for d in merged["hidden_dims"] or ()),
            tuple(_num(d, int, f"{where}.head_dims") for d in merged["head_dims"]),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_OPTIM = {"lr0": float, "weight_decay": float, "beta1": float, "beta2": float, "eps": float,
          "decay_factor": float, "decay_every_epochs": int}
_SYNTH = {"n_labeled": int, "n_pool1": int, "n_pool2": int, "feature_dim": int,
          "noise_sigma": float, "seed": int, "oracle_seed": int}


def _build(doc: dict) -> TrainConfig:
    top = {"seed", "work_dir", "arch", "optim", "train", "loss", "split", "preprocess", "data",
           "synthetic", "pseudo_label"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw: dict[str, Any] = {}
    if "seed" in doc:
        kw["seed"] = _num(doc.pop("seed"), int, "seed")
    if "work_dir" in doc:
        kw["work_dir"] = str(doc.pop("work_dir"))

    arch = _section(doc, "arch", {"teacher", "student"})
    kw["teacher_arch"] = _arch(arch.get("teacher"), "arch.teacher", TEACHER_ARCH)
    kw["student_arch"] = _arch(arch.get("student"), "arch.student", STUDENT_ARCH)

    kw["optim"] = OptimConfig(**_typed(_section(doc, "optim", set(_OPTIM)), _OPTIM, "optim"))

    train = _typed(_section(doc, "train", {"epochs", "batch_size", "warm_start_enhanced"}),
                   {"epochs": int, "batch_size": int, "warm_start_enhanced": bool}, "train")
    kw.update(train)

    loss = _typed(_section(doc, "loss", {"lambda"}), {"lambda": float}, "loss")
    if "lambda" in loss:
        kw["loss"] = LossConfig(loss["lambda"])

    split = _typed(_section(doc, "split", {"train_fraction"}), {"train_fraction": float}, "split")
    kw.update(split)

    res = _typed(_section(doc, "preprocess", {"teacher", "student", "inference"}),
                 {"teacher": int, "student": int, "inference": int}, "preprocess")
    kw["resolution"] = Resolutions(**res)

    data = _typed(_section(doc, "data", {"labeled", "pool1", "pool2", "image_root"}),
                  dict.fromkeys(("labeled", "pool1", "pool2", "image_root"), str), "data")
    kw["data"] = DataPaths(**data)
    given = [data.get(k) is not None for k in ("labeled", "pool1", "pool2")]
    if any(given) and not all(given):
        raise ConfigError("data.labeled, data.pool1 and data.pool2 must be given together")

    synth_present = "synthetic" in doc
    synth = _typed(_section(doc, "synthetic", set(_SYNTH)), _SYNTH, "synthetic")
    if all(given):
        if synth_present:
            raise ConfigError("'synthetic' conflicts with explicit data paths")
    else:
        synth.setdefault("seed", kw.get("seed", 1))
        kw["synthetic"] = SyntheticSpec(**synth)

    pl = _typed(_section(doc, "pseudo_label", {"shards"}), {"shards": int}, "pseudo_label")
    if "shards" in pl:
        kw["shards"] = pl["shards"]
    return TrainConfig(**kw)


def load_config(path: str | Path) -> TrainConfig:
    """Load a config file. The name ``default`` means the built-in defaults."""
    if str(path) == "default" and not Path(path).exists():
        return TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = TrainConfig.from_dict(doc)
    return cfg
