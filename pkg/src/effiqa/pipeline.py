"""Five-stage teacher self-training and student distillation.

Stages, in order:

1. ``train_teacher``     teacher on human labels
2. ``pseudo_label_1``    teacher labels pool 1
3. ``enhance_teacher``   teacher+ on human labels + pool-1 pseudo labels
4. ``pseudo_label_2``    teacher+ labels pool 2
5. ``distill_student``   student on all three sources

Multi-source training draws one batch per source per step, computes the loss
on each batch separately and sums the gradients before a single optimizer
step, so every source keeps its own 1/size normalization. An epoch lasts as
many steps as the largest source needs to be seen once; smaller sources are
reshuffled and cycled.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import dataset as ds
from . import regressor as reg
from .config import TrainConfig
from .dataset import Dataset, SplitSpec
from .errors import (
    ConfigDigestMismatch,
    ConstantSequence,
    DataError,
    DivergedTraining,
    ShapeMismatch,
    StageDependencyViolation,
    UnsupportedVersion,
)
from .losses import total_loss
from .metrics import EvalReport, challenge_score
from .optimizer import OptimState, lr_at_epoch, step
from .preprocess import PreprocessConfig, load_image, preprocess
from .regressor import ArchSpec, RegressorParams

log = logging.getLogger(__name__)

STAGES = ("train_teacher", "pseudo_label_1", "enhance_teacher", "pseudo_label_2", "distill_student")
STATE_VERSION = 1
PSEUDO_CHUNK = 256

ARTIFACT_NAMES = {
    "train_teacher": "teacher.ckpt.json",
    "pseudo_label_1": "pseudo1.jsonl",
    "enhance_teacher": "teacher_plus.ckpt.json",
    "pseudo_label_2": "pseudo2.jsonl",
    "distill_student": "student.ckpt.json",
}


def derive_seed(seed: int, *tags: Any) -> int:
    key = "\x1f".join([str(seed), *map(str, tags)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


# -- features -------------------------------------------------------------------

class FeatureSource:
    """Resolves samples of one dataset to model inputs.

    Feature payloads are stacked once. Image payloads go through
    resize/crop/pool; training mode uses random crops keyed by epoch and
    sample id, evaluation mode a center crop (computed once and cached).
    """

    def __init__(self, data: Dataset, input_dim: int, resolution: int, seed: int = 0,
                 image_root: str | os.PathLike | None = None):
        self.data = data
        self.input_dim = input_dim
        self.resolution = resolution
        self.seed = seed
        self.image_root = Path(image_root) if image_root is not None else None
        self._matrix: np.ndarray | None = None
        if not data.has_images and len(data):
            m = data.feature_matrix()
            if m.shape[1] != input_dim:
                raise ShapeMismatch(f"dataset features have dim {m.shape[1]}, model expects {input_dim}")
            self._matrix = m
        self._eval_cache: np.ndarray | None = None

    def _path(self, s: ds.Sample) -> Path:
        p = Path(s.image)
        if not p.is_absolute() and self.image_root is not None:
            p = self.image_root / p
        return p

    def _image_rows(self, idx: Sequence[int], cfg: PreprocessConfig) -> np.ndarray:
        rows = [
            preprocess(load_image(self._path(self.data.samples[i])), cfg, self.input_dim, self.data.samples[i].id)
            for i in idx
        ]
        return np.stack(rows) if rows else np.zeros((0, self.input_dim))

    def train(self, idx: np.ndarray, epoch: int) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix[idx]
        cfg = PreprocessConfig.square(self.resolution, "random", derive_seed(self.seed, "crop", epoch))
        return self._image_rows(idx, cfg)

    def eval(self, idx: np.ndarray | None = None) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix if idx is None else self._matrix[idx]
        if self._eval_cache is None:
            cfg = PreprocessConfig.square(self.resolution, "center")
            self._eval_cache = self._image_rows(range(len(self.data)), cfg)
        return self._eval_cache if idx is None else self._eval_cache[idx]


# -- evaluation / inference -----------------------------------------------------

def predict_chunked(model: RegressorParams, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Forward rows [start, stop) in fixed, index-aligned chunks so the result
    does not depend on how the rows are sharded."""
    stop = len(x) if stop is None else stop
    out = []
    for lo in range(start, stop, PSEUDO_CHUNK):
        hi = min(lo + PSEUDO_CHUNK, stop)
        out.append(reg.predict(model, x[lo:hi]))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: RegressorParams, data: Dataset, resolution: int | None = None,
             image_root: str | None = None) -> EvalReport:
    """SRCC/PLCC of ``model`` on a labeled dataset, in normalized score space."""
    if not data.is_labeled:
        raise DataError("evaluation needs a labeled dataset")
    src = FeatureSource(data, model.arch.input_dim, resolution or 288, image_root=image_root)
    preds = predict_chunked(model, src.eval())
    r = challenge_score(preds, data.labels())
    return EvalReport(r.srcc, r.plcc, r.score, reg.count_params(model), reg.estimate_flops(model))


def pseudo_label(model: RegressorParams, pool: Dataset, provenance: str, resolution: int | None = None,
                 image_root: str | None = None, shards: int = 1) -> Dataset:
    """Label every pool sample with the model's (clamped) prediction.

    With ``shards > 1`` disjoint chunk ranges run on worker threads and are
    merged back in pool order; the result is identical to a single pass.
    """
    if shards < 1:
        raise ValueError("shards must be >= 1")
    src = FeatureSource(pool, model.arch.input_dim, resolution or 288, image_root=image_root)
    x = src.eval()
    n = len(pool)
    n_chunks = math.ceil(n / PSEUDO_CHUNK)
    bounds = [min(n, PSEUDO_CHUNK * ((k * n_chunks) // shards)) for k in range(shards + 1)]
    ranges = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if shards == 1 or len(ranges) <= 1:
        parts = [predict_chunked(model, x, lo, hi) for lo, hi in ranges]
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as ex:
            parts = list(ex.map(lambda r: predict_chunked(model, x, *r), ranges))
    preds = np.concatenate(parts) if parts else np.zeros(0)
    return ds.attach_pseudo_labels(pool, dict(zip(pool.ids, preds.tolist())), provenance)


# -- training -------------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_srcc: list[float] = field(default_factory=list)
    val_plcc: list[float] = field(default_factory=list)
    selected_epoch: int | None = None
    final: EvalReport | None = None

    @property
    def val_score(self) -> list[float]:
        return [(s + p) / 2.0 for s, p in zip(self.val_srcc, self.val_plcc)]

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "epochs_run": len(self.train_loss),
            "selected_epoch": "none" if self.selected_epoch is None else self.selected_epoch,
        }
        if self.final is not None:
            out.update(self.final.as_dict())
        out["train_loss"] = ",".join(repr(v) for v in self.train_loss)
        out["val_srcc"] = ",".join(repr(v) for v in self.val_srcc)
        out["val_plcc"] = ",".join(repr(v) for v in self.val_plcc)
        return out


def _source_stream(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    cycle = 0
    while True:
        order = np.random.default_rng([seed, epoch, cycle]).permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]
        cycle += 1


def _validation_score(model: RegressorParams, val_x: np.ndarray, val_y: np.ndarray) -> tuple[float, float]:
    preds = predict_chunked(model, val_x)
    if not np.all(np.isfinite(preds)):
        raise DivergedTraining("non-finite validation predictions")
    try:
        r = challenge_score(preds, val_y)
    except ConstantSequence:
        return math.nan, math.nan
    return r.srcc, r.plcc


def fit(
    arch: ArchSpec,
    sources: Sequence[Dataset],
    val: Dataset,
    cfg: TrainConfig,
    role: str,
    resolution: int,
    init_params: RegressorParams | None = None,
    norm: tuple[float, float] = (0.0, 1.0),
    image_root: str | None = None,
) -> tuple[RegressorParams, TrainReport]:
    """Minimize the summed per-source total loss; keep the epoch with the best
    validation (SRCC + PLCC) / 2.

    Seeds for initialization, crops and batch order derive from ``role``
    ("teacher" or "student") and the source position, not from the stage, so
    a run whose extra sources are empty replays the single-source run exactly.
    """
    params = init_params.copy() if init_params is not None else reg.init(arch, derive_seed(cfg.seed, role, "init"), *norm)
    report = TrainReport()
    if cfg.epochs == 0:
        return params, report
    feeds = [
        (FeatureSource(s, arch.input_dim, resolution, derive_seed(cfg.seed, role, k), image_root), s.labels(),
         derive_seed(cfg.seed, role, "order", k))
        for k, s in enumerate(sources) if len(s)
    ]
    if not feeds:
        raise DataError("no training data")
    val_x = FeatureSource(val, arch.input_dim, resolution, image_root=image_root).eval()
    val_y = val.labels()

    state = OptimState.zeros_like(params)
    best: RegressorParams | None = None
    best_score = -math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.optim, epoch)
        n_steps = max(math.ceil(len(f[0].data) / cfg.batch_size) for f in feeds)
        streams = [_source_stream(len(f[0].data), cfg.batch_size, f[2], epoch) for f in feeds]
        loss_sum = 0.0
        for _ in range(n_steps):
            grads = None
            for (src, y, _), stream in zip(feeds, streams):
                idx = next(stream)
                preds, cache = reg.forward(params, src.train(idx, epoch))
                res = total_loss(preds, y[idx], cfg.loss)
                if not math.isfinite(res.value):
                    raise DivergedTraining(f"{role}: loss became non-finite in epoch {epoch}")
                g = reg.backward(params, cache, res.grad)
                grads = g if grads is None else grads + g
                loss_sum += res.value
            step(params, grads, state, lr, cfg.optim)
        srcc_v, plcc_v = _validation_score(params, val_x, val_y)
        report.train_loss.append(loss_sum / n_steps)
        report.val_srcc.append(srcc_v)
        report.val_plcc.append(plcc_v)
        score = (srcc_v + plcc_v) / 2.0
        log.info("%s epoch %d lr %.1e loss %.5f val srcc %.4f plcc %.4f",
                 role, epoch, lr, report.train_loss[-1], srcc_v, plcc_v)
        if score > best_score:
            best_score, best, report.selected_epoch = score, params.copy(), epoch
    if best is None:
        # every epoch produced constant predictions; fall back to the last one
        best, report.selected_epoch = params.copy(), cfg.epochs - 1
    preds = predict_chunked(best, val_x)
    try:
        r = challenge_score(preds, val_y)
        report.final = EvalReport(r.srcc, r.plcc, r.score, reg.count_params(best), reg.estimate_flops(best))
    except ConstantSequence:
        report.final = None
    return best, report


@dataclass
class LabeledData:
    """Human-labeled data after normalization, already split."""

    train: Dataset
    val: Dataset
    mos_min: float
    mos_max: float

    @property
    def norm(self) -> tuple[float, float]:
        return self.mos_min, self.mos_max


def prepare_labeled(labeled: Dataset, cfg: TrainConfig) -> LabeledData:
    if not labeled.is_labeled:
        raise DataError("the labeled dataset contains unlabeled samples")
    bad = [s.id for s in labeled if s.provenance != ds.HUMAN]
    if bad:
        raise DataError(f"labeled dataset must be human-labeled; {bad[0]!r} is {labeled.samples[labeled.index_of(bad[0])].provenance}")
    norm_data, lo, hi = ds.normalize_scores(labeled)
    train, val = ds.split(norm_data, SplitSpec(cfg.train_fraction, cfg.seed))
    return LabeledData(train, val, lo, hi)


def train_teacher(labeled: LabeledData, cfg: TrainConfig, image_root: str | None = None):
    return fit(cfg.teacher_arch, [labeled.train], labeled.val, cfg, "teacher",
               cfg.resolution.teacher, norm=labeled.norm, image_root=image_root)


def enhance_teacher(labeled: LabeledData, pseudo1: Dataset, cfg: TrainConfig,
                    teacher: RegressorParams | None = None, image_root: str | None = None):
    init = teacher if cfg.warm_start_enhanced else None
    if cfg.warm_start_enhanced and teacher is None:
        raise DataError("warm_start_enhanced needs the stage-1 teacher")
    return fit(cfg.teacher_arch, [labeled.train, pseudo1], labeled.val, cfg, "teacher",
               cfg.resolution.teacher, init_params=init, norm=labeled.norm, image_root=image_root)


def distill_student(labeled: LabeledData, pseudo1: Dataset, pseudo2: Dataset, cfg: TrainConfig,
                    image_root: str | None = None):
    return fit(cfg.student_arch, [labeled.train, pseudo1, pseudo2], labeled.val, cfg, "student",
               cfg.resolution.student, norm=labeled.norm, image_root=image_root)


# -- state + orchestration -----------------------------------------------------------

@dataclass
class PipelineState:
    config_digest: str
    completed: list[str] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    reports: dict[str, dict[str, Any]] = field(default_factory=dict)
    ran: list[str] = field(default_factory=list)  # stages executed by this process, not persisted

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": STATE_VERSION,
            "config_digest": self.config_digest,
            "completed": [s for s in STAGES if s in self.completed],
            "artifacts": {s: self.artifacts[s] for s in STAGES if s in self.artifacts},
            "reports": {s: self.reports[s] for s in STAGES if s in self.reports},
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PipelineState":
        if doc.get("format_version") != STATE_VERSION:
            raise UnsupportedVersion(f"pipeline state format_version {doc.get('format_version')!r}")
        completed = list(doc.get("completed", []))
        unknown = set(completed) - set(STAGES)
        if unknown:
            raise DataError(f"unknown stages in state file: {sorted(unknown)}")
        return cls(doc["config_digest"], completed, dict(doc.get("artifacts", {})), dict(doc.get("reports", {})))

    @property
    def complete(self) -> bool:
        return all(s in self.completed for s in STAGES)


class Pipeline:
    """Runs stages against one work directory and persists state after each."""

    def __init__(self, cfg: TrainConfig, force: bool = False):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self.digest = cfg.digest()
        self.state = self._load_state(force)
        self._labeled: LabeledData | None = None

    # paths
    @property
    def state_path(self) -> Path:
        return self.work / "state.json"

    def artifact_path(self, stage: str) -> Path:
        return self.work / ARTIFACT_NAMES[stage]

    def data_paths(self) -> dict[str, Path]:
        d = self.cfg.data
        if not d.synthetic:
            return {"labeled": Path(d.labeled), "pool1": Path(d.pool1), "pool2": Path(d.pool2)}
        base = self.work / "data"
        return {"labeled": base / "labeled.jsonl", "pool1": base / "pool1.jsonl", "pool2": base / "pool2.jsonl"}

    @property
    def image_root(self) -> str | None:
        if self.cfg.data.image_root is not None:
            return self.cfg.data.image_root
        return str(self.data_paths()["labeled"].parent)

    # state
    def _load_state(self, force: bool) -> PipelineState:
        if not self.state_path.exists():
            return PipelineState(self.digest)
        try:
            doc = json.loads(self.state_path.read_text(encoding="utf-8"))
            state = PipelineState.from_dict(doc)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{self.state_path}: unreadable pipeline state ({exc})") from exc
        if state.config_digest != self.digest:
            if not force:
                raise ConfigDigestMismatch(
                    f"{self.state_path} was produced by config {state.config_digest[:12]}, "
                    f"current config is {self.digest[:12]}; pass --force to start over"
                )
            log.warning("config changed; discarding previous pipeline state")
            return PipelineState(self.digest)
        self._drop_stale(state)
        return state

    def _drop_stale(self, state: PipelineState) -> None:
        """Forget completed stages whose artifact vanished, and everything after."""
        for i, stage in enumerate(STAGES):
            path = state.artifacts.get(stage)
            ok = stage in state.completed and path is not None and self._loads(self.work / path)
            if not ok:
                for later in STAGES[i:]:
                    if later in state.completed:
                        state.completed.remove(later)
                    state.reports.pop(later, None)
                return

    @staticmethod
    def _loads(path: Path) -> bool:
        if not path.exists():
            return False
        try:
            if path.name.endswith(".ckpt.json"):
                reg.load_checkpoint(path)
            else:
                if not ds.load_dataset(path).is_labeled:
                    return False
        except (DataError, OSError):
            return False
        return True

    def _save_state(self) -> None:
        self.work.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_name("state.json.tmp")
        tmp.write_text(json.dumps(self.state.to_dict(), indent=1, sort_keys=False) + "\n", encoding="utf-8")
        os.replace(tmp, self.state_path)

    # data
    def ensure_data(self) -> dict[str, Path]:
        paths = self.data_paths()
        stamp = paths["labeled"].parent / "synthetic.json"
        if self.cfg.data.synthetic:
            spec = self.cfg.synthetic
            spec_doc = json.dumps(dataclasses.asdict(spec), sort_keys=True)
            fresh = all(p.exists() for p in paths.values()) and stamp.exists() and stamp.read_text() == spec_doc
        if self.cfg.data.synthetic and not fresh:
            labeled, pool1, pool2 = ds.generate_synthetic(spec)
            for key, d in (("labeled", labeled), ("pool1", pool1), ("pool2", pool2)):
                ds.save_dataset(d, paths[key])
            ds.save_answers(ds.synthetic_answers(pool1, spec), paths["pool1"].with_suffix(".answers"))
            ds.save_answers(ds.synthetic_answers(pool2, spec), paths["pool2"].with_suffix(".answers"))
            stamp.write_text(spec_doc)
        for key, p in paths.items():
            if not p.exists():
                raise DataError(f"{key} dataset not found: {p}")
        return paths

    def labeled(self) -> LabeledData:
        if self._labeled is None:
            self._labeled = prepare_labeled(ds.load_dataset(self.ensure_data()["labeled"]), self.cfg)
        return self._labeled

    def pool(self, which: str) -> Dataset:
        paths = self.ensure_data()
        pool = ds.load_dataset(paths[which])
        if not all(not s.labeled for s in pool):
            raise DataError(f"{which} must be unlabeled")
        other = ds.load_dataset(paths["pool2" if which == "pool1" else "pool1"])
        ds.check_disjoint(pool, other, self.labeled().train, self.labeled().val)
        return pool

    # stages
    def require(self, stage: str) -> None:
        idx = STAGES.index(stage)
        missing = [s for s in STAGES[:idx] if s not in self.state.completed]
        if missing:
            raise StageDependencyViolation(f"{stage} needs {', '.join(missing)} to complete first")

    def _finish(self, stage: str, report: dict[str, Any]) -> None:
        self.state.completed.append(stage)
        self.state.artifacts[stage] = ARTIFACT_NAMES[stage]
        self.state.reports[stage] = report
        self.state.ran.append(stage)
        self._save_state()

    def run_stage(self, stage: str) -> dict[str, Any]:
        """Run one stage if it is not already complete; return its report."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.require(stage)
        if stage in self.state.completed:
            return self.state.reports.get(stage, {})
        cfg = self.cfg
        lab = self.labeled()
        root = self.image_root
        out = self.artifact_path(stage)
        if stage in ("train_teacher", "enhance_teacher", "distill_student"):
            if stage == "train_teacher":
                params, rep = train_teacher(lab, cfg, root)
            elif stage == "enhance_teacher":
                teacher = reg.load_checkpoint(self.artifact_path("train_teacher"))
                p1 = ds.load_dataset(self.artifact_path("pseudo_label_1"))
                params, rep = enhance_teacher(lab, p1, cfg, teacher, root)
            else:
                p1 = ds.load_dataset(self.artifact_path("pseudo_label_1"))
                p2 = ds.load_dataset(self.artifact_path("pseudo_label_2"))
                params, rep = distill_student(lab, p1, p2, cfg, root)
            reg.save_checkpoint(params, out)
            report = rep.to_flat()
        else:
            first = stage == "pseudo_label_1"
            model = reg.load_checkpoint(self.artifact_path("train_teacher" if first else "enhance_teacher"))
            pool = self.pool("pool1" if first else "pool2")
            labeled = pseudo_label(model, pool, ds.TEACHER_V1 if first else ds.TEACHER_V2,
                                   cfg.resolution.teacher, root, cfg.shards)
            ds.save_dataset(labeled, out)
            report = {"samples": len(labeled), "provenance": ds.TEACHER_V1 if first else ds.TEACHER_V2}
            answers = self.data_paths()["pool1" if first else "pool2"].with_suffix(".answers")
            if answers.exists():
                truth = ds.load_answers(answers)
                preds = labeled.labels()
                r = challenge_score(preds, [truth[i] for i in labeled.ids])
                report.update({"answer_srcc": r.srcc, "answer_plcc": r.plcc})
        self._finish(stage, report)
        return report

    def run_all(self) -> PipelineState:
        for stage in STAGES:
            self.run_stage(stage)
        return self.state


def run_all(cfg: TrainConfig, force: bool = False) -> PipelineState:
    return Pipeline(cfg, force).run_all()
