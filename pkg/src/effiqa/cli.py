"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.
Each command prints a short human-readable summary and writes a flat
``key = value`` report to ``<work_dir>/reports/<command>.txt`` (or
``--report PATH``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import dataset as ds
from . import regressor as reg
from .config import TrainConfig, load_config
from .errors import DataError, EffiqaError, TrainingFailure
from .pipeline import STAGES, Pipeline, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

CHECKPOINT_ALIASES = {"teacher": "train_teacher", "teacher-plus": "enhance_teacher", "student": "distill_student"}
STAGE_COMMANDS = {
    "train-teacher": "train_teacher",
    "enhance-teacher": "enhance_teacher",
    "distill-student": "distill_student",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="effiqa", description="Teacher self-training and student distillation for quality regression.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help_: str, config_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=config_required,
                       help="YAML config file, or 'default' for the built-in recipe")
        p.add_argument("--force", action="store_true", help="discard pipeline state made under a different config")
        p.add_argument("--report", help="where to write the machine-readable report")
        return p

    add("gen-data", "write the seeded synthetic benchmark into the work directory")
    add("train-teacher", "stage 1: train the teacher on human labels")
    p = add("pseudo-label", "stage 2/4: pseudo-label an unlabeled pool")
    p.add_argument("--round", type=int, choices=(1, 2), default=1, help="1: teacher on pool 1, 2: teacher+ on pool 2")
    add("enhance-teacher", "stage 3: train teacher+ on human + round-1 pseudo labels")
    add("distill-student", "stage 5: distill the student from all three sources")
    p = add("evaluate", "SRCC/PLCC and efficiency of a checkpoint on a labeled dataset", config_required=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint path, or teacher / teacher-plus / student")
    p.add_argument("--data", required=True, help="dataset path, or 'val' for the held-out human split")
    add("run-all", "run (or resume) all five stages")
    return parser


def _write_report(path: Path, fields: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _report_path(args, cfg: TrainConfig) -> Path:
    if args.report:
        return Path(args.report)
    return Path(cfg.work_dir) / "reports" / f"{args.command}.txt"


def _evaluate(args, cfg: TrainConfig) -> dict[str, Any]:
    pipe = Pipeline(cfg, force=args.force)
    ckpt = args.checkpoint
    if ckpt in CHECKPOINT_ALIASES and not Path(ckpt).exists():
        stage = CHECKPOINT_ALIASES[ckpt]
        if stage not in pipe.state.completed:
            raise DataError(f"no {ckpt} checkpoint yet; run the {stage.replace('_', '-')} stage first")
        ckpt = pipe.artifact_path(stage)
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model = reg.load_checkpoint(ckpt)
    if args.data == "val" and not Path(args.data).exists():
        data, root = pipe.labeled().val, pipe.image_root
    else:
        if not Path(args.data).exists():
            raise DataError(f"dataset not found: {args.data}")
        data, root = ds.load_dataset(args.data), str(Path(args.data).parent)
    rep = evaluate(model, data, cfg.resolution.inference, root)
    return {"checkpoint": str(ckpt), "data": args.data, "samples": len(data), **rep.as_dict()}


def dispatch(args) -> dict[str, Any]:
    cfg = load_config(args.config) if args.config else TrainConfig()
    out: dict[str, Any] = {"command": args.command, "config_digest": cfg.digest()}
    if args.command == "evaluate":
        out.update(_evaluate(args, cfg))
    else:
        pipe = Pipeline(cfg, force=args.force)
        if args.command == "gen-data":
            if not cfg.data.synthetic:
                raise DataError("config names explicit data paths; nothing to generate")
            paths = pipe.ensure_data()
            out.update({k: str(v) for k, v in paths.items()})
        elif args.command == "run-all":
            state = pipe.run_all()
            out["completed"] = ",".join(state.completed)
            out["ran"] = ",".join(state.ran) or "none"
            for stage in STAGES:
                for k, v in state.reports.get(stage, {}).items():
                    if k in ("srcc", "plcc", "score", "params", "flops", "samples", "answer_srcc"):
                        out[f"{stage}.{k}"] = v
        else:
            stage = STAGE_COMMANDS.get(args.command) or f"pseudo_label_{args.round}"
            report = pipe.run_stage(stage)
            out["stage"] = stage
            out["ran"] = "yes" if stage in pipe.state.ran else "no (already complete)"
            out["artifact"] = str(pipe.artifact_path(stage))
            out.update(report)
    _write_report(_report_path(args, cfg), out)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = dispatch(args)
    except DataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailure, EffiqaError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"error: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    width = max(len(k) for k in out)
    for k, v in out.items():
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
