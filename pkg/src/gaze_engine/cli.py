"""Command-line entry points.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (bad or missing flags)
  3  unknown device name
  4  missing input file or directory
  5  invalid or infeasible configuration
  6  malformed checkpoint or dataset file
  7  training diverged (non-finite loss)

Failures print a single line to stderr:
  error: code=<name> message=<text>

Config files are flat ``key=value`` lines (``#`` starts a comment).  Keys
are the TrainConfig fields, the distillation weights ``alpha``/``beta``/
``gamma``, ``arch`` (desk|full) and ``student_arch`` (desk|full).

GAZE_ENGINE_THREADS caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .calibration import DEFAULT_RIDGE_LAMBDA, VALID_K, all_predictions, calibrate_sessions, calibration_csv, calibration_rows
from .data import sessions_from_frames, split_subjects
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    NonFiniteLossError,
    UnknownDeviceError,
)
from .evaluation import error_heatmap, evaluate_predictions, heatmap_csv, predict_frames, study_csv, subjects_vs_samples_study
from .geometry import Orientation, get_device, load_device_table
from .io import atomic_write, dataset_sha256, file_sha256, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .model import INPUTS, StudentConfig, build, desk_config, desk_student_config, full_config, full_student_config
from .synth import synth_generate
from .training import DISTILL_KEYS, TRAIN_KEYS, DistillConfig, TrainConfig, desk_train_config, distill, fine_tune, train

log = logging.getLogger("gaze_engine")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_DEVICE = 3
EXIT_MISSING_FILE = 4
EXIT_CONFIG = 5
EXIT_FORMAT = 6
EXIT_DIVERGED = 7

ARCHES = {"desk": desk_config, "full": full_config}
STUDENT_ARCHES = {"desk": desk_student_config, "full": full_student_config}
EXTRA_KEYS = {"arch", "student_arch"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def parse_kv(text: str, allowed: set[str] | None = None) -> dict[str, str]:
    """Parse ``key=value`` lines; duplicate or unknown keys are configuration errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {raw.strip()!r}")
        if allowed is not None and key not in allowed:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(cls, values: dict[str, str]) -> Any:
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        try:
            if kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                kwargs[f.name] = raw.lower() in ("true", "1")
            elif kind == "int":
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        except ValueError:
            raise ConfigurationError(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return kwargs


def train_config_from(values: dict[str, str]) -> TrainConfig:
    """Desk-scale defaults overridden by any TrainConfig keys present."""
    return desk_train_config(**_coerce(TrainConfig, values))


def distill_config_from(values: dict[str, str]) -> DistillConfig:
    return DistillConfig(**_coerce(DistillConfig, values))


def _pick(table: dict, name: str, what: str):
    try:
        return table[name]
    except KeyError:
        raise ConfigurationError(f"unknown {what} {name!r}; choose from {sorted(table)}") from None


def read_config(path, allowed: set[str]) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), allowed)


def config_digest(values: dict) -> str:
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _need_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"directory not found: {p}")
    return p


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _devices(args):
    return load_device_table(_need_file(args.devices)) if args.devices else None


def _check_devices(frames, devices) -> None:
    for name in sorted({f.device for f in frames}):
        get_device(name, devices)


def _check_crop(frames, size: int, what: str) -> None:
    got = frames[0].crop_size if what == "face" else (
        None if frames[0].tight_left is None else frames[0].tight_left.shape[-1])
    if got != size:
        raise ConfigurationError(f"architecture expects {size}px {what} crops, dataset has {got}")


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _manifest(report: Path, command: str, config: dict, data_dir: Path, model: Path | None) -> None:
    body = {
        "command": command,
        "config": config,
        "config_sha256": config_digest(config),
        "dataset_sha256": dataset_sha256(data_dir),
        "model_sha256": file_sha256(model) if model is not None else None,
        "version": __version__,
    }
    _write_text(report / "manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write_eval_report(report: Path, frames, preds, devices) -> None:
    rep = evaluate_predictions(frames, preds, devices)
    report.mkdir(parents=True, exist_ok=True)
    _write_text(report / "eval.csv", rep.to_csv())
    _write_text(report / "heatmap.csv", heatmap_csv(error_heatmap(rep.dots)))
    log.info("frame error %.4f cm, dot error %.4f cm", rep.error_cm, rep.dot_error_cm)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> None:
    dev = get_device(args.device, _devices(args))
    o = Orientation.parse(args.orientation)
    _, frames = synth_generate(
        args.subjects, args.frames, args.dots, dev, o, args.seed,
        crop_size=args.crop_size, tight_size=args.tight_size or None,
        bias_norm_range=(args.bias_min, args.bias_max),
        subject_prefix=args.prefix, first_subject=args.first_subject,
    )
    save_dataset(frames, args.out)
    log.info("wrote %d frames to %s", len(frames), args.out)


def cmd_train(args) -> None:
    values = read_config(_need_file(args.config), TRAIN_KEYS | EXTRA_KEYS)
    if args.augment_train:
        values["augment_train"] = "true"
    cfg = train_config_from(values)
    arch = _pick(ARCHES, values.get("arch", "desk"), "arch")()
    if args.ablate:
        arch = arch.without(*args.ablate)
    frames = load_dataset(_need_dir(args.data))
    _check_crop(frames, arch.input_size, "face")
    params = build(arch, seed=cfg.seed)
    result = train(params, frames, cfg)
    save_checkpoint(params, args.out)
    _write_text(Path(f"{args.out}.trace.csv"), result.trace_csv())


def cmd_finetune(args) -> None:
    values = read_config(_need_file(args.config), TRAIN_KEYS | EXTRA_KEYS) if args.config else {}
    cfg = train_config_from(values)
    params = load_checkpoint(_need_file(getattr(args, "from")))
    get_device(args.device, _devices(args))
    o = Orientation.parse(args.orientation)
    frames = [f for f in load_dataset(_need_dir(args.data)) if f.device == args.device and f.orientation is o]
    if not frames:
        raise ConfigurationError(f"dataset has no frames for {args.device}/{o.value}")
    result = fine_tune(params, frames, cfg)
    save_checkpoint(result.params, args.out)
    _write_text(Path(f"{args.out}.trace.csv"), result.trace_csv())


def cmd_eval(args) -> None:
    devices = _devices(args)
    params = load_checkpoint(_need_file(args.model))
    frames = load_dataset(_need_dir(args.data))
    _check_devices(frames, devices)
    preds = predict_frames(params, frames, test_augment=args.test_augment)
    report = Path(args.report)
    _write_eval_report(report, frames, preds, devices)
    _manifest(report, "eval", {"test_augment": args.test_augment}, Path(args.data), Path(args.model))


def cmd_calibrate(args) -> None:
    devices = _devices(args)
    params = load_checkpoint(_need_file(args.model))
    if isinstance(params.config, StudentConfig):
        raise ConfigurationError("calibration needs a teacher checkpoint")
    frames = load_dataset(_need_dir(args.data))
    _check_devices(frames, devices)
    report = Path(args.report)
    if args.k == 0:
        # no-op calibration: identical to a plain evaluation of every frame
        eval_frames, preds = frames, predict_frames(params, frames)
        rows = calibration_rows(calibrate_sessions(params, frames, 0), 0, devices)
    else:
        results = calibrate_sessions(params, frames, args.k, args.ridge_lambda)
        eval_frames, preds = all_predictions(results)
        rows = calibration_rows(results, args.k, devices)
    _write_eval_report(report, eval_frames, preds, devices)
    _write_text(report / "calibration.csv", calibration_csv(rows))
    _manifest(report, "calibrate", {"k": args.k, "ridge_lambda": args.ridge_lambda}, Path(args.data), Path(args.model))


def cmd_distill(args) -> None:
    values = read_config(_need_file(args.config), TRAIN_KEYS | DISTILL_KEYS | EXTRA_KEYS)
    cfg = train_config_from(values)
    dcfg = distill_config_from(values)
    teacher = load_checkpoint(_need_file(args.teacher))
    if isinstance(teacher.config, StudentConfig):
        raise ConfigurationError("the teacher checkpoint holds a student network")
    student_cfg = _pick(STUDENT_ARCHES, values.get("student_arch", "desk"), "student_arch")()
    frames = load_dataset(_need_dir(args.data))
    _check_crop(frames, teacher.config.input_size, "face")
    _check_crop(frames, student_cfg.input_size, "tight eye")
    student = build(student_cfg, seed=cfg.seed)
    result = distill(student, teacher, frames, dcfg, cfg)
    extra = {"projection": result.projection["projection"].data} if dcfg.gamma else None
    save_checkpoint(student, args.out, extra=extra)
    _write_text(Path(f"{args.out}.trace.csv"), result.trace_csv())


STUDY_KEYS = TRAIN_KEYS | {"arch", "test_subjects", "split_seed"}


def parse_budgets(text: str) -> tuple[list[tuple[int, int]], dict[str, str]]:
    """Budget lines ``n_subjects,samples_per`` mixed with optional ``key=value`` settings."""
    budgets, settings = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            settings.append(line)
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            n_sub, per = (int(p) for p in parts)
        except ValueError:
            raise ConfigurationError(f"budget line {lineno}: expected n_subjects,samples_per") from None
        budgets.append((n_sub, per))
    if not budgets:
        raise ConfigurationError("budget file lists no budgets")
    return budgets, parse_kv("\n".join(settings), STUDY_KEYS)


def cmd_study(args) -> None:
    budgets, values = parse_budgets(_need_file(args.budgets).read_text(encoding="utf-8"))
    devices = _devices(args)
    cfg = train_config_from({k: v for k, v in values.items() if k in TRAIN_KEYS})
    arch = _pick(ARCHES, values.get("arch", "desk"), "arch")()
    frames = load_dataset(_need_dir(args.data))
    _check_devices(frames, devices)
    _check_crop(frames, arch.input_size, "face")
    sessions = sessions_from_frames(frames)
    n_test = int(values.get("test_subjects", 2))
    n_subjects = len({s.subject_id for s in sessions})
    split_seed = int(values.get("split_seed", cfg.seed))
    train_ids, _, test_ids = split_subjects(sessions, n_subjects - n_test, 0, n_test, split_seed)
    train_f = [f for f in frames if f.subject_id in train_ids]
    test_f = [f for f in frames if f.subject_id in test_ids]
    rows = subjects_vs_samples_study(train_f, test_f, budgets, cfg.seed, arch, cfg, devices)
    report = Path(args.report)
    report.mkdir(parents=True, exist_ok=True)
    _write_text(report / "study.csv", study_csv(rows))
    resolved = {"budgets": budgets, "arch": values.get("arch", "desk"), "test_subjects": n_test,
                "split_seed": split_seed, "train": dataclasses.asdict(cfg)}
    _manifest(report, "study", resolved, Path(args.data), None)


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gaze-engine",
        description="Gaze regression engine: synthetic data, training, evaluation, calibration, distillation.",
        epilog=__doc__.split("\n", 2)[2],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = _Parser(add_help=False)
    common.add_argument("--devices", help="device table file (default: shipped synthetic devices)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--dots", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--orientation", required=True, choices=[o.value for o in Orientation])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--tight-size", type=int, default=24, help="student eye crop size; 0 disables")
    p.add_argument("--bias-min", type=float, default=0.0)
    p.add_argument("--bias-max", type=float, default=0.6)
    p.add_argument("--prefix", default="subj", help="subject id prefix")
    p.add_argument("--first-subject", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", parents=[common], help="train a model from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--augment-train", action="store_true")
    p.add_argument("--ablate", action="append", choices=INPUTS, help="drop an input stream (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune for one device and orientation")
    p.add_argument("--data", required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--orientation", required=True, choices=[o.value for o in Orientation])
    p.add_argument("--from", required=True, metavar="CKPT")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config (default: desk settings)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="calibration-free evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-augment", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", parents=[common], help="per-subject calibration on fixed dots")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, required=True, choices=VALID_K)
    p.add_argument("--ridge-lambda", type=float, default=DEFAULT_RIDGE_LAMBDA)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("distill", parents=[common], help="train a student against a teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("study", parents=[common], help="subjects-vs-samples experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--budgets", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_study)
    return parser


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, UsageError):
        return EXIT_USAGE, "usage"
    if isinstance(exc, UnknownDeviceError):
        return EXIT_UNKNOWN_DEVICE, "unknown_device"
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_FILE, "missing_file"
    if isinstance(exc, (ConfigurationError, ContractError, DimensionError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, FormatError):
        return EXIT_FORMAT, "format"
    if isinstance(exc, NonFiniteLossError):
        return EXIT_DIVERGED, "diverged"
    return EXIT_INTERNAL, "internal"


def _threads() -> int:
    raw = os.environ.get("GAZE_ENGINE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"GAZE_ENGINE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("GAZE_ENGINE_THREADS must be >= 1")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=_threads()):
            args.func(args)
        return EXIT_OK
    except Exception as exc:
        code, name = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: code={name} message={message}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.debug("internal error", exc_info=True)
        return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
