"""Frame error, dot error, test-time augmentation, baselines and the data-size study."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import LATTICE, Batch, FrameSample
from .errors import ConfigurationError, ContractError
from .geometry import DEVICES, DeviceSpec, Orientation, get_device, screen_center_cm, truncate_to_screen
from .model import as_batch, build, forward
from .tensor import ModelParams, no_grad
from .training import TrainConfig, train

CONVEXITY_SLACK = 1e-6


def _pairs(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    return a


def frame_error(preds, truths, dev: DeviceSpec | None = None, o: Orientation | None = None) -> float:
    """Mean Euclidean distance (cm); predictions are truncated to the screen when ``dev`` is given."""
    preds, truths = _pairs(preds), _pairs(truths)
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError(f"need equal, non-zero counts of predictions and truths ({len(preds)}, {len(truths)})")
    if dev is not None:
        preds = truncate_to_screen(preds, dev, o)
    return float(np.linalg.norm(preds - truths, axis=1).mean())


def dot_error(groups: Sequence[tuple], dev: DeviceSpec | None = None, o: Orientation | None = None) -> float:
    """Error of per-dot mean predictions.

    ``groups`` holds (truth_cm, preds[n, 2]) per dot.  Each frame prediction
    is truncated, the truncated predictions are averaged per dot, and the
    per-dot distances are averaged with weight proportional to frame count,
    which keeps the result no larger than :func:`frame_error` on the same
    frames.
    """
    if not groups:
        raise ContractError("dot_error needs at least one dot")
    total, count = 0.0, 0
    for truth, preds in groups:
        preds = _pairs(preds)
        if len(preds) == 0:
            raise ContractError("every dot needs at least one frame")
        if dev is not None:
            preds = truncate_to_screen(preds, dev, o)
        mean = preds.mean(axis=0)
        if dev is not None:
            mean = truncate_to_screen(mean, dev, o)
        total += len(preds) * float(np.linalg.norm(mean - np.asarray(truth, dtype=np.float64)))
        count += len(preds)
    return total / count


def center_baseline(dev: DeviceSpec, o: Orientation, truths) -> float:
    truths = _pairs(truths)
    return frame_error(np.repeat(screen_center_cm(dev, o)[None], len(truths), axis=0), truths)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict_batch(params: ModelParams, batch: Batch, test_augment: bool = False,
                  max_shift: float | None = None) -> np.ndarray:
    """Raw (untruncated) predictions; with ``test_augment`` the mean over the 25 shifts."""
    with no_grad():
        if not test_augment:
            return forward(params, batch).pred.data.astype(np.float64)
        total = np.zeros((len(batch), 2), dtype=np.float64)
        n = len(batch)
        for iy in LATTICE:
            for ix in LATTICE:
                shifted = batch.shifted(np.full(n, ix), np.full(n, iy), max_shift)
                total += forward(params, shifted).pred.data
        return total / 25.0


def predict_frames(params: ModelParams, frames, test_augment: bool = False,
                   batch_size: int = 256) -> np.ndarray:
    batch = as_batch(frames)
    out = [
        predict_batch(params, batch.take(np.arange(s, min(s + batch_size, len(batch)))), test_augment)
        for s in range(0, len(batch), batch_size)
    ]
    return np.concatenate(out)


def predict_with_test_augmentation(params: ModelParams, sample: FrameSample,
                                   max_shift: float | None = None) -> np.ndarray:
    return predict_batch(params, Batch.from_samples([sample]), True, max_shift)[0]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class DotResult:
    subject_id: str
    session_id: str
    dot_id: int
    device: str
    orientation: str
    truth_cm: tuple[float, float]
    mean_pred_cm: tuple[float, float]
    n_frames: int

    @property
    def error_cm(self) -> float:
        return math.dist(self.truth_cm, self.mean_pred_cm)


@dataclass
class DeviceReport:
    device: str
    orientation: str
    n_frames: int
    n_dots: int
    error_cm: float
    dot_error_cm: float
    baseline_center_error_cm: float


@dataclass
class EvalReport:
    devices: list[DeviceReport]
    dots: list[DotResult] = field(default_factory=list)

    def __post_init__(self):
        for d in self.devices:
            if d.dot_error_cm > d.error_cm + CONVEXITY_SLACK:
                raise AssertionError(
                    f"dot error {d.dot_error_cm} exceeds frame error {d.error_cm} for {d.device}/{d.orientation}"
                )

    @property
    def error_cm(self) -> float:
        n = sum(d.n_frames for d in self.devices)
        return sum(d.error_cm * d.n_frames for d in self.devices) / n

    @property
    def dot_error_cm(self) -> float:
        n = sum(d.n_frames for d in self.devices)
        return sum(d.dot_error_cm * d.n_frames for d in self.devices) / n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["device", "orientation", "n_frames", "n_dots", "error_cm", "dot_error_cm",
                    "baseline_center_error_cm"])
        for d in self.devices:
            w.writerow([d.device, d.orientation, d.n_frames, d.n_dots, f"{d.error_cm:.6f}",
                        f"{d.dot_error_cm:.6f}", f"{d.baseline_center_error_cm:.6f}"])
        return buf.getvalue()


def evaluate_predictions(frames: Sequence[FrameSample], preds,
                         devices: dict[str, DeviceSpec] | None = None) -> EvalReport:
    """Group raw predictions by (device, orientation) and dot; compute both error kinds."""
    preds = _pairs(preds)
    if len(frames) != len(preds):
        raise ContractError("one prediction per frame is required")
    by_screen: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, f in enumerate(frames):
        by_screen[(f.device, f.orientation.value)].append(i)

    reports, dots = [], []
    for (dname, oname), idx in sorted(by_screen.items()):
        dev, o = get_device(dname, devices), Orientation.parse(oname)
        truths = np.array([frames[i].target.cam_cm for i in idx])
        p = truncate_to_screen(preds[idx], dev, o)
        by_dot: dict[tuple[str, int], list[int]] = defaultdict(list)
        for j, i in enumerate(idx):
            by_dot[(frames[i].session_id, frames[i].dot_id)].append(j)
        groups = []
        for (session, dot_id), js in by_dot.items():
            first = frames[idx[js[0]]]
            groups.append((first.target.cam_cm, p[js]))
            dots.append(DotResult(first.subject_id, session, dot_id, dname, oname,
                                  tuple(first.target.cam_cm), tuple(p[js].mean(axis=0)), len(js)))
        reports.append(DeviceReport(
            dname, oname, len(idx), len(by_dot),
            frame_error(p, truths, dev, o), dot_error(groups, dev, o), center_baseline(dev, o, truths),
        ))
    return EvalReport(reports, dots)


def evaluate(params: ModelParams, frames: Sequence[FrameSample], test_augment: bool = False,
             devices: dict[str, DeviceSpec] | None = None) -> EvalReport:
    return evaluate_predictions(frames, predict_frames(params, frames, test_augment), devices)


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


@dataclass
class HeatCell:
    x_lo: float
    y_lo: float
    mean_error_cm: float | None
    n_dots: int


def error_heatmap(dots: Iterable[DotResult], cell_cm: float = 0.5) -> list[HeatCell]:
    """Mean dot error binned by true location over the bounding grid; empty cells carry None."""
    bins: dict[tuple[int, int], list[float]] = defaultdict(list)
    for d in dots:
        key = (math.floor(d.truth_cm[0] / cell_cm), math.floor(d.truth_cm[1] / cell_cm))
        bins[key].append(d.error_cm)
    if not bins:
        return []
    xs = [k[0] for k in bins]
    ys = [k[1] for k in bins]
    cells = []
    for j in range(max(ys), min(ys) - 1, -1):
        for i in range(min(xs), max(xs) + 1):
            vals = bins.get((i, j))
            cells.append(HeatCell(i * cell_cm, j * cell_cm,
                                  float(np.mean(vals)) if vals else None, len(vals) if vals else 0))
    return cells


def heatmap_csv(cells: Sequence[HeatCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x_lo_cm", "y_lo_cm", "mean_error_cm", "n_dots"])
    for c in cells:
        w.writerow([f"{c.x_lo:.3f}", f"{c.y_lo:.3f}",
                    "" if c.mean_error_cm is None else f"{c.mean_error_cm:.6f}", c.n_dots])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subjects vs samples
# ---------------------------------------------------------------------------


@dataclass
class StudyRow:
    n_subjects: int
    samples_per: int
    error: float


def sample_budget(frames: Sequence[FrameSample], n_subjects: int, samples_per: int,
                  rng: np.random.Generator) -> list[FrameSample]:
    """Pick ``n_subjects`` subjects and ``samples_per`` of each one's frames."""
    by_subject: dict[str, list[FrameSample]] = defaultdict(list)
    for f in frames:
        by_subject[f.subject_id].append(f)
    subjects = sorted(by_subject)
    if n_subjects > len(subjects):
        raise ConfigurationError(f"budget needs {n_subjects} subjects, corpus has {len(subjects)}")
    chosen = [subjects[i] for i in rng.permutation(len(subjects))[:n_subjects]]
    out = []
    for s in chosen:
        pool = by_subject[s]
        if samples_per > len(pool):
            raise ConfigurationError(f"budget needs {samples_per} frames of {s}, it has {len(pool)}")
        out.extend(pool[i] for i in sorted(rng.permutation(len(pool))[:samples_per]))
    return out


def subjects_vs_samples_study(
    train_frames: Sequence[FrameSample],
    test_frames: Sequence[FrameSample],
    budgets: Sequence[tuple[int, int]],
    seed: int,
    arch,
    cfg: TrainConfig,
    devices: dict[str, DeviceSpec] | None = None,
) -> list[StudyRow]:
    """Train one model per (n_subjects, samples_per) budget and report held-out frame error."""
    if not budgets:
        raise ConfigurationError("no budgets given")
    for n_sub, per in budgets:
        if n_sub < 1 or per < 1:
            raise ConfigurationError(f"infeasible budget ({n_sub}, {per})")
    rows = []
    for k, (n_sub, per) in enumerate(budgets):
        rng = np.random.default_rng([seed, k])
        subset = sample_budget(train_frames, n_sub, per, rng)
        params = build(arch, seed=seed)
        train(params, subset, cfg)
        rows.append(StudyRow(n_sub, per, evaluate(params, test_frames, devices=devices).error_cm))
    return rows


def study_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_subjects", "samples_per", "error"])
    for r in rows:
        w.writerow([r.n_subjects, r.samples_per, f"{r.error:.6f}"])
    return buf.getvalue()
