"""Per-subject calibration: ridge regression from fc1 features to gaze on fixed dots."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import N_FIXED_DOTS, DotRecord, FrameSample, SessionRecord, sessions_from_frames
from .errors import ContractError
from .evaluation import evaluate_predictions, predict_frames
from .geometry import DeviceSpec
from .model import as_batch
from .tensor import ModelParams
from .training import predict

VALID_K = (0, 4, 5, 9, 13)
DEFAULT_RIDGE_LAMBDA = 1.0


@dataclass
class CalibrationModel:
    """Affine map [features, 1] -> cm; ``weights is None`` means pass-through."""

    weights: np.ndarray | None
    subject_id: str = ""
    k_points: int = 0

    def __post_init__(self):
        if self.k_points not in VALID_K:
            raise ContractError(f"k_points must be one of {VALID_K}, got {self.k_points}")

    def apply(self, features: np.ndarray, raw_preds: np.ndarray) -> np.ndarray:
        if self.weights is None:
            return np.asarray(raw_preds, dtype=np.float64)
        f = np.asarray(features, dtype=np.float64)
        return np.hstack([f, np.ones((len(f), 1))]) @ self.weights.T


def fit_calibration(features, targets, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                    subject_id: str = "", k_points: int = 13) -> CalibrationModel:
    """Closed-form ridge fit; the bias column is not penalised.

    Solved as the least-squares problem [X; sqrt(lambda) I_w] W = [Y; 0] so
    that lambda = 0 with rank-deficient features still yields the
    minimum-norm solution.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.ndim != 2 or y.shape != (len(f), 2):
        raise ContractError(f"features {f.shape} and targets {y.shape} do not pair up")
    if len(f) < 1:
        raise ContractError("calibration needs at least one frame")
    if ridge_lambda < 0:
        raise ContractError("ridge_lambda must be non-negative")
    m, d = f.shape
    x = np.hstack([f, np.ones((m, 1))])
    if ridge_lambda > 0:
        reg = np.hstack([np.sqrt(ridge_lambda) * np.eye(d), np.zeros((d, 1))])
        x = np.vstack([x, reg])
        y = np.vstack([y, np.zeros((d, 2))])
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return CalibrationModel(w.T, subject_id, k_points)


def select_calibration_dots(session: SessionRecord, k: int) -> tuple[list[DotRecord], list[DotRecord]]:
    """(calibration dots, evaluation dots) for ``k`` in {4, 5, 9, 13}.

    Fixed locations are numbered in priority order (lattice corners, centre,
    lattice edges, screen-edge midpoints), so the k-subsets nest.  The
    evaluation set is every non-fixed dot.
    """
    if k not in VALID_K or k == 0:
        raise ContractError(f"k must be one of {VALID_K[1:]}, got {k}")
    if not session.has_complete_fixed_set:
        raise ContractError(f"session {session.session_id} lacks the full set of {N_FIXED_DOTS} fixed dots")
    by_index = {d.fixed_index: d for d in session.fixed_dots()}
    calib = [by_index[i] for i in range(k)]
    evaluation = [d for d in session.dots if not d.is_fixed]
    return calib, evaluation


@dataclass
class SessionCalibration:
    model: CalibrationModel
    eval_frames: list[FrameSample]
    preds: np.ndarray  # raw calibrated predictions for eval_frames


def calibrate_sessions(params: ModelParams, frames: Sequence[FrameSample], k: int,
                       ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                       eval_on: str = "auto") -> list[SessionCalibration]:
    """Fit one calibration per session and predict its evaluation frames.

    ``eval_on="auto"`` evaluates every frame when ``k == 0`` and the
    non-fixed dots otherwise; ``"non_fixed"`` always uses non-fixed dots.
    """
    if k not in VALID_K:
        raise ContractError(f"k must be one of {VALID_K}, got {k}")
    by_id = {f.frame_id: f for f in frames}
    out = []
    for session in sessions_from_frames(frames):
        if k == 0 and eval_on == "auto":
            eval_ids = [fid for d in session.dots for fid in d.frame_ids]
            calib_ids: list[str] = []
        else:
            if k == 0:
                if not session.has_complete_fixed_set:
                    raise ContractError(f"session {session.session_id} lacks the full fixed-dot set")
                calib_dots, eval_dots = [], [d for d in session.dots if not d.is_fixed]
            else:
                calib_dots, eval_dots = select_calibration_dots(session, k)
            calib_ids = [fid for d in calib_dots for fid in d.frame_ids]
            eval_ids = [fid for d in eval_dots for fid in d.frame_ids]
        if set(calib_ids) & set(eval_ids):
            raise AssertionError("calibration and evaluation frames overlap")
        eval_frames = [by_id[i] for i in eval_ids]
        out_eval = predict(params, as_batch(eval_frames))
        if k == 0:
            model = CalibrationModel(None, session.subject_id, 0)
        else:
            calib_frames = [by_id[i] for i in calib_ids]
            feats = predict(params, as_batch(calib_frames)).features.data
            targets = np.array([f.target.cam_cm for f in calib_frames])
            model = fit_calibration(feats, targets, ridge_lambda, session.subject_id, k)
        preds = model.apply(out_eval.features.data, out_eval.pred.data)
        out.append(SessionCalibration(model, eval_frames, preds))
    return out


@dataclass
class CalibrationRow:
    subject: str
    k: int
    error_cm: float
    dot_error_cm: float


def calibration_rows(results: Sequence[SessionCalibration], k: int,
                     devices: dict[str, DeviceSpec] | None = None) -> list[CalibrationRow]:
    by_subject: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for r in results:
        frames, preds = by_subject[r.model.subject_id]
        frames.extend(r.eval_frames)
        preds.append(r.preds)
    rows = []
    for subject in sorted(by_subject):
        frames, preds = by_subject[subject]
        rep = evaluate_predictions(frames, np.concatenate(preds), devices)
        rows.append(CalibrationRow(subject, k, rep.error_cm, rep.dot_error_cm))
    return rows


def calibration_csv(rows: Sequence[CalibrationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "k", "error_cm", "dot_error_cm"])
    for r in rows:
        w.writerow([r.subject, r.k, f"{r.error_cm:.6f}", f"{r.dot_error_cm:.6f}"])
    return buf.getvalue()


def all_predictions(results: Sequence[SessionCalibration]) -> tuple[list[FrameSample], np.ndarray]:
    frames = [f for r in results for f in r.eval_frames]
    return frames, np.concatenate([r.preds for r in results])
