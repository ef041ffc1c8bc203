"""Frame samples, sessions, face grids, 25-fold shift augmentation and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .geometry import GazePoint, Orientation

GRID_SIZE = 25
N_FIXED_DOTS = 13
LATTICE = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class FaceGrid:
    mask: np.ndarray  # [1, 25, 25] of {0, 1}

    def bounds(self) -> tuple[int, int, int, int]:
        """(col_lo, col_hi, row_lo, row_hi) of the set rectangle, half-open."""
        rows = np.flatnonzero(self.mask[0].any(axis=1))
        cols = np.flatnonzero(self.mask[0].any(axis=0))
        return int(cols[0]), int(cols[-1]) + 1, int(rows[0]), int(rows[-1]) + 1


def _grid_ranges(bbox: np.ndarray, frame: np.ndarray) -> tuple[np.ndarray, ...]:
    x, y, w, h = (bbox[..., i] for i in range(4))
    fw, fh = frame[..., 0], frame[..., 1]
    col_lo = np.clip(np.floor(x * GRID_SIZE / fw), 0, GRID_SIZE)
    col_hi = np.clip(np.ceil((x + w) * GRID_SIZE / fw), 0, GRID_SIZE)
    row_lo = np.clip(np.floor(y * GRID_SIZE / fh), 0, GRID_SIZE)
    row_hi = np.clip(np.ceil((y + h) * GRID_SIZE / fh), 0, GRID_SIZE)
    return col_lo, col_hi, row_lo, row_hi


def face_grids(bboxes: np.ndarray, frame_sizes: np.ndarray) -> np.ndarray:
    """Vectorised :func:`make_face_grid` over [N,4] boxes; returns [N,1,25,25] float32."""
    bboxes = np.asarray(bboxes, dtype=np.float64).reshape(-1, 4)
    frame_sizes = np.asarray(frame_sizes, dtype=np.float64).reshape(-1, 2)
    if np.any(bboxes[:, 2] <= 0) or np.any(bboxes[:, 3] <= 0):
        raise ContractError("face bounding box must have positive width and height")
    c0, c1, r0, r1 = _grid_ranges(bboxes, frame_sizes)
    idx = np.arange(GRID_SIZE)
    cols = (idx >= c0[:, None]) & (idx < c1[:, None])
    rows = (idx >= r0[:, None]) & (idx < r1[:, None])
    return (rows[:, :, None] & cols[:, None, :]).astype(np.float32)[:, None]


def make_face_grid(face_bbox, frame_size) -> FaceGrid:
    """Binary 25x25 mask marking the cells covered by ``face_bbox`` (x, y, w, h)."""
    return FaceGrid(face_grids(face_bbox, frame_size)[0])


@dataclass
class FrameSample:
    subject_id: str
    session_id: str
    dot_id: int
    frame_index: int
    device: str
    orientation: Orientation
    face: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    tight_left: np.ndarray | None
    tight_right: np.ndarray | None
    face_bbox: tuple[float, float, float, float]
    frame_size: tuple[int, int]
    target: GazePoint
    is_fixed: bool = False
    fixed_index: int | None = None
    shift: tuple[int, int] = (0, 0)
    extras: dict = field(default_factory=dict)

    @property
    def frame_id(self) -> str:
        return f"{self.session_id}/{self.dot_id}/{self.frame_index}"

    @property
    def crop_size(self) -> int:
        return self.face.shape[-1]

    @property
    def face_grid(self) -> FaceGrid:
        return make_face_grid(self.face_bbox, self.frame_size)


@dataclass
class DotRecord:
    dot_id: int
    target: GazePoint
    is_fixed: bool
    fixed_index: int | None
    frame_ids: list[str]


@dataclass
class SessionRecord:
    subject_id: str
    session_id: str
    device: str
    orientation: Orientation
    dots: list[DotRecord]

    def fixed_dots(self) -> list[DotRecord]:
        return [d for d in self.dots if d.is_fixed]

    @property
    def has_complete_fixed_set(self) -> bool:
        return {d.fixed_index for d in self.fixed_dots()} >= set(range(N_FIXED_DOTS))


def sessions_from_frames(frames: Iterable[FrameSample]) -> list[SessionRecord]:
    """Rebuild session records by grouping frames on (session, dot)."""
    sessions: dict[str, SessionRecord] = {}
    dots: dict[tuple[str, int], DotRecord] = {}
    for f in frames:
        sess = sessions.get(f.session_id)
        if sess is None:
            sess = sessions[f.session_id] = SessionRecord(
                f.subject_id, f.session_id, f.device, f.orientation, []
            )
        key = (f.session_id, f.dot_id)
        dot = dots.get(key)
        if dot is None:
            dot = dots[key] = DotRecord(f.dot_id, f.target, f.is_fixed, f.fixed_index, [])
            sess.dots.append(dot)
        dot.frame_ids.append(f.frame_id)
    for sess in sessions.values():
        sess.dots.sort(key=lambda d: d.dot_id)
    return list(sessions.values())


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def default_max_shift(crop_size: int) -> int:
    return max(1, int(round(0.05 * crop_size)))


def lattice_offset(index: int, max_shift: float) -> int:
    """Pixel offset for lattice index in -2..2 (half-away-from-zero rounding)."""
    v = index * max_shift / 2.0
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def shift_crop(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move the crop window by (dx, dy) pixels; content outside is edge-replicated."""
    if dx == 0 and dy == 0:
        return img
    m = max(abs(dx), abs(dy))
    padded = np.pad(img, ((0, 0), (m, m), (m, m)), mode="edge")
    h, w = img.shape[-2:]
    return np.ascontiguousarray(padded[:, m + dy : m + dy + h, m + dx : m + dx + w])


def shift_bbox(bbox, crop_size: int, dx: int, dy: int) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in bbox)
    return (x + dx * w / crop_size, y + dy * h / crop_size, w, h)


def shift_sample(s: FrameSample, ix: int, iy: int, max_shift: float | None = None) -> FrameSample:
    """Apply the lattice shift (ix, iy) to face and both eye windows jointly."""
    if ix == 0 and iy == 0:
        return s
    size = s.crop_size
    m = default_max_shift(size) if max_shift is None else max_shift
    dx, dy = lattice_offset(ix, m), lattice_offset(iy, m)
    tight_l = tight_r = None
    if s.tight_left is not None:
        mt = m * s.tight_left.shape[-1] / size
        tdx, tdy = lattice_offset(ix, mt), lattice_offset(iy, mt)
        tight_l = shift_crop(s.tight_left, tdx, tdy)
        tight_r = shift_crop(s.tight_right, tdx, tdy)
    return replace(
        s,
        face=shift_crop(s.face, dx, dy),
        left_eye=shift_crop(s.left_eye, dx, dy),
        right_eye=shift_crop(s.right_eye, dx, dy),
        tight_left=tight_l,
        tight_right=tight_r,
        face_bbox=shift_bbox(s.face_bbox, size, dx, dy),
        shift=(ix, iy),
    )


def augment_25(s: FrameSample, max_shift: float | None = None) -> list[FrameSample]:
    """The 5x5 lattice of joint crop shifts; element 12 is ``s`` itself."""
    return [shift_sample(s, ix, iy, max_shift) for iy in LATTICE for ix in LATTICE]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Stacked arrays for a set of frames."""

    face: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    tight_left: np.ndarray | None
    tight_right: np.ndarray | None
    face_bbox: np.ndarray
    frame_size: np.ndarray
    target_cm: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[FrameSample]) -> "Batch":
        if not samples:
            raise ContractError("cannot batch an empty sample list")
        has_tight = all(s.tight_left is not None for s in samples)
        return cls(
            face=np.stack([s.face for s in samples]).astype(np.float32, copy=False),
            left_eye=np.stack([s.left_eye for s in samples]).astype(np.float32, copy=False),
            right_eye=np.stack([s.right_eye for s in samples]).astype(np.float32, copy=False),
            tight_left=np.stack([s.tight_left for s in samples]).astype(np.float32, copy=False) if has_tight else None,
            tight_right=np.stack([s.tight_right for s in samples]).astype(np.float32, copy=False) if has_tight else None,
            face_bbox=np.array([s.face_bbox for s in samples], dtype=np.float64),
            frame_size=np.array([s.frame_size for s in samples], dtype=np.float64),
            target_cm=np.array([s.target.cam_cm for s in samples], dtype=np.float32),
        )

    def __len__(self) -> int:
        return self.face.shape[0]

    @property
    def face_grid(self) -> np.ndarray:
        return face_grids(self.face_bbox, self.frame_size)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Batch(
            pick(self.face), pick(self.left_eye), pick(self.right_eye),
            pick(self.tight_left), pick(self.tight_right),
            self.face_bbox[idx], self.frame_size[idx], self.target_cm[idx],
        )

    def shifted(self, ix: np.ndarray, iy: np.ndarray, max_shift: float | None = None) -> "Batch":
        """Per-row lattice shifts; rows with (0, 0) are copied unchanged."""
        size = self.face.shape[-1]
        m = default_max_shift(size) if max_shift is None else max_shift
        out = Batch(
            self.face.copy(), self.left_eye.copy(), self.right_eye.copy(),
            None if self.tight_left is None else self.tight_left.copy(),
            None if self.tight_right is None else self.tight_right.copy(),
            self.face_bbox.copy(), self.frame_size, self.target_cm,
        )
        for r, (i, j) in enumerate(zip(np.asarray(ix).tolist(), np.asarray(iy).tolist())):
            if i == 0 and j == 0:
                continue
            dx, dy = lattice_offset(i, m), lattice_offset(j, m)
            out.face[r] = shift_crop(self.face[r], dx, dy)
            out.left_eye[r] = shift_crop(self.left_eye[r], dx, dy)
            out.right_eye[r] = shift_crop(self.right_eye[r], dx, dy)
            out.face_bbox[r] = shift_bbox(self.face_bbox[r], size, dx, dy)
            if self.tight_left is not None:
                mt = m * self.tight_left.shape[-1] / size
                tdx, tdy = lattice_offset(i, mt), lattice_offset(j, mt)
                out.tight_left[r] = shift_crop(self.tight_left[r], tdx, tdy)
                out.tight_right[r] = shift_crop(self.tight_right[r], tdx, tdy)
        return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def eligible_subjects(sessions: Iterable[SessionRecord]) -> set[str]:
    """Subjects whose every session contains the full fixed-dot set."""
    ok: dict[str, bool] = {}
    for s in sessions:
        ok[s.subject_id] = ok.get(s.subject_id, True) and s.has_complete_fixed_set
    return {k for k, v in ok.items() if v}


def split_subjects(
    sessions: Sequence[SessionRecord], n_train: int, n_val: int, n_test: int, seed: int
) -> tuple[set[str], set[str], set[str]]:
    """Subject-exclusive train/val/test split; val and test draw only eligible subjects."""
    subjects = sorted({s.subject_id for s in sessions})
    if min(n_train, n_val, n_test) < 0:
        raise ConfigurationError("split counts must be non-negative")
    if n_train + n_val + n_test > len(subjects):
        raise ConfigurationError(
            f"requested {n_train}+{n_val}+{n_test} subjects but only {len(subjects)} exist"
        )
    eligible = eligible_subjects(sessions)
    order = [subjects[i] for i in np.random.default_rng(seed).permutation(len(subjects))]
    pool = [s for s in order if s in eligible]
    if n_val + n_test > len(pool):
        raise ConfigurationError(
            f"only {len(pool)} subjects have complete fixed-dot sets; need {n_val + n_test}"
        )
    test = pool[:n_test]
    val = pool[n_test : n_test + n_val]
    taken = set(test) | set(val)
    train = [s for s in order if s not in taken][:n_train]
    return set(train), set(val), set(test)
