"""Synthetic stand-in for recorded gaze sessions.

Every subject gets a systematic gaze bias, an iris gain and an appearance.
Eye crops show an iris disc displaced from the eye centre by
``pupil_gain * (target_cm + bias_cm)`` (plus per-frame jitter), so the
image-to-target map is affine up to noise.  Face crops carry a head
position cue that tracks the drifting face box.

Frame RNG streams are keyed on (seed, subject, dot, frame) so generation
order does not affect the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import N_FIXED_DOTS, DotRecord, FrameSample, SessionRecord
from .errors import ConfigurationError
from .geometry import DeviceSpec, GazePoint, Orientation, screen_to_cam

FRAME_SIZE = (640, 480)
NOISE_SIGMA = 0.02
WIDE_EXTENT = 0.5    # eye crop spans [-0.5, 0.5] eye units
TIGHT_EXTENT = 0.42  # tight crop spans [-0.42, 0.42]

# Fixed calibration locations as fractions of the oriented screen, in
# calibration-priority order: lattice corners, centre, lattice edges,
# screen-edge midpoints.
FIXED_FRACTIONS = (
    (0.15, 0.15), (0.85, 0.15), (0.15, 0.85), (0.85, 0.85),
    (0.5, 0.5),
    (0.5, 0.15), (0.15, 0.5), (0.85, 0.5), (0.5, 0.85),
    (0.5, 0.03), (0.03, 0.5), (0.97, 0.5), (0.5, 0.97),
)

_PROFILE_STREAM = 0x5EED
_DOT_STREAM = 0xD07


@dataclass(frozen=True)
class SubjectProfile:
    bias_cm: tuple[float, float]
    appearance_seed: int
    pupil_gain: float  # iris displacement in crop pixels per cm of gaze

    def __post_init__(self):
        if self.pupil_gain <= 0:
            raise ConfigurationError("pupil_gain must be positive")


@dataclass(frozen=True)
class Appearance:
    skin: np.ndarray
    iris: np.ndarray
    sclera: np.ndarray
    background: np.ndarray
    hair: np.ndarray
    iris_radius: float   # eye units
    sclera_radii: tuple[float, float]
    face_center: tuple[float, float]  # base face-box centre in the frame, pixels
    face_size: float                  # base face-box side, pixels
    drift_phase: np.ndarray

    @classmethod
    def from_seed(cls, seed: int) -> "Appearance":
        rng = np.random.default_rng([seed, 0xA11])
        skin = rng.uniform([0.35, 0.25, 0.2], [0.95, 0.8, 0.7])
        return cls(
            skin=skin,
            iris=rng.uniform([0.0, 0.0, 0.0], [0.45, 0.4, 0.4]),
            sclera=rng.uniform(0.8, 1.0, size=3),
            background=rng.uniform(0.0, 1.0, size=3),
            hair=rng.uniform(0.0, 0.5, size=3),
            iris_radius=float(rng.uniform(0.085, 0.115)),
            sclera_radii=(float(rng.uniform(0.36, 0.44)), float(rng.uniform(0.24, 0.32))),
            face_center=(float(rng.uniform(230, 410)), float(rng.uniform(180, 300))),
            face_size=float(rng.uniform(150, 200)),
            drift_phase=rng.uniform(0, 2 * np.pi, size=3),
        )


def max_abs_cm(dev: DeviceSpec, o: Orientation) -> float:
    w, h = dev.screen_px(o)
    corners = screen_to_cam([[0, 0], [w, 0], [0, h], [w, h]], dev, o)
    return float(np.abs(corners).max())


def base_pupil_gain(dev: DeviceSpec, o: Orientation, crop_size: int) -> float:
    """Gain keeping the farthest screen corner's iris within a quarter crop of centre."""
    return 0.25 * crop_size / max_abs_cm(dev, o)


def sample_profile(
    seed: int, subject_index: int, base_gain: float, gain_spread: float,
    bias_norm_range: tuple[float, float],
) -> SubjectProfile:
    rng = np.random.default_rng([seed, subject_index, _PROFILE_STREAM])
    angle = rng.uniform(0, 2 * np.pi)
    norm = rng.uniform(*bias_norm_range)
    gain = base_gain * rng.uniform(1 - gain_spread, 1 + gain_spread)
    return SubjectProfile(
        bias_cm=(float(norm * np.cos(angle)), float(norm * np.sin(angle))),
        appearance_seed=int(rng.integers(0, 2**31 - 1)),
        pupil_gain=float(gain),
    )


def fixed_dot_px(dev: DeviceSpec, o: Orientation) -> np.ndarray:
    w, h = dev.screen_px(o)
    return np.array([[fx * w, fy * h] for fx, fy in FIXED_FRACTIONS])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _coords(size: int, extent: float) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * (2 * extent) - extent
    return c[None, :], c[:, None]


def _ellipse_alpha(x, y, cx, cy, rx, ry, px) -> np.ndarray:
    """Anti-aliased coverage of an ellipse, 1-pixel linear edge (px = pixel size)."""
    d = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) / px + 0.5, 0.0, 1.0)


def _rect_alpha(x, y, x0, x1, y0, y1, px) -> np.ndarray:
    ax = np.clip(np.minimum(x - x0, x1 - x) / px + 0.5, 0, 1)
    ay = np.clip(np.minimum(y - y0, y1 - y) / px + 0.5, 0, 1)
    return ax * ay


def _paint(img: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> None:
    img *= 1.0 - alpha
    img += alpha * color[:, None, None]


def render_eye(
    size: int, extent: float, eye_center: tuple[float, float],
    iris_offset: tuple[float, float], look: Appearance,
) -> np.ndarray:
    """Noise-free eye crop in eye units; iris centre = eye centre + iris_offset."""
    x, y = _coords(size, extent)
    px = 2 * extent / size
    img = np.broadcast_to(look.skin[:, None, None], (3, size, size)).copy()
    ex, ey = eye_center
    _paint(img, _ellipse_alpha(x, y, ex, ey, *look.sclera_radii, px), look.sclera)
    ix, iy = ex + iris_offset[0], ey + iris_offset[1]
    r = look.iris_radius
    _paint(img, _ellipse_alpha(x, y, ix, iy, r, r, px), look.iris)
    _paint(img, _ellipse_alpha(x, y, ix, iy, 0.45 * r, 0.45 * r, px), look.iris * 0.3)
    return img


def render_face(size: int, head_cue: tuple[float, float], iris_offset, look: Appearance,
                offset: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Face crop in face units; ``offset`` displaces the content (detector misalignment)."""
    x, y = _coords(size, 0.5)
    x, y = x - offset[0], y - offset[1]
    px = 1.0 / size
    img = np.broadcast_to(look.background[:, None, None], (3, size, size)).copy()
    _paint(img, _ellipse_alpha(x, y, 0.0, 0.04, 0.36, 0.46, px), look.skin)
    _paint(img, _rect_alpha(x, y, -0.34, 0.34, -0.5, -0.3, px), look.hair)
    for side in (-0.16, 0.16):
        _paint(img, _ellipse_alpha(x, y, side, -0.06, 0.09, 0.05, px), look.sclera)
        ix, iy = side + 0.2 * iris_offset[0], -0.06 + 0.2 * iris_offset[1]
        _paint(img, _ellipse_alpha(x, y, ix, iy, 0.035, 0.035, px), look.iris)
    cx, cy = head_cue
    _paint(img, _rect_alpha(x, y, cx - 0.08, cx + 0.08, 0.3 + cy - 0.04, 0.3 + cy + 0.04, px), look.hair)
    return img


def _finish(img: np.ndarray, rng: np.random.Generator, illum: float, sigma: float) -> np.ndarray:
    img = img * illum + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_frame(
    profile: SubjectProfile, target_cm, t: int, rng: np.random.Generator, crop_size: int,
    tight_size: int | None, iris_jitter_cm: float, detect_jitter: float, noise_sigma: float,
):
    """Render every crop of one frame; returns (crops dict, face_bbox, iris_px)."""
    look = Appearance.from_seed(profile.appearance_seed)
    jitter = rng.normal(0.0, iris_jitter_cm, size=2) if iris_jitter_cm > 0 else np.zeros(2)
    gaze = np.asarray(target_cm, dtype=np.float64) + np.asarray(profile.bias_cm) + jitter
    gain_u = profile.pupil_gain / crop_size  # eye units per cm
    # image rows grow downward, camera y grows upward
    iris_u = (gain_u * gaze[0], -gain_u * gaze[1])
    illum = float(rng.uniform(0.9, 1.1))

    ph = look.drift_phase
    side = look.face_size * (1 + 0.06 * np.sin(0.11 * t + ph[2]))
    cx = look.face_center[0] + 30 * np.sin(0.07 * t + ph[0])
    cy = look.face_center[1] + 20 * np.sin(0.05 * t + ph[1])
    # a misaligned detection shows the face at +f inside a window displaced by -f
    face_off = rng.uniform(-detect_jitter, detect_jitter, size=2) if detect_jitter > 0 else np.zeros(2)
    bbox = (float(cx - side / 2 - face_off[0] * side), float(cy - side / 2 - face_off[1] * side),
            float(side), float(side))
    head_cue = ((cx / FRAME_SIZE[0] - 0.5) * 0.5, (cy / FRAME_SIZE[1] - 0.5) * 0.3)

    crops = {}
    for name in ("left_eye", "right_eye"):
        centre = rng.uniform(-detect_jitter, detect_jitter, size=2) if detect_jitter > 0 else (0.0, 0.0)
        crops[name] = _finish(
            render_eye(crop_size, WIDE_EXTENT, tuple(centre), iris_u, look), rng, illum, noise_sigma
        )
    crops["face"] = _finish(render_face(crop_size, head_cue, iris_u, look, tuple(face_off)), rng, illum, noise_sigma)
    if tight_size:
        for name in ("tight_left", "tight_right"):
            centre = rng.uniform(-0.2 * detect_jitter, 0.2 * detect_jitter, size=2) if detect_jitter > 0 else (0.0, 0.0)
            crops[name] = _finish(
                render_eye(tight_size, TIGHT_EXTENT, tuple(centre), iris_u, look), rng, illum, noise_sigma
            )
    iris_px = (iris_u[0] * crop_size, iris_u[1] * crop_size)
    return crops, bbox, iris_px


def synth_generate(
    n_subjects: int,
    frames_per_dot: int,
    dots_per_session: int,
    dev: DeviceSpec,
    o: Orientation,
    seed: int,
    *,
    crop_size: int = 32,
    tight_size: int | None = 24,
    bias_norm_range: tuple[float, float] = (0.0, 0.6),
    gain_spread: float = 0.08,
    iris_jitter_cm: float = 0.1,
    detect_jitter: float = 0.06,
    noise_sigma: float = NOISE_SIGMA,
    subject_prefix: str = "subj",
    first_subject: int = 0,
    profiles: list[SubjectProfile] | None = None,
) -> tuple[list[SessionRecord], list[FrameSample]]:
    """Generate one session per subject on ``dev`` held in orientation ``o``.

    The first ``min(13, dots_per_session)`` dots sit on the fixed calibration
    locations; the rest are uniform over the screen.
    """
    if min(n_subjects, frames_per_dot, dots_per_session) < 1:
        raise ConfigurationError("subject, dot and frame counts must all be >= 1")
    o = Orientation.parse(o)
    base_gain = base_pupil_gain(dev, o, crop_size)
    w_px, h_px = dev.screen_px(o)
    fixed = fixed_dot_px(dev, o)

    sessions: list[SessionRecord] = []
    frames: list[FrameSample] = []
    for k in range(n_subjects):
        si = first_subject + k
        subject_id = f"{subject_prefix}{si:04d}"
        session_id = f"{subject_id}-{o.value}"
        profile = profiles[k] if profiles is not None else sample_profile(
            seed, si, base_gain, gain_spread, bias_norm_range
        )
        dot_rng = np.random.default_rng([seed, si, _DOT_STREAM])
        dots: list[DotRecord] = []
        for d in range(dots_per_session):
            is_fixed = d < N_FIXED_DOTS
            p = fixed[d] if is_fixed else dot_rng.uniform([0, 0], [w_px, h_px])
            target = GazePoint.from_screen(p, dev, o)
            dot = DotRecord(d, target, is_fixed, d if is_fixed else None, [])
            for fi in range(frames_per_dot):
                rng = np.random.default_rng([seed, si, d, fi])
                crops, bbox, iris_px = render_frame(
                    profile, target.cam_cm, d * frames_per_dot + fi, rng, crop_size, tight_size,
                    iris_jitter_cm, detect_jitter, noise_sigma,
                )
                sample = FrameSample(
                    subject_id=subject_id, session_id=session_id, dot_id=d, frame_index=fi,
                    device=dev.name, orientation=o,
                    face=crops["face"], left_eye=crops["left_eye"], right_eye=crops["right_eye"],
                    tight_left=crops.get("tight_left"), tight_right=crops.get("tight_right"),
                    face_bbox=bbox, frame_size=FRAME_SIZE, target=target,
                    is_fixed=is_fixed, fixed_index=dot.fixed_index,
                    extras={
                        "bias_cm": list(profile.bias_cm),
                        "pupil_gain": profile.pupil_gain,
                        "iris_px": [float(iris_px[0]), float(iris_px[1])],
                    },
                )
                dot.frame_ids.append(sample.frame_id)
                frames.append(sample)
            dots.append(dot)
        sessions.append(SessionRecord(subject_id, session_id, dev.name, o, dots))
    return sessions, frames
