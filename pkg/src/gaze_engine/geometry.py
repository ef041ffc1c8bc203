"""Screen pixels <-> camera-relative centimetres.

The prediction space puts the front camera at the origin with +x to the
user's right and +y upward, expressed in the frame of the screen as the
user currently holds it.  A dot on a phone held in portrait therefore has
negative y.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UnknownDeviceError


class Orientation(enum.Enum):
    PORTRAIT = "Portrait"
    PORTRAIT_UPSIDE_DOWN = "PortraitUpsideDown"
    LANDSCAPE_LEFT = "LandscapeLeft"    # camera on the user's left
    LANDSCAPE_RIGHT = "LandscapeRight"  # camera on the user's right

    @classmethod
    def parse(cls, value: "str | Orientation") -> "Orientation":
        if isinstance(value, cls):
            return value
        for o in cls:
            if value in (o.value, o.name):
                return o
        raise ConfigurationError(f"unknown orientation {value!r}")

    @property
    def is_landscape(self) -> bool:
        return self in (Orientation.LANDSCAPE_LEFT, Orientation.LANDSCAPE_RIGHT)


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    screen_w_px: float
    screen_h_px: float
    screen_w_cm: float
    screen_h_cm: float
    camera_x_cm: float
    camera_y_cm: float

    def __post_init__(self):
        if min(self.screen_w_px, self.screen_h_px) <= 0:
            raise ConfigurationError(f"{self.name}: pixel extents must be positive")
        if min(self.screen_w_cm, self.screen_h_cm) <= 0:
            raise ConfigurationError(f"{self.name}: physical extents must be positive")

    def screen_px(self, o: Orientation) -> tuple[float, float]:
        """(width, height) in pixels as seen in orientation ``o``."""
        if o.is_landscape:
            return self.screen_h_px, self.screen_w_px
        return self.screen_w_px, self.screen_h_px

    def to_line(self) -> str:
        return ",".join(
            [self.name]
            + [repr(float(v)) for v in (self.screen_w_px, self.screen_h_px, self.screen_w_cm,
                                        self.screen_h_cm, self.camera_x_cm, self.camera_y_cm)]
        )


@dataclass(frozen=True)
class GazePoint:
    screen_px: tuple[float, float]
    cam_cm: tuple[float, float]

    @classmethod
    def from_screen(cls, p, dev: DeviceSpec, o: Orientation) -> "GazePoint":
        cm = screen_to_cam(p, dev, o)
        return cls((float(p[0]), float(p[1])), (float(cm[0]), float(cm[1])))


# ---------------------------------------------------------------------------
# device table
# ---------------------------------------------------------------------------


def parse_device_table(text: str) -> dict[str, DeviceSpec]:
    devices: dict[str, DeviceSpec] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 7:
            raise ConfigurationError(f"device table line {lineno}: expected 7 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise ConfigurationError(f"device table line {lineno}: {exc}") from None
        devices[fields[0]] = DeviceSpec(fields[0], *values)
    return devices


def load_device_table(path: str | Path | None = None) -> dict[str, DeviceSpec]:
    """Read a device table; ``None`` loads the shipped synthetic devices."""
    if path is None:
        text = resources.files(__package__).joinpath("devices.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_device_table(text)


DEVICES = load_device_table()


def get_device(name: str, table: dict[str, DeviceSpec] | None = None) -> DeviceSpec:
    table = DEVICES if table is None else table
    try:
        return table[name]
    except KeyError:
        raise UnknownDeviceError(f"unknown device {name!r}; known: {sorted(table)}") from None


# ---------------------------------------------------------------------------
# mappings
# ---------------------------------------------------------------------------

# Each orientation is a rotation R taking a portrait displacement (screen
# axes, y down) to the displacement seen in that orientation.
_ROTATIONS = {
    Orientation.PORTRAIT: np.array([[1.0, 0.0], [0.0, 1.0]]),
    Orientation.PORTRAIT_UPSIDE_DOWN: np.array([[-1.0, 0.0], [0.0, -1.0]]),
    Orientation.LANDSCAPE_LEFT: np.array([[0.0, 1.0], [-1.0, 0.0]]),
    Orientation.LANDSCAPE_RIGHT: np.array([[0.0, -1.0], [1.0, 0.0]]),
}


def _oriented_to_portrait_px(p: np.ndarray, dev: DeviceSpec, o: Orientation) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    w, h = dev.screen_w_px, dev.screen_h_px
    if o is Orientation.PORTRAIT:
        px, py = x, y
    elif o is Orientation.PORTRAIT_UPSIDE_DOWN:
        px, py = w - x, h - y
    elif o is Orientation.LANDSCAPE_LEFT:
        px, py = w - y, x
    else:
        px, py = y, h - x
    return np.stack([px, py], axis=-1)


def _portrait_to_oriented_px(q: np.ndarray, dev: DeviceSpec, o: Orientation) -> np.ndarray:
    px, py = q[..., 0], q[..., 1]
    w, h = dev.screen_w_px, dev.screen_h_px
    if o is Orientation.PORTRAIT:
        x, y = px, py
    elif o is Orientation.PORTRAIT_UPSIDE_DOWN:
        x, y = w - px, h - py
    elif o is Orientation.LANDSCAPE_LEFT:
        x, y = py, w - px
    else:
        x, y = h - py, px
    return np.stack([x, y], axis=-1)


def screen_to_cam(p, dev: DeviceSpec, o: Orientation):
    """Map oriented screen pixels (any leading shape, last axis 2) to camera cm."""
    o = Orientation.parse(o)
    p = np.asarray(p, dtype=np.float64)
    q = _oriented_to_portrait_px(p, dev, o)
    d = np.stack(
        [
            q[..., 0] * (dev.screen_w_cm / dev.screen_w_px) - dev.camera_x_cm,
            q[..., 1] * (dev.screen_h_cm / dev.screen_h_px) - dev.camera_y_cm,
        ],
        axis=-1,
    )
    d = d @ _ROTATIONS[o].T
    return np.stack([d[..., 0], -d[..., 1]], axis=-1)


def cam_to_screen(g, dev: DeviceSpec, o: Orientation):
    """Exact inverse of :func:`screen_to_cam`."""
    o = Orientation.parse(o)
    g = np.asarray(g, dtype=np.float64)
    d = np.stack([g[..., 0], -g[..., 1]], axis=-1) @ _ROTATIONS[o]
    q = np.stack(
        [
            (d[..., 0] + dev.camera_x_cm) * (dev.screen_w_px / dev.screen_w_cm),
            (d[..., 1] + dev.camera_y_cm) * (dev.screen_h_px / dev.screen_h_cm),
        ],
        axis=-1,
    )
    return _portrait_to_oriented_px(q, dev, o)


def screen_rect_cm(dev: DeviceSpec, o: Orientation) -> tuple[float, float, float, float]:
    """(x_min, x_max, y_min, y_max) of the screen in camera cm for orientation ``o``."""
    w, h = dev.screen_px(Orientation.parse(o))
    corners = screen_to_cam([[0, 0], [w, 0], [0, h], [w, h]], dev, o)
    return (
        float(corners[:, 0].min()),
        float(corners[:, 0].max()),
        float(corners[:, 1].min()),
        float(corners[:, 1].max()),
    )


def screen_center_cm(dev: DeviceSpec, o: Orientation) -> np.ndarray:
    w, h = dev.screen_px(Orientation.parse(o))
    return screen_to_cam([w / 2.0, h / 2.0], dev, o)


def truncate_to_screen(g, dev: DeviceSpec, o: Orientation):
    """Clamp camera-cm points onto the screen rectangle (idempotent projection)."""
    x0, x1, y0, y1 = screen_rect_cm(dev, o)
    g = np.asarray(g, dtype=np.float64)
    return np.stack([np.clip(g[..., 0], x0, x1), np.clip(g[..., 1], y0, y1)], axis=-1)
