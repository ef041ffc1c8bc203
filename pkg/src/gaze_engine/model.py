"""The four-input gaze network, its distillation student, and presets.

Teacher layout (layer names are the parameter-map keys)::

    left eye  -> eye tower --+
    right eye -> eye tower --+-> fc_e1 --------------+
    face      -> face tower -> fc_f1 -> fc_f2 -------+-> fc1 -> fc2 -> (x, y) cm
    face grid -> fc_fg1 -> fc_fg2 -------------------+

Each tower is conv1..conv4 with ReLU and max pooling after conv1 and conv2.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .data import GRID_SIZE, Batch, FrameSample
from .errors import ConfigurationError, DimensionError
from .tensor import (
    ConvSpec,
    ModelParams,
    Tensor,
    concat,
    conv2d,
    flatten,
    fully_connected,
    maxpool2d,
    pool_output_size,
    relu,
)

INPUTS = ("eyes", "face", "facegrid")
INPUT_MEAN = np.float32(0.5)


def _tower_shape(size: int, convs, pool_after, window: int, stride: int) -> tuple[int, int, int]:
    h = w = size
    channels = 3
    for i, spec in enumerate(convs):
        if spec.in_channels != channels:
            raise ConfigurationError(
                f"conv{i + 1} expects {spec.in_channels} input channels, previous layer gives {channels}"
            )
        if h + 2 * spec.pad < spec.kernel_h or w + 2 * spec.pad < spec.kernel_w:
            raise ConfigurationError(f"conv{i + 1} kernel does not fit a {h}x{w} input")
        h, w = spec.output_hw(h, w)
        channels = spec.out_channels
        if i in pool_after:
            if window > min(h, w):
                raise ConfigurationError(f"pool after conv{i + 1} does not fit a {h}x{w} map")
            h, w = pool_output_size(h, window, stride), pool_output_size(w, window, stride)
    return channels, h, w


@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int = 224
    eye_convs: tuple[ConvSpec, ...] = (
        ConvSpec(11, 11, 3, 96, stride=4, pad=0),
        ConvSpec(5, 5, 96, 256, stride=1, pad=2),
        ConvSpec(3, 3, 256, 384, stride=1, pad=1),
        ConvSpec(1, 1, 384, 64, stride=1, pad=0),
    )
    face_convs: tuple[ConvSpec, ...] = (
        ConvSpec(11, 11, 3, 96, stride=4, pad=0),
        ConvSpec(5, 5, 96, 256, stride=1, pad=2),
        ConvSpec(3, 3, 256, 384, stride=1, pad=1),
        ConvSpec(1, 1, 384, 64, stride=1, pad=0),
    )
    pool_after: tuple[int, ...] = (0, 1)
    pool_window: int = 3
    pool_stride: int = 2
    fc_e1: int = 128
    fc_f1: int = 128
    fc_f2: int = 64
    fc_fg1: int = 256
    fc_fg2: int = 128
    fc1: int = 128
    fc2: int = 2
    share_eye_weights: bool = True
    enabled_inputs: frozenset = field(default_factory=lambda: frozenset(INPUTS))

    kind = "itracker"

    def __post_init__(self):
        object.__setattr__(self, "enabled_inputs", frozenset(self.enabled_inputs))
        if self.fc2 != 2:
            raise ConfigurationError("fc2 must have exactly 2 outputs (x, y)")
        if not self.enabled_inputs:
            raise ConfigurationError("at least one input stream must be enabled")
        unknown = self.enabled_inputs - set(INPUTS)
        if unknown:
            raise ConfigurationError(f"unknown inputs {sorted(unknown)}")
        self.eye_feature_shape
        self.face_feature_shape

    @property
    def eye_feature_shape(self) -> tuple[int, int, int]:
        return _tower_shape(self.input_size, self.eye_convs, self.pool_after, self.pool_window, self.pool_stride)

    @property
    def face_feature_shape(self) -> tuple[int, int, int]:
        return _tower_shape(self.input_size, self.face_convs, self.pool_after, self.pool_window, self.pool_stride)

    @property
    def fc1_input_width(self) -> int:
        return self.fc_e1 + self.fc_f2 + self.fc_fg2

    @property
    def feature_width(self) -> int:
        return self.fc1

    def without(self, *inputs: str) -> "ArchitectureConfig":
        return dataclasses.replace(self, enabled_inputs=self.enabled_inputs - set(inputs))

    def to_json(self) -> str:
        d = asdict(self)
        d["enabled_inputs"] = sorted(self.enabled_inputs)
        d["kind"] = self.kind
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class StudentConfig:
    input_size: int = 80
    convs: tuple[ConvSpec, ...] = (
        ConvSpec(7, 7, 3, 16, stride=2, pad=0),
        ConvSpec(3, 3, 16, 32, stride=2, pad=0),
    )
    pool_after: tuple[int, ...] = (1,)
    pool_window: int = 3
    pool_stride: int = 2
    fc_feat: int = 64
    fc_grid: int = 32

    kind = "student"

    def __post_init__(self):
        self.eye_feature_shape

    @property
    def eye_feature_shape(self) -> tuple[int, int, int]:
        return _tower_shape(self.input_size, self.convs, self.pool_after, self.pool_window, self.pool_stride)

    @property
    def feature_width(self) -> int:
        return self.fc_feat

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = self.kind
        return json.dumps(d, sort_keys=True)


def config_from_json(text: str):
    d = json.loads(text)
    kind = d.pop("kind")
    for key in ("eye_convs", "face_convs", "convs"):
        if key in d:
            d[key] = tuple(ConvSpec(**c) for c in d[key])
    for key in ("pool_after",):
        d[key] = tuple(d[key])
    if kind == "itracker":
        d["enabled_inputs"] = frozenset(d["enabled_inputs"])
        return ArchitectureConfig(**d)
    if kind == "student":
        return StudentConfig(**d)
    raise ConfigurationError(f"unknown architecture kind {kind!r}")


def full_config(**changes) -> ArchitectureConfig:
    return ArchitectureConfig(**changes)


def desk_config(**changes) -> ArchitectureConfig:
    """32x32 crops, channels (12, 32, 48, 8), FC sizes divided by four."""
    tower = (
        ConvSpec(5, 5, 3, 12, stride=2, pad=2),
        ConvSpec(5, 5, 12, 32, stride=1, pad=2),
        ConvSpec(3, 3, 32, 48, stride=1, pad=1),
        ConvSpec(1, 1, 48, 8, stride=1, pad=0),
    )
    base = dict(
        input_size=32, eye_convs=tower, face_convs=tower,
        fc_e1=32, fc_f1=32, fc_f2=16, fc_fg1=64, fc_fg2=32, fc1=32,
    )
    base.update(changes)
    return ArchitectureConfig(**base)


def full_student_config(**changes) -> StudentConfig:
    return StudentConfig(**changes)


def desk_student_config(**changes) -> StudentConfig:
    base = dict(
        input_size=24,
        convs=(ConvSpec(7, 7, 3, 4, stride=2, pad=0), ConvSpec(3, 3, 4, 8, stride=2, pad=0)),
        pool_after=(),
        fc_feat=16,
        fc_grid=4,
    )
    base.update(changes)
    return StudentConfig(**base)


PRESETS = {
    "full": full_config,
    "desk": desk_config,
    "student_full": full_student_config,
    "student_desk": desk_student_config,
}


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(np.float32)


def _layer_shapes(config) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def tower(prefix, convs):
        for i, s in enumerate(convs, 1):
            shapes.append((f"{prefix}.conv{i}.weight", (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)))
            shapes.append((f"{prefix}.conv{i}.bias", (s.out_channels,)))

    def fc(name, n_in, n_out):
        shapes.append((f"{name}.weight", (n_out, n_in)))
        shapes.append((f"{name}.bias", (n_out,)))

    if isinstance(config, StudentConfig):
        tower("s_eye", config.convs)
        c, h, w = config.eye_feature_shape
        fc("s_fc_feat", 2 * c * h * w, config.fc_feat)
        fc("s_fc_grid", GRID_SIZE * GRID_SIZE, config.fc_grid)
        fc("s_fc_out", config.fc_feat + config.fc_grid, 2)
        return shapes

    enabled = config.enabled_inputs
    if "eyes" in enabled:
        if config.share_eye_weights:
            tower("eye", config.eye_convs)
        else:
            tower("eye_left", config.eye_convs)
            tower("eye_right", config.eye_convs)
        c, h, w = config.eye_feature_shape
        fc("fc_e1", 2 * c * h * w, config.fc_e1)
    if "face" in enabled:
        tower("face", config.face_convs)
        c, h, w = config.face_feature_shape
        fc("fc_f1", c * h * w, config.fc_f1)
        fc("fc_f2", config.fc_f1, config.fc_f2)
    if "facegrid" in enabled:
        fc("fc_fg1", GRID_SIZE * GRID_SIZE, config.fc_fg1)
        fc("fc_fg2", config.fc_fg1, config.fc_fg2)
    fc("fc1", config.fc1_input_width, config.fc1)
    fc("fc2", config.fc1, config.fc2)
    return shapes


def expected_shapes(config) -> dict[str, tuple[int, ...]]:
    return dict(_layer_shapes(config))


def build(config: ArchitectureConfig | StudentConfig, seed: int = 0,
          init_std: float | None = None) -> ModelParams:
    """Fresh parameters: truncated-normal weights, zero biases.

    ``init_std=None`` scales each layer by sqrt(2 / fan_in); a fixed value
    such as 0.01 leaves the deep towers unable to leave the mean predictor
    within a desk-scale budget.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            std = init_std if init_std is not None else float(np.sqrt(2.0 / np.prod(shape[1:])))
            data = truncated_normal(rng, shape, std)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors, {}, config)


def build_student(config: StudentConfig | None = None, seed: int = 0,
                  init_std: float | None = None) -> ModelParams:
    return build(config if config is not None else StudentConfig(), seed, init_std)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


class ForwardOutput(NamedTuple):
    pred: Tensor      # [N, 2] cm
    features: Tensor  # penultimate layer (fc1 for the teacher)


def _tower(params: ModelParams, prefix: str, x: Tensor, convs, pool_after, window, stride) -> Tensor:
    for i, spec in enumerate(convs):
        x = relu(conv2d(x, params[f"{prefix}.conv{i + 1}.weight"], params[f"{prefix}.conv{i + 1}.bias"], spec))
        if i in pool_after:
            x = maxpool2d(x, window, stride)
    return flatten(x)


def _fc(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return fully_connected(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _image(arr: np.ndarray, size: int, what: str) -> Tensor:
    if arr is None:
        raise DimensionError(f"batch has no {what} crops", axis=what)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != size or arr.shape[3] != size:
        raise DimensionError(f"{what} crops have dims {arr.shape[1:]}, expected (3, {size}, {size})", axis=what)
    return Tensor(arr - INPUT_MEAN)


def as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, FrameSample):
        return Batch.from_samples([data])
    return Batch.from_samples(list(data))


def forward(params: ModelParams, data, config=None) -> ForwardOutput:
    """Predict camera-relative gaze (cm) for a batch; also returns the penultimate features."""
    config = params.config if config is None else config
    batch = as_batch(data)
    n = len(batch)
    grid = Tensor(batch.face_grid.reshape(n, -1))

    if isinstance(config, StudentConfig):
        size = config.input_size
        args = (config.convs, config.pool_after, config.pool_window, config.pool_stride)
        left = _tower(params, "s_eye", _image(batch.tight_left, size, "tight_left"), *args)
        right = _tower(params, "s_eye", _image(batch.tight_right, size, "tight_right"), *args)
        feat = relu(_fc(params, "s_fc_feat", concat([left, right], axis=1)))
        g = relu(_fc(params, "s_fc_grid", grid))
        return ForwardOutput(_fc(params, "s_fc_out", concat([feat, g], axis=1)), feat)

    size = config.input_size
    enabled = config.enabled_inputs
    streams = []
    if "eyes" in enabled:
        args = (config.eye_convs, config.pool_after, config.pool_window, config.pool_stride)
        lname, rname = ("eye", "eye") if config.share_eye_weights else ("eye_left", "eye_right")
        left = _tower(params, lname, _image(batch.left_eye, size, "left_eye"), *args)
        right = _tower(params, rname, _image(batch.right_eye, size, "right_eye"), *args)
        streams.append(relu(_fc(params, "fc_e1", concat([left, right], axis=1))))
    else:
        streams.append(Tensor(np.zeros((n, config.fc_e1), dtype=np.float32)))
    if "face" in enabled:
        args = (config.face_convs, config.pool_after, config.pool_window, config.pool_stride)
        f = _tower(params, "face", _image(batch.face, size, "face"), *args)
        f = relu(_fc(params, "fc_f1", f))
        streams.append(relu(_fc(params, "fc_f2", f)))
    else:
        streams.append(Tensor(np.zeros((n, config.fc_f2), dtype=np.float32)))
    if "facegrid" in enabled:
        g = relu(_fc(params, "fc_fg1", grid))
        streams.append(relu(_fc(params, "fc_fg2", g)))
    else:
        streams.append(Tensor(np.zeros((n, config.fc_fg2), dtype=np.float32)))
    fc1 = relu(_fc(params, "fc1", concat(streams, axis=1)))
    return ForwardOutput(_fc(params, "fc2", fc1), fc1)
