"""Gaze regression engine built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    GazeEngineError,
    NonFiniteLossError,
    UnknownDeviceError,
)
from .geometry import DEVICES, DeviceSpec, GazePoint, Orientation, cam_to_screen, screen_to_cam  # noqa: E402
from .model import ArchitectureConfig, StudentConfig, build, desk_config, forward, full_config  # noqa: E402
from .training import DistillConfig, TrainConfig, desk_train_config, distill, fine_tune, train  # noqa: E402
from .evaluation import evaluate  # noqa: E402
from .calibration import calibrate_sessions, fit_calibration  # noqa: E402
from .io import load_checkpoint, load_dataset, save_checkpoint, save_dataset  # noqa: E402
from .synth import synth_generate  # noqa: E402
