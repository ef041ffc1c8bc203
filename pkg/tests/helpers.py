"""Small fixtures shared by several test modules."""

import numpy as np

from gaze_engine.data import FrameSample
from gaze_engine.geometry import GazePoint, Orientation
from gaze_engine.model import ArchitectureConfig
from gaze_engine.tensor import ConvSpec


def make_sample(size=20, tight=16, seed=0, bbox=(200.0, 100.0, 160.0, 160.0), **kw):
    rng = np.random.default_rng(seed)
    img = lambda s: rng.uniform(0, 1, (3, s, s)).astype(np.float32)
    base = dict(
        subject_id="s0", session_id="s0_0", dot_id=0, frame_index=0, device="synthPhone",
        orientation=Orientation.PORTRAIT, face=img(size), left_eye=img(size), right_eye=img(size),
        tight_left=img(tight), tight_right=img(tight), face_bbox=bbox, frame_size=(640, 480),
        target=GazePoint((10.0, 20.0), (0.5, -1.5)),
    )
    base.update(kw)
    return FrameSample(**base)


def tiny_config(**kw):
    tower = (ConvSpec(3, 3, 3, 4, stride=2, pad=1), ConvSpec(3, 3, 4, 4, pad=1))
    base = dict(input_size=8, eye_convs=tower, face_convs=tower, pool_after=(1,), pool_window=2,
                pool_stride=2, fc_e1=6, fc_f1=6, fc_f2=5, fc_fg1=7, fc_fg2=4, fc1=6)
    base.update(kw)
    return ArchitectureConfig(**base)
