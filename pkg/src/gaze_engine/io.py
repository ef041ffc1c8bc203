"""GZT tensor container, checkpoints and dataset directories.

GZT layout (all integers little-endian)::

    b"GZT1"                      magic
    u32                          entry count
    per entry:
      u16                        name length in bytes
      bytes                      UTF-8 name
      u8                         dtype code (0 = float32)
      u8                         ndim
      u32 * ndim                 dims
      f32 * prod(dims)           row-major payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FrameSample
from .errors import (
    BadMagicError,
    ContractError,
    DuplicateEntryError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedDtypeError,
)
from .geometry import GazePoint, Orientation
from .model import config_from_json, expected_shapes
from .tensor import ModelParams, Tensor

MAGIC = b"GZT1"
DTYPE_F32 = 0
_LE_F32 = np.dtype("<f4")


def encode_gzt(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype.kind != "f" or arr.dtype.itemsize != 4:
            raise ContractError(f"entry {name!r}: only float32 tensors can be stored, got {arr.dtype}")
        if arr.ndim > 255 or len(raw) > 0xFFFF:
            raise ContractError(f"entry {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return b"".join(parts)


def decode_gzt(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a GZT byte string; raises a :class:`FormatError` subclass on damage."""
    view = memoryview(buf)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"not a GZT container (magic {bytes(view[:4])!r})")
    pos = 4

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what} at byte {pos} (needs {n} more)")
        out = view[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i}: name is not valid UTF-8") from None
        dtype, ndim = struct.unpack("<BB", take(2, f"entry {name!r} header"))
        if dtype != DTYPE_F32:
            raise UnsupportedDtypeError(f"entry {name!r}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"entry {name!r} dims"))
        count_el = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * count_el, f"entry {name!r} payload")
        if name in out:
            raise DuplicateEntryError(f"entry {name!r} appears twice")
        out[name] = np.frombuffer(payload, dtype=_LE_F32).astype(np.float32).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} unexpected bytes after the last entry")
    return out


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_gzt(path, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_gzt(entries))


def read_gzt(path) -> dict[str, np.ndarray]:
    return decode_gzt(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_ENTRY = "meta/config"


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _tensor_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_entries(params: ModelParams, extra: Mapping[str, np.ndarray] | None = None) -> dict:
    entries: dict[str, np.ndarray] = {}
    if params.config is not None:
        entries[_CONFIG_ENTRY] = _text_tensor(params.config.to_json())
    for name in sorted(params.tensors):
        entries[f"param/{name}"] = params.tensors[name].data
    for name in sorted(params.velocity):
        entries[f"velocity/{name}"] = params.velocity[name]
    for name, arr in (extra or {}).items():
        entries[f"aux/{name}"] = np.asarray(arr, dtype=np.float32)
    return entries


def save_checkpoint(params: ModelParams, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write parameters, momentum buffers and architecture to one GZT file (atomically)."""
    write_gzt(path, checkpoint_entries(params, extra))


def load_checkpoint(path, config=None, with_aux: bool = False):
    """Read a checkpoint; validates tensor shapes against ``config`` (or the stored one)."""
    entries = read_gzt(path)
    stored = _tensor_text(entries[_CONFIG_ENTRY]) if _CONFIG_ENTRY in entries else None
    if config is None and stored is not None:
        config = config_from_json(stored)
    tensors, velocity, aux = {}, {}, {}
    for name, arr in entries.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            tensors[key] = Tensor(arr, requires_grad=True)
        elif kind == "velocity":
            velocity[key] = arr
        elif kind == "aux":
            aux[key] = arr
    if config is not None:
        want = expected_shapes(config)
        if set(want) != set(tensors):
            missing = sorted(set(want) - set(tensors))
            surplus = sorted(set(tensors) - set(want))
            raise ShapeMismatchError(f"parameter names differ: missing {missing}, unexpected {surplus}")
        for key, shape in want.items():
            if tensors[key].dims != shape:
                raise ShapeMismatchError(f"{key}: stored dims {tensors[key].dims}, expected {shape}")
    for key, v in velocity.items():
        if key not in tensors or v.shape != tensors[key].dims:
            raise ShapeMismatchError(f"velocity buffer {key!r} does not match its parameter")
    params = ModelParams(tensors, velocity, config)
    return (params, aux) if with_aux else params


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

META_FILE = "meta.jsonl"
SHARD_SIZE = 1000
_CROPS = ("face", "left_eye", "right_eye", "tight_left", "tight_right")


def _frame_record(s: FrameSample, shard: str, key: str) -> dict:
    return {
        "frame_id": s.frame_id,
        "subject_id": s.subject_id,
        "session_id": s.session_id,
        "dot_id": s.dot_id,
        "frame_index": s.frame_index,
        "device": s.device,
        "orientation": s.orientation.value,
        "is_fixed": s.is_fixed,
        "fixed_index": s.fixed_index,
        "face_bbox": [float(v) for v in s.face_bbox],
        "frame_size": [int(v) for v in s.frame_size],
        "target_px": [float(v) for v in s.target.screen_px],
        "target_cm": [float(v) for v in s.target.cam_cm],
        "tensors": {
            "file": shard,
            **{c: f"{key}/{c}" for c in _CROPS if getattr(s, c) is not None},
        },
        "extras": s.extras,
    }


def save_dataset(frames: list[FrameSample], directory) -> None:
    """Write ``meta.jsonl`` plus GZT shards ``frames_NNNN.gzt`` of crop tensors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for start in range(0, len(frames), SHARD_SIZE):
        shard = f"frames_{start // SHARD_SIZE:04d}.gzt"
        entries = {}
        for i, s in enumerate(frames[start : start + SHARD_SIZE], start):
            key = f"f{i:07d}"
            for c in _CROPS:
                arr = getattr(s, c)
                if arr is not None:
                    entries[f"{key}/{c}"] = arr
            lines.append(json.dumps(_frame_record(s, shard, key), sort_keys=True))
        write_gzt(directory / shard, entries)
    atomic_write(directory / META_FILE, ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(directory) -> list[FrameSample]:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no {META_FILE} in {directory}")
    shards: dict[str, dict[str, np.ndarray]] = {}
    frames = []
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        refs = rec["tensors"]
        shard = shards.get(refs["file"])
        if shard is None:
            shard = shards[refs["file"]] = read_gzt(directory / refs["file"])
        crops = {c: shard[refs[c]] if c in refs else None for c in _CROPS}
        frames.append(
            FrameSample(
                subject_id=rec["subject_id"], session_id=rec["session_id"], dot_id=rec["dot_id"],
                frame_index=rec["frame_index"], device=rec["device"],
                orientation=Orientation.parse(rec["orientation"]),
                face_bbox=tuple(rec["face_bbox"]), frame_size=tuple(rec["frame_size"]),
                target=GazePoint(tuple(rec["target_px"]), tuple(rec["target_cm"])),
                is_fixed=rec["is_fixed"], fixed_index=rec["fixed_index"],
                extras=rec.get("extras", {}), **crops,
            )
        )
    return frames


def dataset_sha256(directory) -> str:
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        if p.name == META_FILE or p.suffix == ".gzt":
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
