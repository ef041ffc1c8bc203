import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gaze_engine.errors import (
    BadMagicError,
    ContractError,
    DuplicateEntryError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedDtypeError,
)
from gaze_engine.geometry import DEVICES, Orientation
from gaze_engine.io import (
    decode_gzt,
    encode_gzt,
    file_sha256,
    load_checkpoint,
    load_dataset,
    read_gzt,
    save_checkpoint,
    save_dataset,
    write_gzt,
)
from gaze_engine.model import build, desk_config, desk_student_config
from gaze_engine.synth import synth_generate


def hand_encoded(name: str, arr: np.ndarray) -> bytes:
    """Byte layout written out field by field, independent of the encoder."""
    raw = name.encode()
    out = b"GZT1" + (1).to_bytes(4, "little")
    out += len(raw).to_bytes(2, "little") + raw + bytes([0, arr.ndim])
    for d in arr.shape:
        out += d.to_bytes(4, "little")
    for v in arr.ravel():
        out += struct.pack("<f", float(v))
    return out


class TestContainer:
    def test_byte_layout(self):
        arr = np.array([[1.0, -2.5, 3.0], [0.0, 1e-3, 7.0]], dtype=np.float32)
        assert encode_gzt({"w": arr}) == hand_encoded("w", arr)

    def test_scalar_entry(self):
        arr = np.array(3.5, dtype=np.float32)
        assert encode_gzt({"s": arr}) == hand_encoded("s", arr)
        assert decode_gzt(encode_gzt({"s": arr}))["s"].shape == ()

    def test_empty_container(self):
        assert decode_gzt(encode_gzt({})) == {}

    @settings(max_examples=40, deadline=None)
    @given(
        arrays=st.lists(
            hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
                       elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
            max_size=4,
        )
    )
    def test_round_trip_bit_exact(self, arrays):
        entries = {f"t{i}/x": a for i, a in enumerate(arrays)}
        back = decode_gzt(encode_gzt(entries))
        assert list(back) == list(entries)
        for k, a in entries.items():
            assert back[k].shape == a.shape and back[k].tobytes() == a.tobytes()

    def test_rejects_other_dtypes(self):
        with pytest.raises(ContractError):
            encode_gzt({"x": np.zeros(3, dtype=np.float64)})

    def test_big_endian_input_stored_little_endian(self):
        arr = np.array([1.0, 2.0], dtype=">f4")
        assert encode_gzt({"x": arr}) == hand_encoded("x", arr)


class TestCorruption:
    @pytest.fixture
    def blob(self):
        return encode_gzt({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2, np.float32)})

    def test_bad_magic(self, blob):
        with pytest.raises(BadMagicError):
            decode_gzt(b"GZT2" + blob[4:])

    def test_empty_file(self):
        with pytest.raises(BadMagicError):
            decode_gzt(b"")

    @pytest.mark.parametrize("cut", [5, 9, 12, 20, -1])
    def test_truncated(self, blob, cut):
        with pytest.raises(TruncatedFileError):
            decode_gzt(blob[:cut])

    def test_unsupported_dtype(self, blob):
        corrupt = bytearray(blob)
        corrupt[4 + 4 + 2 + 1] = 7  # dtype byte of entry "a"
        with pytest.raises(UnsupportedDtypeError):
            decode_gzt(bytes(corrupt))

    def test_duplicate_names(self):
        one = encode_gzt({"a": np.ones(1, np.float32)})
        two = b"GZT1" + (2).to_bytes(4, "little") + one[8:] * 2
        with pytest.raises(DuplicateEntryError):
            decode_gzt(two)

    def test_trailing_bytes(self, blob):
        with pytest.raises(FormatError):
            decode_gzt(blob + b"\0")

    def test_all_format_errors_share_base(self):
        for cls in (BadMagicError, TruncatedFileError, UnsupportedDtypeError, DuplicateEntryError, ShapeMismatchError):
            assert issubclass(cls, FormatError)


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        p = build(desk_config(), seed=1)
        p.velocity = {n: np.full(p[n].dims, 0.25, np.float32) for n in p.names()}
        save_checkpoint(p, tmp_path / "a.gzt")
        q = load_checkpoint(tmp_path / "a.gzt")
        save_checkpoint(q, tmp_path / "b.gzt")
        assert (tmp_path / "a.gzt").read_bytes() == (tmp_path / "b.gzt").read_bytes()
        assert q.config == p.config and q.checksum() == p.checksum()
        np.testing.assert_array_equal(q.velocity["fc1.weight"], p.velocity["fc1.weight"])

    def test_desk_size(self, tmp_path):
        p = build(desk_config())
        save_checkpoint(p, tmp_path / "m.gzt")
        size = (tmp_path / "m.gzt").stat().st_size
        payload = 4 * p.parameter_count()
        assert payload <= size < payload + 20_000
        assert size < 10 * 2**20

    def test_shape_mismatch_against_config(self, tmp_path):
        save_checkpoint(build(desk_config()), tmp_path / "m.gzt")
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(tmp_path / "m.gzt", config=desk_config(fc1=16))

    def test_wrong_architecture(self, tmp_path):
        save_checkpoint(build(desk_student_config()), tmp_path / "s.gzt")
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(tmp_path / "s.gzt", config=desk_config())

    def test_tampered_tensor_shape(self, tmp_path):
        p = build(desk_config())
        entries = read_gzt(self._save(p, tmp_path))
        entries["param/fc2.bias"] = np.zeros(3, np.float32)
        write_gzt(tmp_path / "bad.gzt", entries)
        with pytest.raises(ShapeMismatchError):
            load_checkpoint(tmp_path / "bad.gzt")

    def test_aux_entries(self, tmp_path):
        p = build(desk_student_config())
        save_checkpoint(p, tmp_path / "s.gzt", extra={"projection": np.eye(3, dtype=np.float32)})
        _, aux = load_checkpoint(tmp_path / "s.gzt", with_aux=True)
        np.testing.assert_array_equal(aux["projection"], np.eye(3))

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        self._save(build(desk_config()), tmp_path)
        assert [f.name for f in tmp_path.iterdir()] == ["m.gzt"]

    @staticmethod
    def _save(p, tmp_path):
        path = tmp_path / "m.gzt"
        save_checkpoint(p, path)
        return path


class TestDataset:
    def test_round_trip(self, tmp_path):
        _, frames = synth_generate(2, 2, 14, DEVICES["synthPhone"], Orientation.LANDSCAPE_LEFT, seed=0,
                                   crop_size=12, tight_size=10)
        save_dataset(frames, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert len(back) == len(frames)
        for a, b in zip(frames, back):
            assert a.frame_id == b.frame_id and a.orientation is b.orientation
            assert a.target == b.target and a.face_bbox == b.face_bbox
            assert a.is_fixed == b.is_fixed and a.fixed_index == b.fixed_index
            for c in ("face", "left_eye", "right_eye", "tight_left", "tight_right"):
                assert getattr(a, c).tobytes() == getattr(b, c).tobytes()

    def test_resave_identical(self, tmp_path):
        _, frames = synth_generate(1, 1, 13, DEVICES["synthTablet"], Orientation.PORTRAIT, seed=2,
                                   crop_size=12, tight_size=None)
        save_dataset(frames, tmp_path / "a")
        save_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
        for name in ("meta.jsonl", "frames_0000.gzt"):
            assert file_sha256(tmp_path / "a" / name) == file_sha256(tmp_path / "b" / name)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nothing")
