import struct

import numpy as np
import pytest

from priornet.errors import FormatError, UnsupportedError
from priornet.io import read_array, read_labelmap, read_volume, write_volume
from priornet.volume import LabelMap, Volume

FORMATS = ["nii", "pvol"]


@pytest.mark.parametrize("ext", FORMATS)
def test_float_volume_round_trip(tmp_path, rng, ext):
    v = Volume(rng.normal(size=(8, 8, 8)).astype(np.float32), spacing=(1.0, 0.5, 2.0))
    back = read_volume(write_volume(tmp_path / f"v.{ext}", v))
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing


@pytest.mark.parametrize("ext", FORMATS)
@pytest.mark.parametrize("shape", [(5, 7), (3, 4, 6)])
def test_non_cubic_shapes(tmp_path, rng, ext, shape):
    v = Volume(rng.normal(size=shape).astype(np.float32))
    back = read_volume(write_volume(tmp_path / f"v.{ext}", v))
    np.testing.assert_array_equal(back.data, v.data)


def test_pvol_keeps_float64_and_exact_spacing(tmp_path, rng):
    v = Volume(rng.normal(size=(4, 5, 6)), spacing=(0.1, 1 / 3, 2.0))
    back = read_volume(write_volume(tmp_path / "v.pvol", v))
    assert back.data.dtype == np.float64
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing


@pytest.mark.parametrize("ext", FORMATS)
def test_labelmap_round_trip(tmp_path, rng, ext):
    labels = LabelMap(rng.integers(0, 4, size=(6, 6, 6)), 3)
    path = write_volume(tmp_path / f"l.{ext}", labels)
    data, _ = read_array(path)
    assert data.dtype == np.uint8
    back = read_labelmap(path, 3)
    np.testing.assert_array_equal(back.data, labels.data)


def test_wide_labels_use_int16(tmp_path):
    labels = LabelMap(np.array([[0, 300], [1, 2]]), 300)
    data, _ = read_array(write_volume(tmp_path / "l.nii", labels))
    assert data.dtype == np.int16
    np.testing.assert_array_equal(data, labels.data)


def test_nifti_header_fields(tmp_path, rng):
    # decode the header independently with struct at the NIfTI-1 offsets
    v = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), spacing=(1.5, 2.0, 0.5))
    raw = (write_volume(tmp_path / "v.nii", v)).read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 3, 4, 5)
    assert struct.unpack_from("<h", raw, 70)[0] == 16  # float32
    assert struct.unpack_from("<8f", raw, 76)[1:4] == (1.5, 2.0, 0.5)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert raw[344:348] == b"n+1\x00"
    assert len(raw) == 352 + 3 * 4 * 5 * 4
    # x varies fastest on disk
    first = np.frombuffer(raw, "<f4", count=2, offset=352)
    assert first[0] == v.data[0, 0, 0] and first[1] == v.data[1, 0, 0]


def test_bad_nifti_magic(tmp_path, rng):
    path = write_volume(tmp_path / "v.nii", Volume(rng.normal(size=(4, 4, 4)).astype(np.float32)))
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"ni1\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_volume(path)


def test_unsupported_nifti_datatype(tmp_path, rng):
    path = write_volume(tmp_path / "v.nii", Volume(rng.normal(size=(4, 4, 4)).astype(np.float32)))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<h", raw, 70, 32)  # complex64
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedError):
        read_volume(path)


@pytest.mark.parametrize("ext", FORMATS)
def test_truncated_file(tmp_path, rng, ext):
    path = write_volume(tmp_path / f"v.{ext}", Volume(rng.normal(size=(4, 4, 4)).astype(np.float32)))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        read_volume(path)


def test_pvol_bad_header(tmp_path):
    path = tmp_path / "v.pvol"
    path.write_bytes(b"PVOL2 float32 1 4 1.0\n" + bytes(16))
    with pytest.raises(FormatError):
        read_volume(path)
    path.write_bytes(b"PVOL1 complex64 1 4 1.0\n" + bytes(32))
    with pytest.raises(UnsupportedError):
        read_volume(path)


def test_unknown_extension(tmp_path):
    with pytest.raises(UnsupportedError):
        write_volume(tmp_path / "v.mha", Volume(np.zeros((2, 2))))


def test_label_read_rejects_float(tmp_path, rng):
    path = write_volume(tmp_path / "v.pvol", Volume(rng.normal(size=(2, 2))))
    with pytest.raises(FormatError):
        read_labelmap(path)
