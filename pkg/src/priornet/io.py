"""Volume file I/O.

Two formats are supported, chosen by file extension:

``.nii``
    Uncompressed single-file NIfTI-1, little-endian, 348-byte header followed
    by a 4-byte extension flag (data at offset 352). Data are stored x-fastest.
    Spacing is kept in ``pixdim`` as float32.

``.pvol``
    ``PVOL1 <dtype> <ndim> <dims...> <spacing...>`` on one ASCII line, then the
    raw little-endian array in C order. Spacing is written with ``repr`` so it
    round-trips exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedError
from .volume import LabelMap, Volume

NIFTI_CODES = {
    np.dtype("uint8"): 2,
    np.dtype("int16"): 4,
    np.dtype("int32"): 8,
    np.dtype("float32"): 16,
    np.dtype("float64"): 64,
}
NIFTI_DTYPES = {code: dt for dt, code in NIFTI_CODES.items()}
PVOL_DTYPES = {dt.name: dt for dt in NIFTI_CODES}

HEADER_SIZE = 348
VOX_OFFSET = 352


def _format_of(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".nii":
        return "nifti"
    if suffix == ".pvol":
        return "pvol"
    raise UnsupportedError(f"unsupported volume file extension {suffix!r} ({path})")


def _storage_array(v) -> np.ndarray:
    data = np.asarray(v.data)
    if isinstance(v, LabelMap):
        if data.min() >= 0 and data.max() <= 255:
            return data.astype(np.uint8)
        return data.astype(np.int16)
    if data.dtype not in NIFTI_CODES:
        if np.issubdtype(data.dtype, np.floating):
            return data.astype(np.float32)
        raise UnsupportedError(f"unsupported data type {data.dtype}")
    return data


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------


def _nifti_header(data: np.ndarray, spacing) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38:39] = b"r"
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, NIFTI_CODES[data.dtype])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - data.ndim)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[123] = 2  # xyzt_units: mm
    # sform: diagonal voxel-to-mm scaling
    sp = list(spacing) + [1.0] * (3 - len(spacing))
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<4f", hdr, 280, sp[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sp[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sp[2], 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write_nifti(path, data: np.ndarray, spacing):
    with open(path, "wb") as fh:
        fh.write(_nifti_header(data, spacing))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(data.astype(data.dtype.newbyteorder("<")).tobytes(order="F"))


def _read_nifti(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(f"{path}: bad sizeof_hdr {sizeof_hdr} (big-endian files are not supported)")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: bad NIfTI magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    while len(shape) > 2 and shape[-1] == 1:
        shape = shape[:-1]
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = NIFTI_DTYPES[code].newbyteorder("<")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)
    offset = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise FormatError(f"{path}: truncated data ({len(raw) - offset} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(p) for p in pixdim[1:len(shape) + 1])
    return data, spacing


# ---------------------------------------------------------------------------
# PVOL1
# ---------------------------------------------------------------------------


def _write_pvol(path, data: np.ndarray, spacing):
    fields = ["PVOL1", data.dtype.name, str(data.ndim)]
    fields += [str(n) for n in data.shape]
    fields += [repr(float(s)) for s in spacing]
    with open(path, "wb") as fh:
        fh.write((" ".join(fields) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())


def _read_pvol(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0 or not raw.startswith(b"PVOL1 "):
        raise FormatError(f"{path}: missing PVOL1 header line")
    fields = raw[:end].decode("ascii", errors="replace").split()
    dtype = PVOL_DTYPES.get(fields[1]) if len(fields) > 1 else None
    if dtype is None:
        raise UnsupportedError(f"{path}: unsupported dtype {fields[1:2]}")
    try:
        ndim = int(fields[2])
        shape = tuple(int(x) for x in fields[3:3 + ndim])
        spacing = tuple(float(x) for x in fields[3 + ndim:3 + 2 * ndim])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed PVOL1 header: {exc}") from None
    if len(shape) != ndim or len(spacing) != ndim or len(fields) != 3 + 2 * ndim:
        raise FormatError(f"{path}: malformed PVOL1 header")
    count = int(np.prod(shape))
    body = raw[end + 1:]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: expected {count * dtype.itemsize} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dtype.newbyteorder("<")).reshape(shape).astype(dtype)
    return data, spacing


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def write_volume(path, v) -> Path:
    """Write a ``Volume`` or ``LabelMap``; format follows the file extension.

    Label maps are stored as uint8 (int16 if labels exceed 255).
    """
    path = Path(path)
    fmt = _format_of(path)
    data = _storage_array(v)
    if fmt == "nifti":
        if data.ndim > 3:
            raise UnsupportedError("only 2D and 3D NIfTI volumes are written")
        _write_nifti(path, data, v.spacing)
    else:
        _write_pvol(path, data, v.spacing)
    return path


def read_array(path):
    """Raw ``(array, spacing)`` pair from either format."""
    return _read_nifti(path) if _format_of(path) == "nifti" else _read_pvol(path)


def read_volume(path) -> Volume:
    data, spacing = read_array(path)
    return Volume(data, spacing)


def read_labelmap(path, num_classes: int | None = None) -> LabelMap:
    """Read a label map; ``num_classes`` defaults to the largest label present."""
    data, spacing = read_array(path)
    if not np.issubdtype(data.dtype, np.integer):
        raise FormatError(f"{path}: label maps must be stored with an integer data type")
    return LabelMap(data, num_classes, spacing)
