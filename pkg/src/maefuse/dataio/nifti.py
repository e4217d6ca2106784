"""Minimal single-file NIfTI-1 reader and writer (uncompressed .nii)."""

from __future__ import annotations

import struct

import numpy as np

from ..errors import NiftiError
from .volume import Volume

HEADER_SIZE = 348
MIN_FILE_SIZE = 352
MAGIC = b"n+1\x00"

# datatype code -> numpy base type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    16: np.float32,
    64: np.float64,
}


def parse_nifti1(raw: bytes) -> Volume:
    """Decode a single-file NIfTI-1 byte stream into a ``Volume``.

    Only the first three spatial dims are kept; for 4D data the first frame
    is returned. Scaling ``value * scl_slope + scl_inter`` is applied when
    ``scl_slope`` is non-zero.
    """
    raw = bytes(raw)
    if len(raw) < MIN_FILE_SIZE:
        raise NiftiError(f"not NIfTI-1: stream has {len(raw)} bytes, need at least {MIN_FILE_SIZE}")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise NiftiError("not NIfTI-1: sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != MAGIC:
        raise NiftiError(f"not NIfTI-1: magic {raw[344:348]!r} != {MAGIC!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)

    if dim[0] < 3 or dim[0] > 7:
        raise NiftiError(f"NIfTI-1 dimensionality dim[0]={dim[0]} is not a 3D-or-higher volume")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise NiftiError(f"NIfTI-1 spatial dims must be >= 1, got {dims}")
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported NIfTI-1 datatype code {datatype}")
    voxel = tuple(float(p) for p in pixdim[1:4])
    if min(voxel) <= 0:
        raise NiftiError(f"NIfTI-1 pixdim[1..3] must be positive, got {voxel}")

    dt = np.dtype(DATATYPES[datatype]).newbyteorder(endian)
    offset = max(int(vox_offset), MIN_FILE_SIZE)
    count = dims[0] * dims[1] * dims[2]
    expected = count * dt.itemsize
    actual = len(raw) - offset
    if actual < expected:
        raise NiftiError(f"truncated NIfTI-1 data section: expected {expected} bytes, got {actual}")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    out_dtype = np.float64 if datatype == 64 else np.float32
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        values = values.astype(np.float64) * float(slope) + float(inter)
    data = np.asarray(values, dtype=out_dtype).reshape(dims, order="F")
    if not np.isfinite(data).all():
        raise NiftiError("NIfTI-1 payload contains NaN or infinite voxels")
    return Volume(data, voxel_size=voxel)


def write_nifti1(v: Volume, scl_slope: float = 0.0, scl_inter: float = 0.0, endian: str = "<") -> bytes:
    """Serialize a volume as a minimal single-file NIfTI-1 stream.

    float64 volumes are written with datatype 64, everything else as
    float32 (datatype 16).
    """
    datatype = 64 if v.data.dtype == np.float64 else 16
    dt = np.dtype(DATATYPES[datatype]).newbyteorder(endian)
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, dt.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *v.voxel_size, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(endian + "f", hdr, 108, float(MIN_FILE_SIZE))
    struct.pack_into(endian + "2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = MAGIC
    payload = v.flat().astype(dt).tobytes()
    return bytes(hdr) + b"\x00" * 4 + payload
