"""Minimal single-file NIfTI-1 reader/writer.

Covers the subset this project emits and consumes: 3D arrays in a
``.nii`` / ``.nii.gz`` single-file container, voxel spacing in the
``pixdim`` header fields, identity-oriented sform. Data is stored in
Fortran voxel order as the format requires.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352.0

# struct layout of the fixed 348-byte header, little-endian
_HDR_FMT = (
    "<i10s18sihcc8h3fhhhh8ffffhccffffii80s24shh3f3f12f16s4s"
)
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    1024: np.int64,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(Exception):
    """Raised for unreadable or unsupported NIfTI files."""


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read(path):
    """Read a NIfTI-1 file.

    Returns ``(data, spacing)`` where ``data`` keeps the on-disk dtype
    (after slope/intercept scaling, if any) and ``spacing`` is one pixdim
    entry per array axis.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"file not found: {path}")
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header in {path}")

    fields = struct.unpack(_HDR_FMT, raw[:HEADER_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        # try byte-swapped header
        fields = struct.unpack(_HDR_FMT.replace("<", ">"), raw[:HEADER_SIZE])
        if fields[0] != HEADER_SIZE:
            raise NiftiError(f"malformed header in {path} (sizeof_hdr={sizeof_hdr})")
        swapped = True
    else:
        swapped = False

    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope, scl_inter = fields[31], fields[32]
    magic = fields[-1]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"malformed header in {path} (bad magic {magic!r})")

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiError(f"malformed header in {path} (dim[0]={ndim})")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if datatype not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype} in {path}")
    dtype = np.dtype(_DTYPES[datatype])
    if swapped:
        dtype = dtype.newbyteorder(">")

    count = int(np.prod(shape))
    start = vox_offset if magic == b"n+1\x00" else 0
    buf = raw[start : start + count * dtype.itemsize]
    if len(buf) < count * dtype.itemsize:
        raise NiftiError(f"truncated data in {path}")
    data = np.frombuffer(buf, dtype=dtype).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("=")) if swapped else data.copy()

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter

    spacing = tuple(float(p) for p in pixdim[1 : 1 + ndim])
    return data, spacing


def write(path, data, spacing):
    """Write ``data`` (any supported dtype) with per-axis ``spacing``."""
    data = np.asarray(data)
    if data.dtype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    if len(spacing) != data.ndim:
        raise NiftiError(
            f"spacing has {len(spacing)} entries for {data.ndim}-d data"
        )

    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0] * (7 - data.ndim)
    # sform: axis-aligned scaling, zero origin
    srow = [0.0] * 12
    for i in range(min(data.ndim, 3)):
        srow[i * 4 + i] = float(spacing[i])

    header = struct.pack(
        _HDR_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0,
        _DTYPE_CODES[data.dtype],
        data.dtype.itemsize * 8,
        0,
        *pixdim,
        VOX_OFFSET,
        1.0, 0.0,
        0, b"\x00", b"\x02",  # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 1,  # qform off, sform on
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        *srow,
        b"",
        b"n+1\x00",
    )
    payload = header + b"\x00" * 4 + data.tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime so identical content gives identical files
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
