"""Single-file NIfTI-1 reader and writer (``.nii`` and ``.nii.gz``).

Only 3-D volumes are handled; a 4-D file whose trailing axes are all
singletons is squeezed.  Both byte orders are read, little-endian is
written.
"""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from petseg.errors import (
    IoFailure,
    LossyWriteRefused,
    MalformedHeader,
    NotThreeDimensional,
    TruncatedData,
    UnsupportedDatatype,
)
from petseg.volume import Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_PREFIX = b"\x1f\x8b"

# datatype code -> numpy element type (byte order applied at read time)
DATATYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_NAMES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
_HEADER_LE = np.dtype([(f[0], "<" + f[1], *f[2:]) if f[1][0] != "S" else f for f in _HEADER_FIELDS])
_HEADER_BE = _HEADER_LE.newbyteorder(">")
assert _HEADER_LE.itemsize == HEADER_SIZE

_ORIENTATION_KEYS = (
    "qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
    "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y", "srow_z",
)


@dataclass(frozen=True)
class NiftiHeader:
    """The subset of the NIfTI-1 header the toolkit interprets."""

    dims: tuple[int, ...]
    pixdim: tuple[float, ...]
    datatype_code: int
    scl_slope: float
    scl_inter: float
    vox_offset: int
    byteorder: str
    orientation: dict


def _load_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:2] == GZIP_PREFIX:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedData(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"file holds {len(raw)} bytes, a header needs {HEADER_SIZE}")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HEADER_LE)[0]
    byteorder = "<"
    if not 1 <= hdr["dim"][0] <= 7:
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HEADER_BE)[0]
        byteorder = ">"
        if not 1 <= hdr["dim"][0] <= 7:
            raise MalformedHeader("dim[0] is outside 1..7 in either byte order")
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        raise MalformedHeader(f"sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected {HEADER_SIZE}")
    if bytes(raw[344:348]) != MAGIC:
        raise MalformedHeader(f"bad magic {bytes(raw[344:348])!r}; only single-file NIfTI-1 is read")

    ndim = int(hdr["dim"][0])
    dims = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    orientation = {}
    for key in _ORIENTATION_KEYS:
        val = hdr[key]
        orientation[key] = [float(v) for v in val] if np.ndim(val) else val.item()
    orientation["qfac"] = float(hdr["pixdim"][0])
    orientation["xyzt_units"] = int(hdr["xyzt_units"])
    return NiftiHeader(
        dims=dims,
        pixdim=tuple(float(p) for p in hdr["pixdim"][1 : ndim + 1]),
        datatype_code=code,
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        vox_offset=int(hdr["vox_offset"]),
        byteorder=byteorder,
        orientation=orientation,
    )


def _origin_from(orientation: dict) -> tuple[float, float, float]:
    if orientation["sform_code"] > 0:
        return tuple(orientation[k][3] for k in ("srow_x", "srow_y", "srow_z"))
    if orientation["qform_code"] > 0:
        return tuple(orientation[k] for k in ("qoffset_x", "qoffset_y", "qoffset_z"))
    return (0.0, 0.0, 0.0)


def read_nifti(path) -> Volume3D:
    """Read a NIfTI-1 file into a :class:`Volume3D`.

    Stored values are mapped through ``v * scl_slope + scl_inter`` whenever
    the slope is non-zero.  Axis order is preserved as stored.
    """
    raw = _load_bytes(path)
    hdr = parse_header(raw)

    dims = hdr.dims
    if len(dims) < 3 or any(d != 1 for d in dims[3:]):
        raise NotThreeDimensional(f"{path}: dims {dims} are not a 3-D volume")
    shape = dims[:3]
    if any(d < 1 for d in shape):
        raise MalformedHeader(f"{path}: non-positive dimension in {shape}")
    spacing = hdr.pixdim[:3]
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise MalformedHeader(f"{path}: pixdim {spacing} must be positive")

    dtype = DATATYPES[hdr.datatype_code].newbyteorder(hdr.byteorder)
    count = int(np.prod(shape))
    start = hdr.vox_offset
    end = start + count * dtype.itemsize
    if start < HEADER_SIZE or len(raw) < end:
        raise TruncatedData(f"{path}: voxel block needs bytes {start}..{end}, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = flat.reshape(shape, order="F").astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        if hdr.scl_slope != 1.0 or hdr.scl_inter != 0.0:
            data = data * hdr.scl_slope + hdr.scl_inter
    return Volume3D(
        data=np.ascontiguousarray(data),
        spacing=spacing,
        origin=_origin_from(hdr.orientation),
        orientation=hdr.orientation,
    )


def _check_representable(data: np.ndarray, dtype: np.dtype):
    if dtype.kind == "f":
        if dtype.itemsize == 4:
            finite = data[np.isfinite(data)]
            if finite.size and np.abs(finite).max() > np.finfo(np.float32).max:
                raise LossyWriteRefused("values overflow float32")
        return
    info = np.iinfo(dtype)
    if not np.all(np.isfinite(data)):
        raise LossyWriteRefused(f"non-finite values cannot be stored as {dtype}")
    if data.size and (data.min() < info.min or data.max() > info.max):
        raise LossyWriteRefused(f"values outside the {dtype} range")
    if np.any(data != np.round(data)):
        raise LossyWriteRefused(f"non-integer values cannot be stored as {dtype}")


def encode_nifti(vol: Volume3D, datatype: str = "float64") -> bytes:
    """Serialize a volume to uncompressed NIfTI-1 bytes."""
    if datatype not in DATATYPE_NAMES:
        raise UnsupportedDatatype(f"datatype {datatype!r}; choose from {sorted(DATATYPE_NAMES)}")
    code = DATATYPE_NAMES[datatype]
    dtype = DATATYPES[code].newbyteorder("<")
    _check_representable(vol.data, dtype)

    hdr = np.zeros((), dtype=_HEADER_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][:4] = (3, *vol.shape)
    hdr["dim"][4:] = 1
    hdr["datatype"] = code
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"][1:4] = vol.spacing
    hdr["pixdim"][4:] = 1.0
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = MAGIC

    orient = vol.orientation
    if orient is not None:
        for key in _ORIENTATION_KEYS:
            hdr[key] = orient[key]
        hdr["pixdim"][0] = orient.get("qfac", 1.0) or 1.0
        hdr["xyzt_units"] = orient.get("xyzt_units", 2)
    else:
        ox, oy, oz = vol.origin
        sx, sy, sz = vol.spacing
        hdr["pixdim"][0] = 1.0
        hdr["xyzt_units"] = 2  # millimetres
        hdr["qform_code"] = 1
        hdr["sform_code"] = 1
        hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = ox, oy, oz
        hdr["srow_x"] = (sx, 0.0, 0.0, ox)
        hdr["srow_y"] = (0.0, sy, 0.0, oy)
        hdr["srow_z"] = (0.0, 0.0, sz, oz)

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))  # empty extension flag
    buf.write(vol.data.astype(dtype).tobytes(order="F"))
    return buf.getvalue()


def write_nifti(vol: Volume3D, path, datatype: str = "float64"):
    """Write ``vol`` as a single-file NIfTI-1, gzip-compressed for ``.gz`` paths.

    Integral datatypes refuse values they cannot hold exactly. The gzip
    stream carries no timestamp, so identical volumes give identical bytes.
    """
    payload = encode_nifti(vol, datatype)
    path = Path(path)
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as fh, gzip.GzipFile(
                filename="", mode="wb", fileobj=fh, mtime=0, compresslevel=6
            ) as gz:
                gz.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def nifti_exists(stem: os.PathLike | str) -> Path | None:
    """Return ``stem.nii.gz`` or ``stem.nii`` if either exists."""
    stem = Path(stem)
    for suffix in (".nii.gz", ".nii"):
        cand = stem.with_name(stem.name + suffix)
        if cand.exists():
            return cand
    return None
