"""Minimal single-file NIfTI-1 reader/writer (.nii and .nii.gz)."""

from __future__ import annotations

import gzip
import os

import numpy as np

from .volume import ValidationError, Volume3D, check_finite


class NiftiFormatError(ValidationError):
    """Header is not a valid single-file NIfTI-1 header."""


class UnsupportedDatatypeError(NiftiFormatError):
    pass


HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_DTYPE = np.dtype(
    [
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
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy scalar type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> np.ndarray:
    """Decode the first 348 bytes, detecting byte order from ``sizeof_hdr``."""
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in "<>":
        dt = HEADER_DTYPE.newbyteorder(order)
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=dt)[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"])
    if magic.rstrip(b"\x00") != b"n+1":
        if magic.rstrip(b"\x00") == b"ni1":
            raise NiftiFormatError("two-file NIfTI (.hdr/.img) is not supported")
        raise NiftiFormatError(f"bad NIfTI-1 magic {magic!r}")
    return hdr


def _byteorder(hdr) -> str:
    bo = hdr.dtype.fields["sizeof_hdr"][0].byteorder
    if bo in "<>":
        return bo
    return "<" if np.little_endian else ">"


def quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    zooms[zooms == 0] = 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def header_affine(hdr) -> np.ndarray:
    """sform when sform_code > 0, else qform, else diag(pixdim)."""
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        return quaternion_affine(hdr)
    zooms = np.asarray(hdr["pixdim"][1:4], dtype=np.float64)
    zooms[zooms == 0] = 1.0
    return np.diag([*zooms, 1.0])


def read_nifti(path) -> Volume3D:
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    order = _byteorder(hdr)
    dim = [int(x) for x in hdr["dim"]]
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise NiftiFormatError(f"need a 3D volume, header says {ndim} dimensions")
    if any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiFormatError(f"only 3D volumes are supported, got dim={dim[1:ndim + 1]}")
    shape = tuple(dim[1:4])
    if min(shape) < 1:
        raise NiftiFormatError(f"non-positive dimension in {shape}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {code}")
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)

    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    payload = raw[offset : offset + nbytes]
    if len(payload) != nbytes:
        raise NiftiFormatError(f"payload truncated: expected {nbytes} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if code in (16, 64) and slope in (0.0, 1.0) and inter == 0.0:
        data = data.astype(dtype.newbyteorder("="))
    else:
        data = data.astype(np.float64)
        if slope != 0.0 and np.isfinite(slope):
            data = data * slope + (inter if np.isfinite(inter) else 0.0)
    check_finite(data, f"NIfTI payload of {path}")
    hdr_bytes = hdr.astype(HEADER_DTYPE.newbyteorder("<")).tobytes()
    return Volume3D(np.ascontiguousarray(data), header_affine(hdr), header=hdr_bytes)


def _build_header(vol: Volume3D) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    if vol.header is not None and len(vol.header) == HEADER_SIZE:
        try:
            hdr = parse_header(vol.header).astype(HEADER_DTYPE.newbyteorder("<"))
        except NiftiFormatError:
            pass
    hdr = np.array(hdr)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *vol.shape, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = vol.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["qform_code"] = 0
    hdr["sform_code"] = 1
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    # mm + s
    hdr["xyzt_units"] = 2 | 8
    hdr["magic"] = b"n+1\x00"
    return hdr


def write_nifti(vol: Volume3D, path) -> None:
    """Write ``vol`` as little-endian float32 with sform = affine."""
    data = check_finite(vol.data, "volume to write")
    hdr = _build_header(vol)
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    blob = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    if str(path).endswith(".gz"):
        # fixed mtime and empty name keep gzip output byte-identical
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
            f.write(blob)
    else:
        with open(path, "wb") as f:
            f.write(blob)
