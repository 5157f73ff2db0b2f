import gzip
import struct

import numpy as np
import pytest

from voxelage.nifti import NiftiFormatError, UnsupportedDatatypeError, read_nifti, write_nifti
from voxelage.volume import ValidationError, Volume3D


def handmade_nifti(data, datatype, bitpix, order="<", affine=None, slope=0.0, inter=0.0,
                   qform=None, sizeof_hdr=348, magic=b"n+1\x00"):
    """Build a single-file NIfTI-1 blob field by field with ``struct``."""
    e = order
    hdr = bytearray(348)
    struct.pack_into(e + "i", hdr, 0, sizeof_hdr)
    dims = [3, *data.shape, 1, 1, 1, 1]
    struct.pack_into(e + "8h", hdr, 40, *dims)
    struct.pack_into(e + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(e + "8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into(e + "fff", hdr, 108, 352.0, slope, inter)
    if affine is not None:
        struct.pack_into(e + "hh", hdr, 252, 0, 1)  # qform_code, sform_code
        struct.pack_into(e + "4f", hdr, 280, *affine[0])
        struct.pack_into(e + "4f", hdr, 296, *affine[1])
        struct.pack_into(e + "4f", hdr, 312, *affine[2])
    if qform is not None:
        (b, c, d), offset, pix, qfac = qform
        struct.pack_into(e + "hh", hdr, 252, 1, 0)
        struct.pack_into(e + "6f", hdr, 256, b, c, d, *offset)
        struct.pack_into(e + "8f", hdr, 76, qfac, *pix, 0, 0, 0, 0)
    hdr[344:348] = magic
    payload = np.asarray(data).astype(np.dtype(data.dtype).newbyteorder(e)).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + payload


def test_reads_handmade_little_endian(tmp_path):
    data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    aff = np.array([[2, 0, 0, -10], [0, 2, 0, -20], [0, 0, 3, 5], [0, 0, 0, 1]], dtype=np.float64)
    p = tmp_path / "a.nii"
    p.write_bytes(handmade_nifti(data, 16, 32, affine=aff))
    vol = read_nifti(p)
    assert vol.shape == (4, 4, 4)
    np.testing.assert_array_equal(vol.data, data)
    np.testing.assert_array_equal(vol.affine, aff)


def test_reads_big_endian(tmp_path):
    data = np.linspace(-1, 1, 2 * 3 * 5, dtype=np.float32).reshape(2, 3, 5)
    p = tmp_path / "be.nii"
    p.write_bytes(handmade_nifti(data, 16, 32, order=">"))
    np.testing.assert_array_equal(read_nifti(p).data, data)


def test_int16_with_scaling(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    p = tmp_path / "s.nii"
    p.write_bytes(handmade_nifti(data, 4, 16, slope=0.5, inter=10.0))
    np.testing.assert_allclose(read_nifti(p).data, data * 0.5 + 10.0)


def test_qform_quaternion(tmp_path):
    # 180 degrees about z: (b, c, d) = (0, 0, 1)
    data = np.zeros((2, 2, 2), np.float32)
    p = tmp_path / "q.nii"
    p.write_bytes(handmade_nifti(data, 16, 32, qform=((0.0, 0.0, 1.0), (1.0, 2.0, 3.0), (2.0, 3.0, 4.0), 1.0)))
    expected = np.array([[-2, 0, 0, 1], [0, -3, 0, 2], [0, 0, 4, 3], [0, 0, 0, 1]], dtype=float)
    np.testing.assert_allclose(read_nifti(p).affine, expected, atol=1e-12)


def test_bad_sizeof_hdr(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(handmade_nifti(np.zeros((2, 2, 2), np.float32), 16, 32, sizeof_hdr=100))
    with pytest.raises(NiftiFormatError):
        read_nifti(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(handmade_nifti(np.zeros((2, 2, 2), np.float32), 16, 32, magic=b"xyz\x00"))
    with pytest.raises(NiftiFormatError):
        read_nifti(p)


def test_unsupported_datatype(tmp_path):
    data = np.zeros((2, 2, 2), np.uint16)
    p = tmp_path / "u16.nii"
    p.write_bytes(handmade_nifti(data, 512, 16))
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.nii"
    p.write_bytes(handmade_nifti(np.zeros((4, 4, 4), np.float32), 16, 32)[:-10])
    with pytest.raises(NiftiFormatError):
        read_nifti(p)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_lossless(tmp_path, suffix):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(5, 6, 7)).astype(np.float32)
    aff = np.array([[0, -1.5, 0, 3], [1.5, 0, 0, -4], [0, 0, 2.5, 7], [0, 0, 0, 1]])
    p = tmp_path / f"r{suffix}"
    write_nifti(Volume3D(data, aff), p)
    back = read_nifti(p)
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == data.tobytes()
    np.testing.assert_array_equal(back.affine, aff.astype(np.float32))


def test_zero_volume_file_size(tmp_path):
    p = tmp_path / "z.nii"
    write_nifti(Volume3D(np.zeros((8, 8, 8), np.float32)), p)
    assert p.stat().st_size == 352 + 2048


def test_written_header_fields(tmp_path):
    p = tmp_path / "h.nii"
    write_nifti(Volume3D(np.zeros((3, 4, 5), np.float32)), p)
    raw = p.read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 3, 4, 5)
    assert struct.unpack_from("<hh", raw, 70) == (16, 32)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<hh", raw, 252) == (0, 1)
    assert raw[344:348] == b"n+1\x00"


def test_gzip_is_deterministic(tmp_path):
    vol = Volume3D(np.ones((4, 4, 4), np.float32))
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert len(gzip.decompress((tmp_path / "a.nii.gz").read_bytes())) == 352 + 256


def test_nan_rejected_on_write(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        write_nifti(Volume3D(data), tmp_path / "x.nii")
    assert not (tmp_path / "x.nii").exists()


def test_nan_rejected_on_read(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    data[1, 1, 1] = np.nan
    p = tmp_path / "nan.nii"
    p.write_bytes(handmade_nifti(data, 16, 32))
    with pytest.raises(ValidationError):
        read_nifti(p)


def test_interop_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    data = np.random.default_rng(1).random((3, 4, 5)).astype(np.float32)
    aff = np.diag([2.0, 3.0, 4.0, 1.0])
    write_nifti(Volume3D(data, aff), tmp_path / "n.nii.gz")
    img = nib.load(str(tmp_path / "n.nii.gz"))
    np.testing.assert_array_equal(np.asarray(img.dataobj), data)
    np.testing.assert_allclose(img.affine, aff)
