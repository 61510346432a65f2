import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petseg.errors import (
    IoFailure,
    LossyWriteRefused,
    MalformedHeader,
    NotThreeDimensional,
    TruncatedData,
    UnsupportedDatatype,
)
from petseg.nifti_io import encode_nifti, nifti_exists, parse_header, read_nifti, write_nifti
from petseg.volume import Volume3D


def _patch(raw: bytes, offset: int, fmt: str, *values) -> bytes:
    buf = bytearray(raw)
    struct.pack_into(fmt, buf, offset, *values)
    return bytes(buf)


def test_roundtrip_small_ramp(tmp_path):
    vol = Volume3D(np.arange(64, dtype=float).reshape(4, 4, 4), spacing=(1, 1, 1))
    write_nifti(vol, tmp_path / "a.nii")
    back = read_nifti(tmp_path / "a.nii")
    assert back == vol
    assert back.data[1, 2, 3] == vol.data[1, 2, 3]


def test_float64_bit_exact(tmp_path):
    vol = Volume3D(np.array([-1.0, 0.0, 1.0, 1 / 3, -0.0, 5e-324] * 4).reshape(2, 3, 4), spacing=(0.5, 2, 3))
    write_nifti(vol, tmp_path / "f.nii.gz")
    back = read_nifti(tmp_path / "f.nii.gz")
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == (0.5, 2.0, 3.0)


def test_mask_uint8_is_binary(tmp_path):
    m = (np.arange(27).reshape(3, 3, 3) % 4 == 0).astype(float)
    write_nifti(Volume3D(m, spacing=(1, 1, 1), binary=True), tmp_path / "m.nii.gz", "uint8")
    back = read_nifti(tmp_path / "m.nii.gz")
    assert set(np.unique(back.data)) == {0.0, 1.0}
    np.testing.assert_array_equal(back.data, m)


def test_ct_int16_exact(tmp_path, rng):
    ct = rng.integers(-1024, 1025, size=(5, 6, 7)).astype(float)
    write_nifti(Volume3D(ct, spacing=(1, 1, 2)), tmp_path / "ct.nii.gz", "int16")
    back = read_nifti(tmp_path / "ct.nii.gz")
    assert np.array_equal(back.data, ct)


def test_slope_intercept_applied(tmp_path):
    raw = encode_nifti(Volume3D(np.full((2, 2, 2), 3.0), spacing=(1, 1, 1)), "int16")
    raw = _patch(raw, 112, "<ff", 2.0, 1.0)
    (tmp_path / "s.nii").write_bytes(raw)
    assert np.all(read_nifti(tmp_path / "s.nii").data == 7.0)


def test_zero_slope_means_unscaled(tmp_path):
    raw = encode_nifti(Volume3D(np.full((2, 2, 2), 3.0), spacing=(1, 1, 1)), "int16")
    raw = _patch(raw, 112, "<ff", 0.0, 5.0)
    (tmp_path / "z.nii").write_bytes(raw)
    assert np.all(read_nifti(tmp_path / "z.nii").data == 3.0)


def test_gzip_detected_by_content_not_name(tmp_path):
    vol = Volume3D(np.arange(8.0).reshape(2, 2, 2), spacing=(1, 1, 1))
    (tmp_path / "plain_name.nii").write_bytes(gzip.compress(encode_nifti(vol)))
    assert read_nifti(tmp_path / "plain_name.nii") == vol


def test_fortran_order_on_disk():
    vol = Volume3D(np.arange(24.0).reshape(2, 3, 4), spacing=(1, 1, 1))
    raw = encode_nifti(vol, "float64")
    first = np.frombuffer(raw, "<f8", count=3, offset=352)
    # x varies fastest
    assert first.tolist() == [vol.data[0, 0, 0], vol.data[1, 0, 0], vol.data[0, 1, 0]]


def test_gzip_output_is_deterministic(tmp_path):
    vol = Volume3D(np.arange(27.0).reshape(3, 3, 3), spacing=(1, 1, 1))
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_origin_and_orientation_carried(tmp_path):
    vol = Volume3D(np.zeros((3, 3, 3)), spacing=(2, 2, 2), origin=(-10.0, 4.5, 7.0))
    write_nifti(vol, tmp_path / "o.nii")
    back = read_nifti(tmp_path / "o.nii")
    assert back.origin == (-10.0, 4.5, 7.0)
    # rewriting keeps the header geometry fields as read
    write_nifti(back, tmp_path / "o2.nii")
    again = read_nifti(tmp_path / "o2.nii")
    assert again.orientation == back.orientation


@pytest.mark.parametrize("name", ["nibabel_ct_int16.nii.gz", "nibabel_pet_float32.nii", "nibabel_pet_float32_be.nii"])
def test_third_party_reference_files(data_dir, name):
    spots = json.loads((data_dir / "nibabel_spots.json").read_text())[name]
    vol = read_nifti(data_dir / name)
    assert list(vol.shape) == spots["shape"]
    np.testing.assert_allclose(vol.spacing, spots["zooms"], rtol=0, atol=1e-6)
    for (i, j, k), value in spots["values"]:
        assert vol.data[i, j, k] == pytest.approx(value, rel=0, abs=1e-6)
    np.testing.assert_allclose(vol.origin, (-120.5, -98.25, 40.0), rtol=0, atol=1e-6)


def test_big_endian_header_detected(data_dir):
    raw = (data_dir / "nibabel_pet_float32_be.nii").read_bytes()
    assert parse_header(raw).byteorder == ">"


def test_bad_magic(tmp_path):
    raw = bytearray(encode_nifti(Volume3D(np.zeros((2, 2, 2)), spacing=(1, 1, 1))))
    raw[344:348] = b"ni1\x00"
    (tmp_path / "x.nii").write_bytes(bytes(raw))
    with pytest.raises(MalformedHeader):
        read_nifti(tmp_path / "x.nii")


def test_short_file(tmp_path):
    (tmp_path / "x.nii").write_bytes(b"\x00" * 100)
    with pytest.raises(MalformedHeader):
        read_nifti(tmp_path / "x.nii")


def test_truncated_voxels(tmp_path):
    raw = encode_nifti(Volume3D(np.zeros((4, 4, 4)), spacing=(1, 1, 1)))
    (tmp_path / "x.nii").write_bytes(raw[:-8])
    with pytest.raises(TruncatedData):
        read_nifti(tmp_path / "x.nii")


def test_unsupported_datatype(tmp_path):
    raw = encode_nifti(Volume3D(np.zeros((2, 2, 2)), spacing=(1, 1, 1)), "uint8")
    raw = _patch(raw, 70, "<h", 128)  # RGB24
    (tmp_path / "x.nii").write_bytes(raw)
    with pytest.raises(UnsupportedDatatype):
        read_nifti(tmp_path / "x.nii")
    with pytest.raises(UnsupportedDatatype):
        encode_nifti(Volume3D(np.zeros((2, 2, 2)), spacing=(1, 1, 1)), "complex64")


def test_four_dimensional_rejected_unless_singleton(tmp_path):
    raw = encode_nifti(Volume3D(np.zeros((2, 2, 2)), spacing=(1, 1, 1)))
    (tmp_path / "one.nii").write_bytes(_patch(raw, 40, "<hhhhh", 4, 2, 2, 2, 1))
    assert read_nifti(tmp_path / "one.nii").shape == (2, 2, 2)
    raw4 = _patch(raw, 40, "<hhhhh", 4, 2, 2, 1, 2)
    (tmp_path / "two.nii").write_bytes(raw4)
    with pytest.raises(NotThreeDimensional):
        read_nifti(tmp_path / "two.nii")


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        read_nifti(tmp_path / "absent.nii")


@pytest.mark.parametrize(
    "values,dtype",
    [([0.0, 256.0], "uint8"), ([0.5, 1.0], "int16"), ([np.nan, 0.0], "int32"), ([-1.0, 1.0], "uint8"), ([1e39, 0.0], "float32")],
)
def test_lossy_writes_refused(tmp_path, values, dtype):
    data = np.resize(np.array(values), (2, 1, 1))
    with pytest.raises(LossyWriteRefused):
        write_nifti(Volume3D(data, spacing=(1, 1, 1)), tmp_path / "x.nii", dtype)


def test_nifti_exists(tmp_path):
    assert nifti_exists(tmp_path / "case") is None
    (tmp_path / "case.nii").write_bytes(b"")
    assert nifti_exists(tmp_path / "case") == tmp_path / "case.nii"
    (tmp_path / "case.nii.gz").write_bytes(b"")
    assert nifti_exists(tmp_path / "case") == tmp_path / "case.nii.gz"


@settings(max_examples=30, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 6)] * 3),
    spacing=st.tuples(*[st.floats(0.1, 5.0)] * 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, shape, spacing, seed):
    data = np.random.default_rng(seed).normal(size=shape) * 1e3
    vol = Volume3D(data, spacing=spacing)
    path = tmp_path_factory.mktemp("rt") / "v.nii.gz"
    write_nifti(vol, path)
    back = read_nifti(path)
    assert back.data.tobytes() == vol.data.tobytes()
    # pixdim is float32 on disk
    np.testing.assert_allclose(back.spacing, np.float32(spacing), rtol=0, atol=0)
