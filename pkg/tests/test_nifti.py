import gzip

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, strategies as st

from uhfsegkit.grid import VoxelGrid
from uhfsegkit.nifti import (
    DATATYPES,
    HEADER_DTYPE,
    NiftiFormatError,
    VOX_OFFSET,
    encode_nifti,
    load_nifti,
    make_header,
    save_nifti,
)

DTYPES = sorted({dt.str for dt in DATATYPES.values()})


def _affine():
    a = np.array([[0.0, -0.8, 0.0, 12.5], [0.0, 0.0, 1.2, -30.0], [-0.9, 0.0, 0.0, 7.25], [0, 0, 0, 1]])
    return a


def _random(dtype, shape=(5, 4, 3), seed=0):
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    if dt.kind == "f":
        return rng.standard_normal(shape).astype(dt)
    info = np.iinfo(dt)
    return rng.integers(info.min, info.max, shape, dtype=dt, endpoint=True)


def _write_scaled(path, raw, slope, inter):
    grid = VoxelGrid(raw, np.eye(4))
    hdr = make_header(grid)
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    path.write_bytes(hdr.tobytes() + b"\0" * 4 + raw.tobytes(order="F"))


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_every_dtype(tmp_path, dtype, suffix):
    g = VoxelGrid(_random(dtype), _affine())
    p = tmp_path / f"x{suffix}"
    save_nifti(g, p)
    assert (p.read_bytes()[:2] == b"\x1f\x8b") == suffix.endswith(".gz")
    back = load_nifti(p)
    assert back.data.dtype == g.data.dtype
    assert np.array_equal(back.data, g.data)
    assert np.allclose(back.affine, g.affine, atol=1e-6)


def test_small_float32_round_trip(tmp_path):
    g = VoxelGrid(np.arange(64, dtype=np.float32).reshape(4, 4, 4), np.eye(4))
    save_nifti(g, tmp_path / "a.nii")
    b = load_nifti(tmp_path / "a.nii")
    assert np.array_equal(b.data, g.data) and np.allclose(b.affine, g.affine, atol=1e-6)


def test_compress_flag_overrides_suffix(tmp_path):
    g = VoxelGrid(np.ones((2, 2, 2), np.uint8), np.eye(4))
    save_nifti(g, tmp_path / "a.nii", compress=True)
    assert (tmp_path / "a.nii").read_bytes()[:2] == b"\x1f\x8b"
    assert load_nifti(tmp_path / "a.nii") == g


def test_scaling_applied(tmp_path):
    raw = np.full((2, 2, 2), 3, np.int16)
    _write_scaled(tmp_path / "s.nii", raw, 2.0, 1.0)
    g = load_nifti(tmp_path / "s.nii")
    assert np.all(g.data == 7.0)


def test_zero_slope_means_unscaled(tmp_path):
    raw = np.full((2, 2, 2), 3, np.int16)
    _write_scaled(tmp_path / "s.nii", raw, 0.0, 5.0)
    g = load_nifti(tmp_path / "s.nii")
    assert g.data.dtype == np.int16 and np.all(g.data == 3)


def test_bad_magic(tmp_path):
    raw = bytearray(encode_nifti(VoxelGrid(np.zeros((2, 2, 2), np.uint8), np.eye(4))))
    raw[344:348] = b"xyz\0"
    (tmp_path / "m.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError, match="^malformed header"):
        load_nifti(tmp_path / "m.nii")


def test_truncated_payload(tmp_path):
    raw = encode_nifti(VoxelGrid(np.zeros((4, 4, 4), np.float32), np.eye(4)))
    (tmp_path / "t.nii").write_bytes(raw[:-10])
    with pytest.raises(NiftiFormatError, match="^truncated payload"):
        load_nifti(tmp_path / "t.nii")


def test_nifti2_rejected(tmp_path):
    (tmp_path / "n2.nii").write_bytes(np.int32(540).tobytes() + b"\0" * 600)
    with pytest.raises(NiftiFormatError, match="NIfTI-2"):
        load_nifti(tmp_path / "n2.nii")


def test_unsupported_datatype(tmp_path):
    raw = bytearray(encode_nifti(VoxelGrid(np.zeros((2, 2, 2), np.uint8), np.eye(4))))
    hdr = np.frombuffer(bytes(raw[:348]), HEADER_DTYPE)[0].copy()
    hdr["datatype"] = 32  # complex64
    raw[:348] = hdr.tobytes()
    (tmp_path / "c.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError, match="^unsupported datatype"):
        load_nifti(tmp_path / "c.nii")


def test_big_endian_file(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    hdr = make_header(VoxelGrid(data, _affine())).astype(HEADER_DTYPE.newbyteorder(">"))
    (tmp_path / "be.nii").write_bytes(hdr.tobytes() + b"\0" * 4 + data.astype(">i2").tobytes(order="F"))
    g = load_nifti(tmp_path / "be.nii")
    assert np.array_equal(g.data, data)
    assert np.allclose(g.affine, _affine(), atol=1e-6)


def test_gzip_output_is_deterministic(tmp_path):
    g = VoxelGrid(_random("<f4"), _affine())
    save_nifti(g, tmp_path / "a.nii.gz")
    save_nifti(g, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes()) == encode_nifti(g)


# independent reader/writer as oracle


@pytest.mark.parametrize("dtype", DTYPES)
def test_nibabel_reads_our_files(tmp_path, dtype):
    g = VoxelGrid(_random(dtype, seed=3), _affine())
    save_nifti(g, tmp_path / "o.nii.gz")
    img = nib.load(str(tmp_path / "o.nii.gz"))
    assert np.array_equal(np.asanyarray(img.dataobj), g.data)
    assert np.allclose(img.affine, g.affine, atol=1e-6)
    with gzip.open(tmp_path / "o.nii.gz") as fh:
        assert int(nib.Nifti1Header.from_fileobj(fh)["vox_offset"]) == VOX_OFFSET
    # the qform written alongside the sform encodes the same geometry
    assert np.allclose(img.get_qform(), g.affine, atol=1e-5)


@pytest.mark.parametrize("dtype", DTYPES)
def test_we_read_nibabel_files(tmp_path, dtype):
    data = _random(dtype, seed=4)
    img = nib.Nifti1Image(data, _affine())
    img.header.set_data_dtype(data.dtype)
    nib.save(img, str(tmp_path / "n.nii"))
    g = load_nifti(tmp_path / "n.nii")
    assert np.array_equal(g.data, data)
    assert np.allclose(g.affine, _affine(), atol=1e-6)


def test_qform_only_file_from_nibabel(tmp_path):
    img = nib.Nifti1Image(np.zeros((3, 3, 3), np.float32), None)
    img.set_qform(_affine(), code=1)
    img.set_sform(None, code=0)
    nib.save(img, str(tmp_path / "q.nii"))
    assert np.allclose(load_nifti(tmp_path / "q.nii").affine, _affine(), atol=1e-5)


def test_nibabel_scaled_file(tmp_path):
    img = nib.Nifti1Image(np.full((2, 2, 2), 3, np.int16), np.eye(4))
    img.header.set_slope_inter(2.0, 1.0)
    nib.save(img, str(tmp_path / "s.nii"))
    g = load_nifti(tmp_path / "s.nii")
    assert np.allclose(g.data, np.asanyarray(nib.load(str(tmp_path / "s.nii")).dataobj))
    assert np.all(g.data == 7.0)


@given(
    st.sampled_from(DTYPES),
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    st.integers(0, 2**31),
    st.booleans(),
)
def test_round_trip_property(tmp_path_factory, dtype, shape, seed, gz):
    g = VoxelGrid(_random(dtype, shape, seed), _affine())
    p = tmp_path_factory.mktemp("rt") / ("x.nii.gz" if gz else "x.nii")
    save_nifti(g, p)
    back = load_nifti(p)
    assert back.data.dtype == g.data.dtype and np.array_equal(back.data, g.data)
    assert np.allclose(back.affine, g.affine, atol=1e-6)


def test_description_field(tmp_path):
    from uhfsegkit.nifti import read_description

    g = VoxelGrid(np.zeros((2, 2, 2), np.uint8), np.eye(4))
    save_nifti(g, tmp_path / "d.nii.gz", descrip="resampled labels")
    assert read_description(tmp_path / "d.nii.gz") == "resampled labels"
    assert nib.load(str(tmp_path / "d.nii.gz")).header["descrip"].item() == b"resampled labels"
    save_nifti(g, tmp_path / "e.nii", descrip="x" * 200)
    assert len(read_description(tmp_path / "e.nii")) == 80
