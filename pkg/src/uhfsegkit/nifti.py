"""Minimal NIfTI-1 reader/writer (.nii / .nii.gz, single 3D volume)."""
from __future__ import annotations

import gzip
import io
from pathlib import Path

import numpy as np

from .grid import VoxelGrid

HEADER_SIZE = 348
NIFTI2_HEADER_SIZE = 540
VOX_OFFSET = 352

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

HEADER_DTYPE = np.dtype(_HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code <-> numpy element kind
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

# xyzt_units: mm
_UNITS_MM = 2
_XFORM_SCANNER = 1
_XFORM_ALIGNED = 2


class NiftiFormatError(ValueError):
    """The file is not a readable NIfTI-1 volume."""


def _is_gzip(raw: bytes) -> bool:
    return raw[:2] == b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if _is_gzip(raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiFormatError(f"truncated payload: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(raw: bytes) -> np.ndarray:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("malformed header: file shorter than 348 bytes")
    for order in ("<", ">"):
        size = np.frombuffer(raw[:4], dtype=order + "i4")[0]
        if size == HEADER_SIZE:
            hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
            break
        if size == NIFTI2_HEADER_SIZE:
            raise NiftiFormatError("malformed header: NIfTI-2 files are not supported")
    else:
        raise NiftiFormatError("malformed header: bad sizeof_hdr")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise NiftiFormatError(f"malformed header: bad magic {bytes(hdr['magic'])!r}")
    if hdr["magic"] == b"ni1":
        raise NiftiFormatError("malformed header: detached .hdr/.img pairs are not supported")
    return hdr


def quaternion_to_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        a = 0.0
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
    else:
        a = np.sqrt(a2)
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pix = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pix[0] < 0 else 1.0
    zooms = np.array([pix[1], pix[2], pix[3] * qfac])
    zooms[zooms == 0] = 1.0
    aff = np.eye(4)
    aff[:3, :3] = r * zooms
    aff[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]
    return aff


def affine_to_quaternion(affine: np.ndarray):
    """Return (b, c, d, qfac, zooms) for the rotation nearest to ``affine``."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    zooms = np.linalg.norm(m, axis=0)
    r = m / zooms
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] = -r[:, 2]
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    trace = np.trace(r)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (r[2, 1] - r[1, 2]) * s
        c = (r[0, 2] - r[2, 0]) * s
        d = (r[1, 0] - r[0, 1]) * s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a = (r[2, 1] - r[1, 2]) / s
        b = 0.25 * s
        c = (r[0, 1] + r[1, 0]) / s
        d = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a = (r[0, 2] - r[2, 0]) / s
        b = (r[0, 1] + r[1, 0]) / s
        c = 0.25 * s
        d = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a = (r[1, 0] - r[0, 1]) / s
        b = (r[0, 2] + r[2, 0]) / s
        c = (r[1, 2] + r[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return b, c, d, qfac, zooms


def header_affine(hdr) -> np.ndarray:
    """sform if set, else qform, else a diagonal from pixdim."""
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        if abs(np.linalg.det(aff[:3, :3])) > 0:
            return aff
    if hdr["qform_code"] > 0:
        return quaternion_to_affine(hdr)
    pix = np.asarray(hdr["pixdim"][1:4], dtype=np.float64)
    pix[pix <= 0] = 1.0
    return np.diag([*pix, 1.0])


def read_description(path) -> str:
    """The header's ``descrip`` field as text."""
    return bytes(_parse_header(_read_bytes(path))["descrip"]).split(b"\0")[0].decode("ascii", "replace")


def load_nifti(path) -> VoxelGrid:
    raw = _read_bytes(path)
    hdr = _parse_header(raw)
    dim = [int(x) for x in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"malformed header: dim[0]={ndim}")
    shape = [max(1, d) for d in dim[1 : ndim + 1]]
    if any(d < 1 for d in dim[1 : ndim + 1]):
        raise NiftiFormatError(f"malformed header: non-positive dims {dim[1:ndim + 1]}")
    if len(shape) > 3 and any(n != 1 for n in shape[3:]):
        raise NiftiFormatError(f"unsupported dimension: only 3D volumes are read, got {shape}")
    shape = (shape + [1, 1, 1])[:3]

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiFormatError(f"unsupported datatype code {code}")
    # payload shares the header's byte order
    dt = DATATYPES[code].newbyteorder(hdr.dtype.fields["sizeof_hdr"][0].byteorder)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    n = int(np.prod(shape))
    nbytes = n * dt.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiFormatError(
            f"truncated payload: expected {nbytes} bytes at offset {offset}, got {max(0, len(raw) - offset)}"
        )
    data = np.frombuffer(raw, dtype=dt, count=n, offset=offset)
    data = data.reshape(shape, order="F").astype(dt.newbyteorder("="))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0):
        if not np.isfinite(inter):
            inter = 0.0
        data = data.astype(np.float64) * slope + inter

    return VoxelGrid(data, header_affine(hdr))


def make_header(grid: VoxelGrid, descrip: str = "") -> np.ndarray:
    dt = grid.data.dtype
    if dt not in DATATYPE_CODES:
        raise NiftiFormatError(f"unsupported datatype {dt}")
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *grid.dims, 1, 1, 1, 1]
    hdr["datatype"] = DATATYPE_CODES[dt]
    hdr["bitpix"] = dt.itemsize * 8
    b, c, d, qfac, zooms = affine_to_quaternion(grid.affine)
    hdr["pixdim"] = [qfac, *zooms, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = _UNITS_MM
    hdr["qform_code"] = _XFORM_ALIGNED
    hdr["sform_code"] = _XFORM_ALIGNED
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = grid.affine[:3, 3]
    hdr["srow_x"] = grid.affine[0]
    hdr["srow_y"] = grid.affine[1]
    hdr["srow_z"] = grid.affine[2]
    hdr["descrip"] = descrip.encode("ascii", "replace")[:80]
    hdr["magic"] = b"n+1"
    return hdr


def encode_nifti(grid: VoxelGrid, descrip: str = "") -> bytes:
    """Serialise a grid to uncompressed .nii bytes."""
    hdr = make_header(grid, descrip)
    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00\x00\x00\x00")  # no extensions
    buf.write(np.asarray(grid.data, dtype=grid.data.dtype.newbyteorder("<")).tobytes(order="F"))
    return buf.getvalue()


def save_nifti(grid: VoxelGrid, path, compress: bool | None = None, descrip: str = "") -> None:
    """Write ``grid`` as NIfTI-1 with sform = affine and qform derived from it.

    ``compress`` defaults to the ``.gz`` suffix of ``path``. The gzip stream
    has a zero mtime so identical grids give identical files. ``descrip``
    (at most 80 ASCII characters) goes into the header's description field.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    payload = encode_nifti(grid, descrip)
    if compress:
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.write_bytes(payload)
