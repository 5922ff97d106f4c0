"""Voxel grids, world/voxel geometry and canonical (RAS) reorientation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SUPPORTED_DTYPES = (
    np.dtype(np.uint8),
    np.dtype(np.uint16),
    np.dtype(np.uint32),
    np.dtype(np.int16),
    np.dtype(np.int32),
    np.dtype(np.float32),
    np.dtype(np.float64),
)

_SPACING_TOL = 1e-4


class GeometryError(ValueError):
    """Degenerate or mismatched grid geometry."""


def _as_affine(affine) -> np.ndarray:
    a = np.array(affine, dtype=np.float64)
    if a.shape != (4, 4):
        raise GeometryError(f"affine must be 4x4, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("affine contains non-finite values")
    if abs(np.linalg.det(a[:3, :3])) < 1e-12:
        raise GeometryError("degenerate affine: 3x3 block is singular")
    return a


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar field on a regular grid.

    ``data`` is indexed ``[i, j, k]`` with ``i`` the fastest-varying axis on
    disk. The array is copied and frozen on construction, so instances can be
    shared between workers without defensive copies.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise GeometryError(f"expected a 3D array, got shape {data.shape}")
        if any(n < 1 for n in data.shape):
            raise GeometryError(f"dims must be positive, got {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported element kind {data.dtype}")
        data.flags.writeable = False
        affine = _as_affine(self.affine)
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        affine = np.eye(4)
        affine[:3, :3] = np.diag(np.asarray(spacing, dtype=np.float64))
        affine[:3, 3] = origin
        return cls(data, affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data) -> "VoxelGrid":
        """Same geometry, new payload."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match grid {self.dims}")
        return VoxelGrid(data, self.affine)

    def same_geometry(self, other: "VoxelGrid", atol: float = 1e-6) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and self.dims == other.dims
            and np.array_equal(self.affine, other.affine)
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


def check_same_geometry(a: VoxelGrid, b: VoxelGrid, what: str = "grids") -> None:
    if not a.same_geometry(b):
        raise GeometryError(f"grid mismatch between {what}: {a.dims} vs {b.dims}")


def voxel_to_world(grid: VoxelGrid, index: Sequence[float]) -> np.ndarray:
    """Map voxel index/indices (..., 3) to world millimetres."""
    idx = np.asarray(index, dtype=np.float64)
    return idx @ grid.affine[:3, :3].T + grid.affine[:3, 3]


def world_to_voxel(grid: VoxelGrid, point: Sequence[float]) -> np.ndarray:
    pts = np.asarray(point, dtype=np.float64)
    inv = np.linalg.inv(grid.affine)
    return pts @ inv[:3, :3].T + inv[:3, 3]


# ---------------------------------------------------------------------------
# Orientation
# ---------------------------------------------------------------------------

_POS = "RAS"
_NEG = "LPI"


@dataclass(frozen=True, eq=False)
class Orientation:
    """Axis code of a grid plus what is needed to undo a reorientation.

    ``axes[j]`` is the world axis (0=x/R, 1=y/A, 2=z/S) voxel axis ``j``
    runs along and ``flips[j]`` is True when it runs in the negative
    direction.
    """

    code: str
    axes: tuple[int, int, int]
    flips: tuple[bool, bool, bool]
    source_affine: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Orientation):
            return NotImplemented
        return self.code == other.code

    __hash__ = None


def orientation_of(affine) -> Orientation:
    """Closest axis-aligned orientation code for an affine.

    Voxel axes are greedily matched to world axes in order of the largest
    absolute direction cosine so the result is always a permutation, even
    for oblique acquisitions.
    """
    a = _as_affine(affine)
    cosines = np.abs(a[:3, :3] / np.linalg.norm(a[:3, :3], axis=0))
    axes = [-1, -1, -1]
    free_world = {0, 1, 2}
    free_vox = {0, 1, 2}
    while free_vox:
        best = max(
            ((cosines[w, v], w, v) for w in free_world for v in free_vox),
            key=lambda t: (t[0], -t[2], -t[1]),
        )
        _, w, v = best
        axes[v] = w
        free_world.discard(w)
        free_vox.discard(v)
    flips = tuple(bool(a[axes[v], v] < 0) for v in range(3))
    code = "".join((_NEG if f else _POS)[w] for w, f in zip(axes, flips))
    return Orientation(code, tuple(axes), flips)


def _reindex(data: np.ndarray, affine: np.ndarray, axes, flips):
    """Return data/affine with voxel axes sorted to world order and flipped to +."""
    perm = np.argsort(axes)  # new axis n takes old voxel axis perm[n]
    new = np.transpose(data, perm)
    dims_old = np.array(data.shape)
    # new index -> old index: old[perm[n]] = f(new[n])
    t = np.zeros((4, 4))
    t[3, 3] = 1.0
    for n, old_axis in enumerate(perm):
        if flips[old_axis]:
            t[old_axis, n] = -1.0
            t[old_axis, 3] = dims_old[old_axis] - 1
        else:
            t[old_axis, n] = 1.0
    flip_axes = [n for n, old_axis in enumerate(perm) if flips[old_axis]]
    if flip_axes:
        new = np.flip(new, axis=flip_axes)
    return np.ascontiguousarray(new), affine @ t


def reorient_canonical(grid: VoxelGrid) -> tuple[VoxelGrid, Orientation]:
    """Reorder voxels into RAS order without moving any voxel in world space.

    Returns the reoriented grid and the source orientation, which carries the
    original affine so that :func:`undo_reorientation` is bit-exact.
    """
    src = orientation_of(grid.affine)
    src = Orientation(src.code, src.axes, src.flips, grid.affine.copy())
    if src.code == "RAS":
        return grid, src
    data, affine = _reindex(grid.data, grid.affine, src.axes, src.flips)
    return VoxelGrid(data, affine), src


def undo_reorientation(grid: VoxelGrid, orig: Orientation) -> VoxelGrid:
    """Inverse of :func:`reorient_canonical`."""
    if orig.code == "RAS":
        return grid
    perm = np.argsort(orig.axes)
    inv_perm = np.argsort(perm)
    data = grid.data
    flip_axes = [n for n, old_axis in enumerate(perm) if orig.flips[old_axis]]
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    data = np.ascontiguousarray(np.transpose(data, inv_perm))
    if orig.source_affine is not None:
        affine = orig.source_affine
    else:
        # rebuild from the canonical affine when no source is recorded
        _, fwd = _reindex(np.empty(data.shape, dtype=np.uint8), np.eye(4), orig.axes, orig.flips)
        affine = grid.affine @ np.linalg.inv(fwd)
    return VoxelGrid(data, affine)
