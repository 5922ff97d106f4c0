"""Synthetic FS35-style head phantom built from ellipsoids.

Used by the end-to-end tests and the experiment scripts; no real data needed.
"""
from __future__ import annotations

import numpy as np

from .grid import VoxelGrid
from .labels import FS35, LabelMap, as_label_array

# (left id, right id, centre offset from the midline as fractions of the
# brain semi-axes, radii as fractions); the right copy mirrors x.
_PAIRED = [
    (2, 41, (0.45, 0.05, 0.15), (0.42, 0.75, 0.55)),  # cerebral white matter
    (4, 43, (0.18, 0.05, 0.25), (0.08, 0.35, 0.12)),  # lateral ventricle
    (10, 49, (0.14, -0.05, 0.05), (0.10, 0.14, 0.12)),  # thalamus
    (11, 50, (0.20, 0.25, 0.15), (0.07, 0.12, 0.10)),  # caudate
    (12, 51, (0.32, 0.15, 0.0), (0.08, 0.15, 0.12)),  # putamen
    (13, 52, (0.24, 0.08, -0.02), (0.06, 0.09, 0.08)),  # pallidum
    (17, 53, (0.30, -0.20, -0.25), (0.08, 0.18, 0.08)),  # hippocampus
    (18, 54, (0.30, 0.02, -0.30), (0.08, 0.09, 0.08)),  # amygdala
    (26, 58, (0.12, 0.30, -0.08), (0.06, 0.07, 0.06)),  # accumbens
    (28, 60, (0.12, -0.05, -0.22), (0.07, 0.10, 0.08)),  # ventral DC
    (7, 46, (0.22, -0.62, -0.50), (0.12, 0.12, 0.10)),  # cerebellum white matter
]
# keeps the smallest structures a few voxels across at 64³
MIN_RADIUS = 0.12

_CEREBELLUM_CORTEX = (8, 47, (0.25, -0.62, -0.50), (0.24, 0.24, 0.20))
_MIDLINE = [
    (14, (0.0, -0.02, 0.0), (0.03, 0.12, 0.10)),  # third ventricle
    (16, (0.0, -0.35, -0.45), (0.10, 0.12, 0.35)),  # brainstem
    (15, (0.0, -0.50, -0.38), (0.04, 0.06, 0.06)),  # fourth ventricle
]


def _ellipsoid(shape, centre, radii) -> np.ndarray:
    ax = [np.arange(n, dtype=np.float64) for n in shape]
    x, y, z = np.meshgrid(*ax, indexing="ij")
    r = ((x - centre[0]) / radii[0]) ** 2 + ((y - centre[1]) / radii[1]) ** 2 + ((z - centre[2]) / radii[2]) ** 2
    return r <= 1.0


def make_phantom(size: int = 64, spacing: float = 1.0) -> tuple[LabelMap, VoxelGrid]:
    """Return (FS35 label map, brain mask).

    The brain mask is a slightly larger ellipsoid than the labelled tissue, so
    a shell of unassigned mask voxels is left for the CSF relabelling step.
    """
    shape = (size, size, size)
    c = np.array(shape, dtype=np.float64) / 2.0 - 0.5
    semi = np.array([0.40, 0.44, 0.40]) * size
    data = np.zeros(shape, dtype=np.int32)

    hemi = _ellipsoid(shape, c, semi * 0.93)
    x = np.arange(size)[:, None, None]
    data[hemi & (x < c[0])] = 3
    data[hemi & (x >= c[0])] = 42

    def place(lab, offset, radii, mirror=False):
        off = np.array(offset) * semi
        if mirror:
            off[0] = -off[0]
        r = np.maximum(np.array(radii), MIN_RADIUS) * semi
        data[_ellipsoid(shape, c + off * np.array([-1, 1, 1]), r)] = lab

    for left, right, off, radii in [_CEREBELLUM_CORTEX, *_PAIRED]:
        place(left, off, radii)
        place(right, off, radii, mirror=True)
    for lab, off, radii in _MIDLINE:
        place(lab, off, radii)

    mask = _ellipsoid(shape, c, semi).astype(np.uint8)
    data[mask == 0] = 0
    affine = np.diag([spacing, spacing, spacing, 1.0])
    affine[:3, 3] = -c * spacing
    labels = LabelMap(VoxelGrid(as_label_array(data), affine), FS35)
    return labels, VoxelGrid(mask, affine)
