"""Domain-randomised training data synthesis from label maps.

Each case (input ``i``, replicate ``r``) gets its own counter-based random
streams keyed by ``(seed, i, r, stage)``, so a corpus does not depend on
worker count or generation order.

Stage order for intensities is fixed: GMM -> bias -> gamma -> resolution ->
min-max normalisation.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from .grid import VoxelGrid
from .labels import DKT62, FS35, LabelMap, parcels_to_cortex, save_labels
from .nifti import save_nifti
from .resample import ResampleSpec, resample_image

log = logging.getLogger(__name__)

STAGES = {"spatial": 0, "gmm": 1, "bias": 2, "gamma": 3, "resolution": 4}
STAGE_ORDER = ("gmm", "bias", "gamma", "resolution", "normalize")

_MAX_TRANSFORM_RETRIES = 10
_SLAB = 1 << 21


def _interval(x, name):
    lo, hi = (float(v) for v in x)
    if not lo <= hi:
        raise ValueError(f"{name}: empty range ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class SynthConfig:
    """Randomisation ranges for synthesis.

    Symmetric ranges (rotation, shear, translation) are half-widths: rotation
    is drawn from U(-rotation_range, +rotation_range) degrees per axis.
    The defaults are generic domain-randomisation assumptions, not tuned
    values; override them per corpus.
    """

    seed: int = 0
    replication: int = 1
    rotation_range: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    shear_range: float = 0.012
    translation_range: float = 15.0
    elastic_spacing: float = 16.0
    elastic_std: float = 2.0
    gmm_mean_range: tuple[float, float] = (0.0, 255.0)
    gmm_std_range: tuple[float, float] = (0.0, 35.0)
    bias_scale: float = 40.0
    bias_std: float = 0.5
    gamma_std: float = 0.25
    resolution_range: tuple[float, float] = (0.6, 3.0)
    intensity_synthesis: bool = True
    simulate_bias: bool = True
    simulate_gamma: bool = True
    simulate_resolution: bool = True

    def __post_init__(self):
        if int(self.replication) < 1:
            raise ValueError("replication must be >= 1")
        for name in ("scale_range", "gmm_mean_range", "gmm_std_range", "resolution_range"):
            object.__setattr__(self, name, _interval(getattr(self, name), name))
        for name in ("rotation_range", "shear_range", "translation_range", "elastic_std", "bias_std", "gamma_std"):
            if float(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if self.gmm_std_range[0] < 0:
            raise ValueError("gmm_std_range must be non-negative")
        if self.resolution_range[0] <= 0:
            raise ValueError("resolution_range must be positive")
        if self.bias_scale <= 0 or self.elastic_spacing <= 0:
            raise ValueError("bias_scale and elastic_spacing must be positive")

    @property
    def bias_active(self) -> bool:
        return self.intensity_synthesis and self.simulate_bias

    @property
    def gamma_active(self) -> bool:
        return self.intensity_synthesis and self.simulate_gamma

    @property
    def resolution_active(self) -> bool:
        return self.intensity_synthesis and self.simulate_resolution

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CaseStreams:
    """Independent Philox streams for one case, one per generation stage."""

    def __init__(self, seed: int, case: int = 0, replicate: int = 0):
        self.key = (int(seed), int(case), int(replicate))

    def stage(self, name: str) -> np.random.Generator:
        seed, case, rep = self.key
        ss = np.random.SeedSequence(entropy=seed & (2**64 - 1), spawn_key=(case, rep, STAGES[name]))
        return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Spatial augmentation
# ---------------------------------------------------------------------------


def _rotation(deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(eq=False)
class SpatialTransform:
    """World-space pull-back map ``x = L (y - c) + c + t + u(y)``.

    ``y`` is an output point, ``x`` the source point it samples, ``c`` the
    centre of the volume and ``u`` the elastic displacement (mm), stored on a
    coarse control lattice and upsampled with cubic splines.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    shear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    elastic: np.ndarray | None = None  # (3, cx, cy, cz) displacements in mm
    elastic_spacing: float = 16.0

    @property
    def linear(self) -> np.ndarray:
        sx, sy, sz = self.shear
        shear = np.array([[1, sx, sy], [0, 1, sz], [0, 0, 1]])
        return _rotation(self.rotation) @ shear @ np.diag(self.scale)

    @property
    def is_identity(self) -> bool:
        return (
            np.all(self.rotation == 0)
            and np.all(self.scale == 1)
            and np.all(self.shear == 0)
            and np.all(self.translation == 0)
            and (self.elastic is None or not np.any(self.elastic))
        )

    def params(self) -> dict:
        return {
            "rotation_deg": self.rotation.tolist(),
            "scale": self.scale.tolist(),
            "shear": self.shear.tolist(),
            "translation_mm": self.translation.tolist(),
            "elastic_control_shape": None if self.elastic is None else list(self.elastic.shape[1:]),
            "elastic_max_mm": 0.0 if self.elastic is None else float(np.abs(self.elastic).max()),
        }

    def jacobian_dets(self, grid: VoxelGrid) -> np.ndarray:
        """det(dx/dy) at the control points (or the single linear value)."""
        lin = self.linear
        if self.elastic is None:
            return np.array([np.linalg.det(lin)])
        steps = _control_steps(grid, self.elastic.shape[1:])
        grads = np.empty(self.elastic.shape[1:] + (3, 3))
        for comp in range(3):
            for ax, g in enumerate(np.gradient(self.elastic[comp], *steps)):
                grads[..., comp, ax] = g
        # control lattice is aligned with voxel axes; convert gradients to world axes
        directions = grid.affine[:3, :3] / grid.spacing
        jac = lin + grads @ directions.T
        return np.linalg.det(jac)


def _control_shape(grid: VoxelGrid, spacing: float) -> tuple[int, int, int]:
    extent = np.asarray(grid.dims) * grid.spacing
    return tuple(int(max(2, math.ceil(e / spacing) + 1)) for e in extent)


def _control_steps(grid: VoxelGrid, ctrl_shape) -> list[float]:
    """Physical distance (mm) between neighbouring control points along each voxel axis."""
    extent = (np.asarray(grid.dims) - 1) * grid.spacing
    return [float(e / (c - 1)) if c > 1 and e > 0 else 1.0 for e, c in zip(extent, ctrl_shape)]


def _upsample_control(ctrl: np.ndarray, dims, k0: int = 0, k1: int | None = None) -> np.ndarray:
    """Cubic-spline interpolation of a control lattice spanning voxel 0..n-1."""
    k1 = dims[2] if k1 is None else k1
    axes = []
    for ax, (n, c) in enumerate(zip(dims, ctrl.shape)):
        idx = np.arange(n, dtype=np.float64) if ax < 2 else np.arange(k0, k1, dtype=np.float64)
        axes.append(idx * (c - 1) / max(n - 1, 1))
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(ctrl, coords, order=3, mode="nearest")


def sample_spatial_transform(cfg: SynthConfig, rng: np.random.Generator, grid: VoxelGrid) -> SpatialTransform:
    """Draw affine parameters uniformly and an elastic field at control points.

    Draws whose Jacobian determinant is non-positive anywhere on the control
    lattice are redrawn (bounded retries).
    """
    for _ in range(_MAX_TRANSFORM_RETRIES):
        rot = rng.uniform(-cfg.rotation_range, cfg.rotation_range, 3)
        scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], 3)
        shear = rng.uniform(-cfg.shear_range, cfg.shear_range, 3)
        trans = rng.uniform(-cfg.translation_range, cfg.translation_range, 3)
        elastic = None
        if cfg.elastic_std > 0:
            shape = _control_shape(grid, cfg.elastic_spacing)
            elastic = rng.normal(0.0, cfg.elastic_std, (3,) + shape)
        t = SpatialTransform(rot, scale, shear, trans, elastic, cfg.elastic_spacing)
        if np.all(t.jacobian_dets(grid) > 0):
            return t
    raise RuntimeError("could not draw an invertible spatial transform; reduce elastic_std or shear")


def _source_indices(grid: VoxelGrid, t: SpatialTransform, k0: int, k1: int) -> np.ndarray:
    """Source voxel coordinates (3, n) sampled by output voxels in slab [k0, k1)."""
    dims = grid.dims
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(k0, k1, dtype=np.float64),
        indexing="ij",
    )
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()])
    if t.is_identity:
        return idx
    a = grid.affine
    y = a[:3, :3] @ idx + a[:3, 3:4]
    centre = a[:3, :3] @ ((np.asarray(dims) - 1) / 2.0) + a[:3, 3]
    x = t.linear @ (y - centre[:, None]) + centre[:, None] + t.translation[:, None]
    if t.elastic is not None:
        for comp in range(3):
            x[comp] += _upsample_control(t.elastic[comp], dims, k0, k1).ravel()
    inv = np.linalg.inv(a)
    return inv[:3, :3] @ x + inv[:3, 3:4]


def apply_transform_labels(labels: LabelMap, t: SpatialTransform) -> LabelMap:
    """Pull labels back through ``t`` with nearest-neighbour sampling.

    Points falling outside the source volume become background.
    """
    data = np.asarray(labels.data)
    if t.is_identity:
        return LabelMap(labels.grid.with_data(data.copy()), labels.convention, labels.background_id)
    dims = labels.grid.dims
    out = np.full(dims, labels.background_id, dtype=data.dtype)
    plane = dims[0] * dims[1]
    step = max(1, _SLAB // plane)
    for k0 in range(0, dims[2], step):
        k1 = min(dims[2], k0 + step)
        src = np.floor(_source_indices(labels.grid, t, k0, k1) + 0.5).astype(np.int64)
        ok = np.all((src >= 0) & (src < np.asarray(dims)[:, None]), axis=0)
        vals = np.full(src.shape[1], labels.background_id, dtype=data.dtype)
        vals[ok] = data[src[0, ok], src[1, ok], src[2, ok]]
        out[:, :, k0:k1] = vals.reshape(dims[0], dims[1], k1 - k0)
    return LabelMap(labels.grid.with_data(out), labels.convention, labels.background_id)


# ---------------------------------------------------------------------------
# Intensity synthesis
# ---------------------------------------------------------------------------


def bias_field(grid: VoxelGrid, cfg: SynthConfig, rng: np.random.Generator) -> VoxelGrid:
    """Smooth multiplicative field ``exp(S)``.

    ``S`` is N(0, bias_std) on a control lattice with ``bias_scale`` mm
    spacing, upsampled to the image grid with cubic splines.
    """
    if cfg.bias_scale <= 0:
        raise ValueError("bias_scale must be positive")
    if cfg.bias_std == 0:
        return grid.with_data(np.ones(grid.dims, dtype=np.float32))
    ctrl = rng.normal(0.0, cfg.bias_std, _control_shape(grid, cfg.bias_scale))
    log_field = _upsample_control(ctrl, grid.dims)
    return grid.with_data(np.exp(log_field).astype(np.float32))


def sample_gmm(ids: list[int], cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    means = rng.uniform(cfg.gmm_mean_range[0], cfg.gmm_mean_range[1], len(ids))
    stds = rng.uniform(cfg.gmm_std_range[0], cfg.gmm_std_range[1], len(ids))
    return means, stds


def render_gmm(data: np.ndarray, ids, means, stds, rng: np.random.Generator) -> np.ndarray:
    """Draw every voxel from N(mean, std) of its label; background is one more class."""
    ids = np.asarray(ids)
    lut = np.searchsorted(ids, data)
    noise = rng.standard_normal(data.shape)
    return np.asarray(means)[lut] + np.asarray(stds)[lut] * noise


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _simulate_resolution(img: VoxelGrid, spacing: np.ndarray) -> VoxelGrid:
    """Blur to a coarser acquisition spacing, downsample, and interpolate back."""
    ratio = spacing / img.spacing
    sigma = np.where(ratio > 1, ratio / (2 * math.sqrt(2 * math.log(2))), 0.0)
    blurred = ndimage.gaussian_filter(np.asarray(img.data, dtype=np.float64), sigma, mode="nearest")
    low = resample_image(img.with_data(blurred), ResampleSpec(target_spacing=tuple(spacing), image_order="linear"))
    back = resample_image(low, ResampleSpec.like(img, image_order="linear"))
    return img.with_data(np.asarray(back.data, dtype=np.float64))


def synthesize_intensities(
    labels: LabelMap, cfg: SynthConfig, streams: CaseStreams, params: dict | None = None
) -> VoxelGrid:
    """Render a randomised-contrast image from a label map.

    Sampled parameters are written into ``params`` when given.
    """
    if not cfg.intensity_synthesis:
        raise ValueError("intensity synthesis is disabled in this config")
    params = {} if params is None else params
    data = np.asarray(labels.data)
    ids = sorted(int(i) for i in np.unique(data))
    gmm_rng = streams.stage("gmm")
    means, stds = sample_gmm(ids, cfg, gmm_rng)
    img = render_gmm(data, ids, means, stds, gmm_rng)
    params["gmm"] = {str(i): [float(m), float(s)] for i, m, s in zip(ids, means, stds)}

    if cfg.bias_active:
        img = img * np.asarray(bias_field(labels.grid, cfg, streams.stage("bias")).data, dtype=np.float64)
    if cfg.gamma_active:
        gamma = float(np.exp(streams.stage("gamma").normal(0.0, cfg.gamma_std)))
        normed = _minmax(img)
        with np.errstate(divide="ignore"):
            img = np.exp(gamma * np.log(normed))
        params["gamma"] = gamma
    if cfg.resolution_active:
        spacing = streams.stage("resolution").uniform(cfg.resolution_range[0], cfg.resolution_range[1], 3)
        img = np.asarray(_simulate_resolution(labels.grid.with_data(img), spacing).data)
        params["acquisition_spacing_mm"] = spacing.tolist()
    params["stage_order"] = [s for s in STAGE_ORDER if s == "gmm" or s == "normalize" or _stage_on(cfg, s)]
    return labels.grid.with_data(_minmax(img).astype(np.float32))


def _stage_on(cfg: SynthConfig, stage: str) -> bool:
    return {"bias": cfg.bias_active, "gamma": cfg.gamma_active, "resolution": cfg.resolution_active}[stage]


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SynthCase:
    name: str
    index: int
    replicate: int
    labels: LabelMap
    image: VoxelGrid | None = None
    input_labels: LabelMap | None = None  # training input for label-only corpora
    provenance: dict = field(default_factory=dict)


@dataclass(eq=False)
class CaseFailure:
    name: str
    index: int
    replicate: int
    error: str


def generate_case(labels: LabelMap, cfg: SynthConfig, index: int, replicate: int, name: str = "") -> SynthCase:
    streams = CaseStreams(cfg.seed, index, replicate)
    t = sample_spatial_transform(cfg, streams.stage("spatial"), labels.grid)
    deformed = apply_transform_labels(labels, t)
    prov = {
        "seed": int(cfg.seed),
        "case_index": int(index),
        "replicate": int(replicate),
        "source": name,
        "config": cfg.to_dict(),
        "spatial": t.params(),
    }
    image = None
    input_labels = None
    if cfg.intensity_synthesis:
        image = synthesize_intensities(deformed, cfg, streams, prov)
    elif labels.convention.name == DKT62.name:
        # parcellation corpora train on the matching cortex-only map
        input_labels = LabelMap(deformed.grid.with_data(parcels_to_cortex(np.asarray(deformed.data))), FS35)
    return SynthCase(name or f"case{index:04d}", index, replicate, deformed, image, input_labels, prov)


def _case_job(args):
    labels, cfg, i, r, name = args
    try:
        return generate_case(labels, cfg, i, r, name)
    except Exception as exc:  # isolate per-case failures
        return CaseFailure(name, i, r, f"{type(exc).__name__}: {exc}")


def generate_corpus(
    inputs: Iterable[LabelMap], cfg: SynthConfig, jobs: int = 1, names: list[str] | None = None
) -> Iterator[SynthCase | CaseFailure]:
    """Yield ``replication`` cases per input, ordered by (input, replicate).

    Failed cases come back as :class:`CaseFailure` and generation continues.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("no input label maps")
    names = names or [f"case{i:04d}" for i in range(len(inputs))]
    tasks = [(lab, cfg, i, r, names[i]) for i, lab in enumerate(inputs) for r in range(cfg.replication)]
    if jobs <= 1:
        for t in tasks:
            yield _case_job(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(_case_job, tasks)


def case_stem(case: SynthCase | CaseFailure) -> str:
    return f"{case.name}_r{case.replicate:02d}"


def write_case(case: SynthCase, out_dir) -> list[Path]:
    """Write a case as NIfTI files plus a JSON provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = case_stem(case)
    written = []
    p = out_dir / f"{stem}_labels.nii.gz"
    save_labels(case.labels, p)
    written.append(p)
    if case.image is not None:
        p = out_dir / f"{stem}_image.nii.gz"
        save_nifti(case.image, p)
        written.append(p)
    if case.input_labels is not None:
        p = out_dir / f"{stem}_input.nii.gz"
        save_labels(case.input_labels, p)
        written.append(p)
    p = out_dir / f"{stem}_params.json"
    p.write_text(json.dumps(case.provenance, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written
