"""Label conventions, label-map preparation transforms and evaluation label sets.

Label ids follow the FreeSurfer colour lookup table. Three conventions ship
built in:

* ``FS35``  whole-brain segmentation (33 subcortical labels + 2 cortex labels)
* ``DKT62`` Desikan-Killiany-Tourville cortical parcels, 31 per hemisphere
* ``DK68``  Desikan-Killiany cortical parcels, 34 per hemisphere

``FSV95`` (the 33 subcortical labels plus the 62 DKT parcels) is the
combined map an upstream segmenter produces and the input of
:func:`extract_cortex`.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import VoxelGrid, check_same_geometry
from .nifti import load_nifti, save_nifti

log = logging.getLogger(__name__)

LEFT, RIGHT, NONE = "left", "right", "none"

CSF_ID = 24
LEFT_CORTEX_ID = 3
RIGHT_CORTEX_ID = 42

_FS35 = [
    (2, "Left-Cerebral-White-Matter", LEFT),
    (3, "Left-Cerebral-Cortex", LEFT),
    (4, "Left-Lateral-Ventricle", LEFT),
    (5, "Left-Inf-Lat-Vent", LEFT),
    (7, "Left-Cerebellum-White-Matter", LEFT),
    (8, "Left-Cerebellum-Cortex", LEFT),
    (10, "Left-Thalamus", LEFT),
    (11, "Left-Caudate", LEFT),
    (12, "Left-Putamen", LEFT),
    (13, "Left-Pallidum", LEFT),
    (14, "3rd-Ventricle", NONE),
    (15, "4th-Ventricle", NONE),
    (16, "Brain-Stem", NONE),
    (17, "Left-Hippocampus", LEFT),
    (18, "Left-Amygdala", LEFT),
    (24, "CSF", NONE),
    (26, "Left-Accumbens-area", LEFT),
    (28, "Left-VentralDC", LEFT),
    (31, "Left-choroid-plexus", LEFT),
    (41, "Right-Cerebral-White-Matter", RIGHT),
    (42, "Right-Cerebral-Cortex", RIGHT),
    (43, "Right-Lateral-Ventricle", RIGHT),
    (44, "Right-Inf-Lat-Vent", RIGHT),
    (46, "Right-Cerebellum-White-Matter", RIGHT),
    (47, "Right-Cerebellum-Cortex", RIGHT),
    (49, "Right-Thalamus", RIGHT),
    (50, "Right-Caudate", RIGHT),
    (51, "Right-Putamen", RIGHT),
    (52, "Right-Pallidum", RIGHT),
    (53, "Right-Hippocampus", RIGHT),
    (54, "Right-Amygdala", RIGHT),
    (58, "Right-Accumbens-area", RIGHT),
    (60, "Right-VentralDC", RIGHT),
    (63, "Right-choroid-plexus", RIGHT),
    (77, "WM-hypointensities", NONE),
]

# DK cortical regions, FreeSurfer offset within 1000 (lh) / 2000 (rh)
_DK_REGIONS = [
    (1, "bankssts"),
    (2, "caudalanteriorcingulate"),
    (3, "caudalmiddlefrontal"),
    (5, "cuneus"),
    (6, "entorhinal"),
    (7, "fusiform"),
    (8, "inferiorparietal"),
    (9, "inferiortemporal"),
    (10, "isthmuscingulate"),
    (11, "lateraloccipital"),
    (12, "lateralorbitofrontal"),
    (13, "lingual"),
    (14, "medialorbitofrontal"),
    (15, "middletemporal"),
    (16, "parahippocampal"),
    (17, "paracentral"),
    (18, "parsopercularis"),
    (19, "parsorbitalis"),
    (20, "parstriangularis"),
    (21, "pericalcarine"),
    (22, "postcentral"),
    (23, "posteriorcingulate"),
    (24, "precentral"),
    (25, "precuneus"),
    (26, "rostralanteriorcingulate"),
    (27, "rostralmiddlefrontal"),
    (28, "superiorfrontal"),
    (29, "superiorparietal"),
    (30, "superiortemporal"),
    (31, "supramarginal"),
    (32, "frontalpole"),
    (33, "temporalpole"),
    (34, "transversetemporal"),
    (35, "insula"),
]

# DK regions the DKT protocol removed, and the DKT regions that absorbed them.
DKT_ABSORBED = {
    "bankssts": ("superiortemporal", "middletemporal"),
    "frontalpole": ("superiorfrontal",),
    "temporalpole": ("superiortemporal", "middletemporal", "inferiortemporal", "entorhinal"),
}


@dataclass(frozen=True)
class LabelEntry:
    label_id: int
    name: str
    hemisphere: str = NONE


@dataclass(frozen=True)
class LabelConvention:
    name: str
    entries: tuple[LabelEntry, ...]

    def __post_init__(self):
        ids = [e.label_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate label ids")
        if 0 in ids:
            raise ValueError(f"{self.name}: id 0 is reserved for background")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(e.label_id for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label_id) -> bool:
        return int(label_id) in self._by_id

    @cached_property
    def _by_id(self) -> dict[int, LabelEntry]:
        return {e.label_id: e for e in self.entries}

    def entry(self, label_id: int) -> LabelEntry:
        return self._by_id[int(label_id)]

    def name_of(self, label_id: int) -> str:
        e = self._by_id.get(int(label_id))
        return e.name if e else f"label-{label_id}"

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.label_id
        raise KeyError(f"{name!r} not in convention {self.name}")


def _cortical(regions, prefix_offsets=((1000, "lh", LEFT), (2000, "rh", RIGHT))):
    entries = []
    for offset, tag, hemi in prefix_offsets:
        for k, region in regions:
            entries.append(LabelEntry(offset + k, f"ctx-{tag}-{region}", hemi))
    return tuple(entries)


_DKT_REGIONS = [(k, r) for k, r in _DK_REGIONS if r not in DKT_ABSORBED]

FS35 = LabelConvention("FS35", tuple(LabelEntry(*e) for e in _FS35))
DKT62 = LabelConvention("DKT62", _cortical(_DKT_REGIONS))
DK68 = LabelConvention("DK68", _cortical(_DK_REGIONS))
FSV95 = LabelConvention(
    "FSV95",
    tuple(e for e in FS35.entries if e.label_id not in (LEFT_CORTEX_ID, RIGHT_CORTEX_ID))
    + DKT62.entries,
)

BUILTIN = {c.name: c for c in (FS35, DKT62, DK68, FSV95)}


def region_of(name: str) -> str:
    """``ctx-lh-insula`` -> ``insula``; other names pass through."""
    parts = name.split("-", 2)
    if len(parts) == 3 and parts[0] == "ctx":
        return parts[2]
    return name


def get_convention(name_or_path) -> LabelConvention:
    if str(name_or_path) in BUILTIN:
        return BUILTIN[str(name_or_path)]
    return load_convention_csv(name_or_path)


def load_convention_csv(path, name: str | None = None) -> LabelConvention:
    """Read a convention table with columns ``id,name,hemisphere``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    entries = tuple(
        LabelEntry(int(r["id"]), r["name"], (r.get("hemisphere") or NONE).strip().lower()) for r in rows
    )
    return LabelConvention(name or path.stem, entries)


def load_mapping_csv(path) -> dict[int, int]:
    """Read a relabel table with columns ``src_id,dst_id``."""
    with Path(path).open(newline="") as fh:
        return {int(r["src_id"]): int(r["dst_id"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelMap:
    grid: VoxelGrid
    convention: LabelConvention
    background_id: int = 0

    def __post_init__(self):
        if self.grid.data.dtype.kind not in "iu":
            raise TypeError(f"label maps need an integer grid, got {self.grid.data.dtype}")
        unknown = set(self.present_ids()) - set(self.convention.ids)
        if unknown:
            raise ValueError(f"ids {sorted(unknown)} not in convention {self.convention.name}")

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    def present_ids(self) -> list[int]:
        ids = np.unique(self.grid.data)
        return [int(i) for i in ids if i != self.background_id]

    def with_data(self, data, convention: LabelConvention | None = None) -> "LabelMap":
        return LabelMap(self.grid.with_data(data), convention or self.convention, self.background_id)


def as_label_array(data) -> np.ndarray:
    """Cast to the storage kind used for label files (uint16 when ids fit)."""
    data = np.asarray(data)
    mx = int(data.max()) if data.size else 0
    mn = int(data.min()) if data.size else 0
    dt = np.dtype(np.uint16) if (mn >= 0 and mx < 65536) else np.dtype(np.int32)
    return data.astype(dt)


def make_labelmap(data, affine=None, convention: LabelConvention = FS35) -> LabelMap:
    grid = VoxelGrid(as_label_array(data), np.eye(4) if affine is None else affine)
    return LabelMap(grid, convention)


def guess_convention(data) -> LabelConvention:
    """First built-in convention (FS35, FSV95, DKT62, DK68) covering every id present."""
    ids = set(int(i) for i in np.unique(data)) - {0}
    for conv in (FS35, FSV95, DKT62, DK68):
        if ids <= set(conv.ids):
            return conv
    raise ValueError(f"no built-in convention covers ids {sorted(ids)[:10]}...")


def load_labels(path, convention: LabelConvention | str | None = None) -> LabelMap:
    """Read a label map; without ``convention`` the built-in one is inferred."""
    if isinstance(convention, str):
        convention = get_convention(convention)
    grid = load_nifti(path)
    data = grid.data
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise ValueError(f"{path}: label map holds non-integer values")
        data = data.astype(np.int64)
    if convention is None:
        convention = guess_convention(data)
    return LabelMap(VoxelGrid(as_label_array(data), grid.affine), convention)


def save_labels(labels: LabelMap, path, compress: bool | None = None, descrip: str = "") -> None:
    save_nifti(VoxelGrid(as_label_array(labels.data), labels.grid.affine), path, compress, descrip)


# ---------------------------------------------------------------------------
# Training label-map preparation
# ---------------------------------------------------------------------------


def relabel_unassigned_to_csf(labels: LabelMap, brain_mask: VoxelGrid, csf_id: int = CSF_ID) -> LabelMap:
    """Assign every unlabelled voxel inside the brain mask to CSF.

    No dilation: voxels outside the mask are untouched even if they border CSF.
    """
    check_same_geometry(labels.grid, brain_mask, "labels and brain mask")
    if csf_id not in labels.convention:
        raise ValueError(f"CSF id {csf_id} absent from convention {labels.convention.name}")
    mask = np.asarray(brain_mask.data) != 0
    out = np.array(labels.data)
    out[mask & (out == labels.background_id)] = csf_id
    return labels.with_data(out)


def _cortex_ids(convention: LabelConvention):
    left, right = [], []
    for e in convention.entries:
        if e.label_id in (LEFT_CORTEX_ID, RIGHT_CORTEX_ID):
            continue
        if e.name.startswith("ctx-lh-") or (1000 <= e.label_id < 2000):
            left.append(e.label_id)
        elif e.name.startswith("ctx-rh-") or (2000 <= e.label_id < 3000):
            right.append(e.label_id)
    return left, right


def parcels_to_cortex(data: np.ndarray, convention: LabelConvention = DKT62) -> np.ndarray:
    """Collapse cortical parcels to one cortex label per hemisphere."""
    left, right = _cortex_ids(convention)
    out = np.zeros(data.shape, dtype=np.uint16)
    out[np.isin(data, left) | (data == LEFT_CORTEX_ID)] = LEFT_CORTEX_ID
    out[np.isin(data, right) | (data == RIGHT_CORTEX_ID)] = RIGHT_CORTEX_ID
    return out


def extract_cortex(labels: LabelMap, parcel_convention: LabelConvention = DKT62) -> tuple[LabelMap, LabelMap]:
    """Split a whole-brain map into (cortex-only, cortical parcellation).

    Parcel voxels become 3/42 in the cortex-only map and keep their parcel id
    in the parcellation. Plain 3/42 voxels without a parcel take the nearest
    parcel of the same hemisphere; when a hemisphere has no parcels at all
    they stay in the cortex-only map and the parcellation leaves them empty.
    """
    data = np.asarray(labels.data)
    left, right = _cortex_ids(parcel_convention)
    cortex = parcels_to_cortex(data, parcel_convention)
    if not cortex.any():
        raise ValueError("no cortex labels present in the input map")

    parc = np.where(np.isin(data, parcel_convention.ids), data, 0).astype(np.uint16)
    for hemi_id, hemi_parcels in ((LEFT_CORTEX_ID, left), (RIGHT_CORTEX_ID, right)):
        unparcelled = (data == hemi_id)
        if not unparcelled.any():
            continue
        has_parcel = np.isin(parc, hemi_parcels)
        if not has_parcel.any():
            log.warning("hemisphere %d has cortex but no parcels; parcellation left empty there", hemi_id)
            continue
        _, idx = ndimage.distance_transform_edt(~has_parcel, sampling=labels.grid.spacing, return_indices=True)
        nearest = parc[tuple(idx)]
        parc[unparcelled] = nearest[unparcelled]

    grid = labels.grid
    cortex_map = LabelMap(grid.with_data(cortex), FS35)
    parc_map = LabelMap(grid.with_data(parc), parcel_convention)
    return cortex_map, parc_map


# ---------------------------------------------------------------------------
# Evaluation label sets
# ---------------------------------------------------------------------------

WHOLE_BRAIN_EXCLUDED_NAMES = (
    "Left-choroid-plexus",
    "Right-choroid-plexus",
    "WM-hypointensities",
    "Left-Lateral-Ventricle",
    "Right-Lateral-Ventricle",
    "Left-Inf-Lat-Vent",
    "Right-Inf-Lat-Vent",
    "CSF",
)


def cortex_exclusion_regions(reference: LabelConvention = DK68, evaluated: LabelConvention = DKT62) -> list[str]:
    """Regions of ``evaluated`` whose boundaries differ from ``reference``.

    A reference region without a name match in the evaluated convention was
    merged into neighbours there; those neighbours are excluded.
    """
    ref_regions = {region_of(e.name) for e in reference.entries}
    ev_regions = {region_of(e.name) for e in evaluated.entries}
    out: list[str] = []
    for missing in sorted(ref_regions - ev_regions):
        for region in DKT_ABSORBED.get(missing, ()):
            if region in ev_regions and region not in out:
                out.append(region)
    return out


@dataclass(frozen=True)
class ExclusionSet:
    excluded_ids: frozenset[int]
    reason: str = ""
    convention: LabelConvention = field(default=FS35, compare=False)

    def evaluated_ids(self) -> list[int]:
        return [i for i in self.convention.ids if i not in self.excluded_ids]

    def describe(self) -> str:
        names = ", ".join(f"{i}:{self.convention.name_of(i)}" for i in sorted(self.excluded_ids))
        return f"excluded {len(self.excluded_ids)} labels ({self.reason}): {names or '-'}"


def evaluation_label_set(
    mode: str,
    conventions: tuple[LabelConvention, LabelConvention] | None = None,
    override: list[int] | None = None,
) -> ExclusionSet:
    """Labels left out of DSC/ASD evaluation.

    ``whole-brain`` drops the choroid plexus, WM hypointensities, lateral and
    inferior lateral ventricles and CSF (8 of FS35). ``cortex`` drops the DKT
    regions whose borders disagree with DK (10 of DKT62). ``override`` replaces
    the default id list; an empty list evaluates everything.
    """
    if mode == "whole-brain":
        evaluated, _ = conventions or (FS35, FS35)
        default = [evaluated.id_of(n) for n in WHOLE_BRAIN_EXCLUDED_NAMES if _has_name(evaluated, n)]
        reason = "labels segmented inconsistently across methods (choroid plexus, WM-hypo, ventricles, CSF)"
    elif mode == "cortex":
        evaluated, reference = conventions or (DKT62, DK68)
        regions = set(cortex_exclusion_regions(reference if reference is not evaluated else DK68, evaluated))
        default = [e.label_id for e in evaluated.entries if region_of(e.name) in regions]
        reason = "cortical regions with DK/DKT boundary differences"
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if override is not None:
        unknown = set(override) - set(evaluated.ids)
        if unknown:
            raise ValueError(f"override ids {sorted(unknown)} not in {evaluated.name}")
        default, reason = list(override), "user override"
    excl = ExclusionSet(frozenset(default), reason, evaluated)
    log.info("%s evaluation: %s", mode, excl.describe())
    return excl


def _has_name(conv: LabelConvention, name: str) -> bool:
    return any(e.name == name for e in conv.entries)


# ---------------------------------------------------------------------------
# Convention mapping
# ---------------------------------------------------------------------------


@dataclass
class MappingReport:
    dropped_voxels: dict[int, int] = field(default_factory=dict)

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped_voxels.values())


def name_mapping(source: LabelConvention, target: LabelConvention) -> dict[int, int]:
    """id->id table pairing entries with identical names."""
    by_name = {e.name: e.label_id for e in target.entries}
    return {e.label_id: by_name[e.name] for e in source.entries if e.name in by_name}


def map_convention(labels: LabelMap, target: LabelConvention, table: dict[int, int]) -> tuple[LabelMap, MappingReport]:
    """Relabel through ``table``; anything unmapped or mapped outside ``target`` becomes background."""
    data = np.asarray(labels.data)
    out = np.zeros(data.shape, dtype=np.int64)
    report = MappingReport()
    target_ids = set(target.ids)
    for src in labels.present_ids():
        sel = data == src
        dst = table.get(src)
        if dst is None or (dst != 0 and dst not in target_ids):
            report.dropped_voxels[src] = int(sel.sum())
            continue
        out[sel] = dst
    if report.dropped_voxels:
        log.info("map_convention: %d voxels dropped to background (%s)", report.total_dropped, report.dropped_voxels)
    return LabelMap(labels.grid.with_data(as_label_array(out)), target), report
