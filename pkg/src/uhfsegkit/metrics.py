"""Overlap (DSC) and surface-distance (ASD) evaluation of label maps."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .grid import check_same_geometry
from .labels import ExclusionSet, LabelMap

log = logging.getLogger(__name__)

_SIX = ndimage.generate_binary_structure(3, 1)


def dsc(g: np.ndarray, p: np.ndarray) -> float:
    """Dice overlap of two boolean supports on the same grid.

    Exactly one empty support scores 0; two empty supports score 1.
    """
    g = np.asarray(g, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if g.shape != p.shape:
        raise ValueError(f"grid mismatch: {g.shape} vs {p.shape}")
    ng, np_ = int(g.sum()), int(p.sum())
    if ng == 0 and np_ == 0:
        log.info("dsc: both supports empty, scoring 1.0")
        return 1.0
    inter = int(np.count_nonzero(g & p))
    return 2.0 * inter / (ng + np_)


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    points: np.ndarray  # (n, 3) world mm

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (volume faces count)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~eroded


def surface_points(mask: np.ndarray, affine: np.ndarray) -> SurfacePointSet:
    idx = np.argwhere(boundary_mask(mask)).astype(np.float64)
    pts = idx @ affine[:3, :3].T + affine[:3, 3]
    return SurfacePointSet(pts)


def extract_surface(labels: LabelMap, label_id: int) -> SurfacePointSet:
    return surface_points(np.asarray(labels.data) == label_id, labels.grid.affine)


def asd(g: SurfacePointSet, p: SurfacePointSet) -> float:
    """Symmetric average surface distance in mm; NaN if either surface is empty."""
    if g.count == 0 or p.count == 0:
        return math.nan
    d_gp, _ = cKDTree(p.points).query(g.points, k=1)
    d_pg, _ = cKDTree(g.points).query(p.points, k=1)
    return float((d_gp.sum() + d_pg.sum()) / (g.count + p.count))


@dataclass
class LabelScore:
    label_id: int
    name: str
    dsc: float
    asd_mm: float
    g_voxels: int
    p_voxels: int


def quantiles(values) -> tuple[float, float, float]:
    """(median, Q1, Q3) with linear interpolation between order statistics."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return (math.nan, math.nan, math.nan)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q1), float(q3)


@dataclass
class MetricsReport:
    per_label: list[LabelScore]
    excluded: ExclusionSet
    subject_id: str = ""
    nan_asd_dropped: int = 0
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = self._aggregate()

    def _aggregate(self) -> dict:
        asds = [r.asd_mm for r in self.per_label]
        self.nan_asd_dropped = sum(1 for a in asds if math.isnan(a))
        if self.nan_asd_dropped:
            log.info("aggregate: %d NaN ASD values dropped", self.nan_asd_dropped)
        return {"dsc": quantiles(r.dsc for r in self.per_label), "asd_mm": quantiles(asds)}

    def row(self, label_id: int) -> LabelScore:
        for r in self.per_label:
            if r.label_id == label_id:
                return r
        raise KeyError(label_id)


def evaluate_pair(
    gt: LabelMap, pred: LabelMap, excl: ExclusionSet, subject_id: str = "", labels: list[int] | None = None
) -> MetricsReport:
    """Per-label DSC/ASD over the evaluated labels of ``excl``.

    A label absent from the prediction scores DSC 0 and ASD NaN.
    """
    check_same_geometry(gt.grid, pred.grid, "ground truth and prediction")
    ids = labels if labels is not None else excl.evaluated_ids()
    ids = [i for i in ids if i not in excl.excluded_ids]
    if not ids:
        raise ValueError("no labels left to evaluate")
    g_data, p_data = np.asarray(gt.data), np.asarray(pred.data)
    rows = []
    for lab in sorted(ids):
        g = g_data == lab
        p = p_data == lab
        rows.append(
            LabelScore(
                lab,
                excl.convention.name_of(lab),
                dsc(g, p),
                asd(surface_points(g, gt.grid.affine), surface_points(p, pred.grid.affine)),
                int(g.sum()),
                int(p.sum()),
            )
        )
    return MetricsReport(rows, excl, subject_id)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


CSV_HEADER = ["subject_id", "label_id", "label_name", "dsc", "asd_mm", "g_voxels", "p_voxels"]


def write_metrics_csv(reports: list[MetricsReport], path) -> None:
    """Per-label rows, then aggregate rows (per subject, then pooled over subjects).

    Aggregate rows use ``label_id`` = ``median``/``q1``/``q3`` and
    ``label_name`` = ``all-labels`` (per subject) or ``pooled`` (label rows of
    every subject). NaN is written as an empty field. ``path`` may also be an
    open text stream.
    """
    if hasattr(path, "write"):
        _write_metrics(reports, path)
        return
    with Path(path).open("w", newline="") as fh:
        _write_metrics(reports, fh)


def _write_metrics(reports: list[MetricsReport], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in reports:
        for r in rep.per_label:
            w.writerow([rep.subject_id, r.label_id, r.name, _fmt(r.dsc), _fmt(r.asd_mm), r.g_voxels, r.p_voxels])
    for rep in reports:
        (dm, d1, d3), (am, a1, a3) = rep.aggregate["dsc"], rep.aggregate["asd_mm"]
        for tag, d, a in (("median", dm, am), ("q1", d1, a1), ("q3", d3, a3)):
            w.writerow([rep.subject_id, tag, "all-labels", _fmt(d), _fmt(a), "", ""])
    if len(reports) > 1:
        all_rows = [r for rep in reports for r in rep.per_label]
        dq = quantiles(r.dsc for r in all_rows)
        aq = quantiles(r.asd_mm for r in all_rows)
        for k, tag in enumerate(("median", "q1", "q3")):
            w.writerow(["*", tag, "pooled", _fmt(dq[k]), _fmt(aq[k]), "", ""])
