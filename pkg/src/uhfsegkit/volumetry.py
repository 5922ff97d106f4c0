"""Structure volumes, total intracranial volume (TIV) and TIV normalisation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .labels import LabelMap


def voxel_volume(spacing) -> float:
    """Product of the spacing components, correctly rounded.

    Each component is taken at its shortest decimal representation so that
    e.g. (0.8, 0.8, 0.8) gives exactly the double nearest 0.512.
    """
    v = Fraction(1)
    for s in spacing:
        v *= Fraction(repr(float(s)))
    return float(v)


@dataclass(frozen=True)
class VolumeRow:
    label_id: int
    name: str
    voxels: int
    volume_mm3: float


@dataclass(frozen=True)
class VolumeReport:
    subject_id: str
    rows: tuple[VolumeRow, ...]
    tiv_mm3: float
    voxel_volume_mm3: float
    tiv_reference_mm3: float | None = None
    normalized: dict = field(default_factory=dict)

    @property
    def tiv_used_mm3(self) -> float:
        return self.tiv_reference_mm3 if self.tiv_reference_mm3 is not None else self.tiv_mm3

    def volume(self, label_id: int) -> float:
        for r in self.rows:
            if r.label_id == label_id:
                return r.volume_mm3
        return 0.0


def structure_volumes(labels: LabelMap, subject_id: str = "", tiv_exclude=()) -> VolumeReport:
    """One row per label present; TIV sums every non-background structure.

    ``tiv_exclude`` removes ids from the TIV sum only (their rows stay).
    """
    vv = voxel_volume(labels.grid.spacing)
    data = np.asarray(labels.data)
    ids, counts = np.unique(data, return_counts=True)
    rows = []
    for lab, n in zip(ids, counts):
        if lab == labels.background_id:
            continue
        rows.append(VolumeRow(int(lab), labels.convention.name_of(int(lab)), int(n), int(n) * vv))
    skip = set(int(i) for i in tiv_exclude)
    tiv = math.fsum(r.volume_mm3 for r in rows if r.label_id not in skip)
    return VolumeReport(subject_id, tuple(rows), tiv, vv)


def normalize_by_tiv(report: VolumeReport, tiv_override: float | None = None) -> VolumeReport:
    """Fill ``normalized`` with volume / TIV.

    With ``tiv_override`` (an external estimate, mm³) the override is the
    denominator; the internally summed TIV is kept in ``tiv_mm3``.
    """
    if tiv_override is not None and not tiv_override > 0:
        raise ValueError(f"TIV override must be positive, got {tiv_override}")
    tiv = tiv_override if tiv_override is not None else report.tiv_mm3
    if not tiv > 0:
        raise ValueError("TIV must be positive to normalise")
    norm = {r.label_id: r.volume_mm3 / tiv for r in report.rows}
    return replace(report, tiv_reference_mm3=tiv_override, normalized=norm)


# ---------------------------------------------------------------------------
# TIV comparison against an external reference
# ---------------------------------------------------------------------------


@dataclass
class Fit:
    n: int
    r: float
    slope: float
    intercept: float


@dataclass
class TivComparison:
    rows: list[tuple[str, str, float, float]]  # subject, group, ours, reference
    overall: Fit
    by_group: dict[str, Fit] = field(default_factory=dict)


def _fit(x, y) -> Fit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise ValueError(f"need >= 3 matched subjects, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("zero-variance TIV series")
    res = sps.linregress(x, y)
    return Fit(len(x), float(res.rvalue), float(res.slope), float(res.intercept))


def tiv_compare(ours, reference, groups: dict[str, str] | None = None) -> TivComparison:
    """Match (subject, tiv) pairs by subject and regress ours on the reference.

    Pearson r and the least-squares line ``ours = slope * reference +
    intercept`` are reported overall and per group when ``groups`` maps
    subjects to a dataset/group name.
    """
    ours_d = {str(s): float(v) for s, v in ours}
    ref_d = {str(s): float(v) for s, v in reference}
    subjects = sorted(set(ours_d) & set(ref_d))
    groups = groups or {}
    rows = [(s, groups.get(s, ""), ours_d[s], ref_d[s]) for s in subjects]
    overall = _fit([r[3] for r in rows], [r[2] for r in rows])
    by_group = {}
    for g in sorted({r[1] for r in rows if r[1]}):
        sel = [r for r in rows if r[1] == g]
        if len(sel) >= 3:
            by_group[g] = _fit([r[3] for r in sel], [r[2] for r in sel])
    return TivComparison(rows, overall, by_group)


def read_tiv_csv(path) -> tuple[list[tuple[str, float]], dict[str, str]]:
    """``subject_id,tiv_mm3[,group]`` -> (pairs, groups)."""
    pairs, groups = [], {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            pairs.append((r["subject_id"], float(r["tiv_mm3"])))
            if r.get("group"):
                groups[r["subject_id"]] = r["group"]
    return pairs, groups


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_volumes_csv(reports: list[VolumeReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label_id", "name", "voxels", "volume_mm3", "normalized"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.subject_id, r.label_id, r.name, r.voxels, _num(r.volume_mm3), _num(rep.normalized.get(r.label_id))])


def write_tiv_csv(reports: list[VolumeReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "tiv_mm3", "tiv_reference_mm3"])
        for rep in reports:
            w.writerow([rep.subject_id, _num(rep.tiv_mm3), _num(rep.tiv_reference_mm3)])


def write_comparison_csv(cmp: TivComparison, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "group", "tiv_mm3", "reference_tiv_mm3"])
        for s, g, o, r in cmp.rows:
            w.writerow([s, g, _num(o), _num(r)])
        w.writerow([])
        w.writerow(["fit", "n", "pearson_r", "slope", "intercept"])
        for name, fit in [("all", cmp.overall), *cmp.by_group.items()]:
            w.writerow([name, fit.n, _num(fit.r), _num(fit.slope), _num(fit.intercept)])


def plot_comparison_svg(cmp: TivComparison, path, xlabel: str = "reference TIV (mm³)", ylabel: str = "TIV (mm³)") -> None:
    """Scatter with identity line and one regression line per group."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "uhfsegkit"
    fig, ax = plt.subplots(figsize=(5, 5))
    xs = np.array([r[3] for r in cmp.rows])
    ys = np.array([r[2] for r in cmp.rows])
    lo, hi = float(min(xs.min(), ys.min())), float(max(xs.max(), ys.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=1, label="identity")
    fits = cmp.by_group or {"all": cmp.overall}
    for g, fit in fits.items():
        sel = [r for r in cmp.rows if g == "all" or r[1] == g]
        ax.scatter([r[3] for r in sel], [r[2] for r in sel], s=12)
        ax.plot([lo, hi], [fit.slope * lo + fit.intercept, fit.slope * hi + fit.intercept], lw=1, label=f"{g} (r={fit.r:.2f})")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
