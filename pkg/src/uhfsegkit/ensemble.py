"""Fold ensembling: average per-fold softmax volumes, then take the argmax."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GeometryError, VoxelGrid
from .labels import DKT62, FS35, LabelConvention, LabelEntry, LabelMap, as_label_array
from .nifti import load_nifti

SUM_TOL = 1e-3


@dataclass(frozen=True, eq=False)
class ProbabilityStack:
    """One fold's class probabilities, one volume per channel (background included)."""

    grids: tuple[VoxelGrid, ...]
    channel_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.grids) != len(self.channel_ids) or not self.grids:
            raise ValueError("need one grid per channel id")
        if len(set(self.channel_ids)) != len(self.channel_ids):
            raise ValueError("duplicate channel ids")
        ref = self.grids[0]
        for g in self.grids[1:]:
            if not g.same_geometry(ref):
                raise GeometryError("channel grids differ in geometry")

    @classmethod
    def from_array(cls, probs, channel_ids, affine=None) -> "ProbabilityStack":
        """``probs`` shaped (channels, x, y, z)."""
        aff = np.eye(4) if affine is None else affine
        return cls(tuple(VoxelGrid(np.asarray(p), aff) for p in probs), tuple(int(c) for c in channel_ids))

    def array(self) -> np.ndarray:
        return np.stack([np.asarray(g.data, dtype=np.float64) for g in self.grids])


def _fold_sums(stack: ProbabilityStack) -> np.ndarray:
    s = np.zeros(stack.grids[0].dims, dtype=np.float64)
    for g in stack.grids:
        p = np.asarray(g.data, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite probabilities")
        if p.min() < -SUM_TOL or p.max() > 1 + SUM_TOL:
            raise ValueError("probabilities outside [0, 1]")
        s += p
    if np.any(np.abs(s - 1.0) > SUM_TOL):
        raise ValueError(f"channel sums deviate from 1 by more than {SUM_TOL}")
    return s


def _digest(stack: ProbabilityStack) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for g in stack.grids:
        h.update(np.ascontiguousarray(g.data).view(np.uint8))
    return h.digest()


def average_and_argmax(folds: list[ProbabilityStack], convention: LabelConvention | None = None) -> LabelMap:
    """Mean probability over folds per channel, then per-voxel argmax.

    Each fold is renormalised to unit channel sum first. Channels are visited
    in ascending id order and only a strictly larger mean replaces the
    current winner, so ties resolve to the smallest id. Folds are summed in
    a content-derived order, which makes the result bit-identical under any
    permutation of ``folds``.
    """
    if not folds:
        raise ValueError("need at least one fold")
    ref = folds[0]
    for f in folds[1:]:
        if tuple(f.channel_ids) != tuple(ref.channel_ids):
            raise ValueError("channel ids differ between folds")
        if not f.grids[0].same_geometry(ref.grids[0]):
            raise GeometryError("fold geometries differ")

    folds = sorted(folds, key=_digest)
    sums = [_fold_sums(f) for f in folds]
    dims = ref.grids[0].dims
    best = np.full(dims, -np.inf)
    labels = np.zeros(dims, dtype=np.int64)
    for c in np.argsort(ref.channel_ids, kind="stable"):
        total = np.zeros(dims, dtype=np.float64)
        for f, s in zip(folds, sums):
            total += np.asarray(f.grids[c].data, dtype=np.float64) / s
        mean = total / len(folds)
        win = mean > best
        best[win] = mean[win]
        labels[win] = ref.channel_ids[c]

    ids = sorted(ref.channel_ids)
    if convention is None:
        convention = _convention_for(ids)
    return LabelMap(VoxelGrid(as_label_array(labels), ref.grids[0].affine), convention)


def _convention_for(ids) -> LabelConvention:
    fg = [int(i) for i in ids if i != 0]
    for conv in (FS35, DKT62):
        if set(fg) <= set(conv.ids):
            return conv
    return LabelConvention("channels", tuple(LabelEntry(i, f"label-{i}") for i in fg))


def load_manifest(path) -> list[ProbabilityStack]:
    """Read ``{"folds": [{"channels": [{"file": ..., "label_id": ...}]}]}``.

    Relative file paths resolve against the manifest's directory.
    """
    path = Path(path)
    spec = json.loads(path.read_text())
    if not isinstance(spec, dict) or "folds" not in spec:
        raise ValueError("manifest needs a 'folds' list")
    stacks = []
    for k, fold in enumerate(spec["folds"]):
        chans = fold.get("channels") or []
        if not chans:
            raise ValueError(f"fold {k} has no channels")
        grids, ids = [], []
        for ch in chans:
            f = Path(ch["file"])
            if not f.is_absolute():
                f = path.parent / f
            grids.append(load_nifti(f))
            ids.append(int(ch["label_id"]))
        stacks.append(ProbabilityStack(tuple(grids), tuple(ids)))
    return stacks
