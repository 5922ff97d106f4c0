"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they happen; the summary block at the end of every pytest run repeats them.
"""
import functools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import ndimage

from conftest import labelmap
from oracles import brute_asd, exact_dsc, mann_whitney_enumerate
from uhfsegkit import labels as lab
from uhfsegkit.ensemble import ProbabilityStack, average_and_argmax
from uhfsegkit.grid import VoxelGrid
from uhfsegkit.metrics import asd, dsc, evaluate_pair, surface_points
from uhfsegkit.nifti import DATATYPES, load_nifti, make_header, save_nifti
from uhfsegkit.phantom import make_phantom
from uhfsegkit.resample import ResampleSpec, resample_image, resample_labels
from uhfsegkit.stats import GroupSample, bonferroni, format_threshold, mann_whitney_u
from uhfsegkit.synth import (
    CaseStreams,
    SynthConfig,
    bias_field,
    generate_case,
    generate_corpus,
    render_gmm,
    sample_gmm,
    write_case,
)
from uhfsegkit.volumetry import normalize_by_tiv, structure_volumes

RESULTS: list[tuple[str, bool, float, str]] = []


def criterion(cid: str, text: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException:
                RESULTS.append((cid, False, time.perf_counter() - t0, text))
                print(f"\n[FAIL] {cid} {text}")
                raise
            RESULTS.append((cid, True, time.perf_counter() - t0, text))
            print(f"\n[PASS] {cid} {text} ({time.perf_counter() - t0:.1f}s)")

        return run

    return wrap


def _random_map(rng, max_side=16):
    shape = tuple(int(n) for n in rng.integers(1, max_side + 1, 3))
    ids = rng.choice([0, 2, 17, 41, 53], size=int(rng.integers(2, 5)), replace=False)
    if rng.random() < 0.5:
        return ids[rng.integers(0, len(ids), shape)]
    # smooth random blobs give realistic surfaces
    field = ndimage.gaussian_filter(rng.standard_normal((len(ids),) + shape), (0, 1.5, 1.5, 1.5))
    return ids[field.argmax(axis=0)]


@criterion("AC1", "fast ASD equals brute force within 1e-9 mm and DSC equals exact rationals on 200 random maps <= 16^3")
def test_asd_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = 0
    for _ in range(200):
        g = _random_map(rng)
        p = g.copy()
        flip = rng.random(g.shape) < rng.uniform(0, 0.5)
        p[flip] = rng.choice(np.unique(g), flip.sum())
        spacing = rng.choice([0.5, 0.7, 0.8, 1.0, 1.2], 3)
        aff = np.diag([*spacing, 1.0])
        for label in np.unique(np.concatenate([g.ravel(), p.ravel()])):
            gm, pm = g == label, p == label
            fast = asd(surface_points(gm, aff), surface_points(pm, aff))
            slow = brute_asd(gm, pm, aff)
            assert (math.isnan(fast) and math.isnan(slow)) or abs(fast - slow) <= 1e-9
            assert Fraction(dsc(gm, pm)) == Fraction(float(exact_dsc(gm, pm)))
            checked += 1
    assert checked >= 400
    assert time.perf_counter() - t0 < 60


@criterion("AC2", "missing label gives DSC 0 / ASD NaN; whole-brain evaluates 27 labels, cortex 52")
def test_evaluation_conventions():
    gt = np.zeros((8, 8, 8), int)
    gt[1:4, 1:4, 1:4] = 17
    gt[4:7, 4:7, 4:7] = 2
    pred = np.where(gt == 17, 0, gt)
    rep = evaluate_pair(labelmap(gt), labelmap(pred), lab.evaluation_label_set("whole-brain"))
    row = rep.row(17)
    assert row.dsc == 0.0 and math.isnan(row.asd_mm)
    assert len(rep.per_label) == 27
    assert len(lab.evaluation_label_set("whole-brain").evaluated_ids()) == 27
    cortex = lab.evaluation_label_set("cortex")
    assert len(cortex.evaluated_ids()) == 52
    parc = np.zeros((6, 6, 6), int)
    parc[:3] = 1035
    parc[3:] = 2035
    rep = evaluate_pair(labelmap(parc, convention=lab.DKT62), labelmap(parc, convention=lab.DKT62), cortex)
    assert len(rep.per_label) == 52


def _sphere_map(centre, n=32, r=10.0):
    x, y, z = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    inside = (x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2 <= r * r
    return inside.astype(np.int32) * 17


@criterion("AC3", "identity label resample is bit-identical; r=10 sphere keeps volume within 5% at 1.0->0.8 mm; ids never grow")
def test_label_resampling():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m = labelmap(_random_map(rng))
        out = resample_labels(m, ResampleSpec.like(m.grid))
        assert out.data.dtype == m.data.dtype and out.data.tobytes() == m.data.tobytes()
    for centre in [(15.5, 15.5, 15.5), (15.0, 15.0, 15.0), (15.3, 16.1, 15.7), (14.8, 15.2, 16.4)]:
        src = _sphere_map(centre)
        out = resample_labels(labelmap(src), ResampleSpec(target_spacing=(0.8, 0.8, 0.8)))
        v_in = sum(1 for v in src.ravel() if v) * 1.0
        v_out = sum(1 for v in np.asarray(out.data).ravel() if v) * 0.512
        assert abs(v_out / v_in - 1) < 0.05, (centre, v_out / v_in)
    for _ in range(30):
        data = _random_map(rng)
        spacing = tuple(rng.uniform(0.4, 2.5, 3))
        out = resample_labels(labelmap(data), ResampleSpec(target_spacing=spacing))
        assert set(np.unique(out.data)) <= set(np.unique(data)) | {0}


def _corpus_bytes(inputs, cfg, jobs, root):
    files = {}
    for case in generate_corpus(inputs, cfg, jobs=jobs):
        for p in write_case(case, root):
            files[p.name] = p.read_bytes()
    return files


@criterion("AC4", "synthesis byte-identical across 1/2/8 workers; GMM means within 3 sigma/sqrt(N); zero bias_std gives ones; label-only mode; < 120 s at 64^3")
def test_synthesis(tmp_path):
    t0 = time.perf_counter()
    base, _ = make_phantom(64)
    shifted = labelmap(np.roll(np.asarray(base.data), 3, axis=0))
    inputs = [base, shifted]
    cfg = SynthConfig(seed=99, replication=2)
    ref = _corpus_bytes(inputs, cfg, 1, tmp_path / "j1")
    assert len(ref) == 12
    for jobs in (2, 8):
        assert _corpus_bytes(inputs, cfg, jobs, tmp_path / f"j{jobs}") == ref

    # plain GMM rendering on two labels of >= 1e5 voxels each
    data = np.zeros((64, 64, 64), np.int32)
    data[:, :, 32:] = 17
    plain = SynthConfig(seed=5, simulate_bias=False, simulate_gamma=False, simulate_resolution=False)
    rng = CaseStreams(plain.seed).stage("gmm")
    ids = [0, 17]
    means, stds = sample_gmm(ids, plain, rng)
    img = render_gmm(data, ids, means, stds, rng)
    for k, label in enumerate(ids):
        vals = img[data == label]
        assert vals.size >= 100_000
        assert abs(vals.mean() - means[k]) <= 3 * stds[k] / math.sqrt(vals.size)

    field = bias_field(base.grid, SynthConfig(bias_std=0.0), CaseStreams(1).stage("bias"))
    assert np.all(np.asarray(field.data) == 1.0)

    cases = list(generate_corpus([base], SynthConfig(seed=3, intensity_synthesis=False, replication=2)))
    assert all(c.image is None and c.labels is not None for c in cases)
    assert set(np.unique(cases[0].labels.data)) <= set(np.unique(base.data))
    assert time.perf_counter() - t0 < 120


@criterion("AC5", "3 input maps with replication=2 emit exactly 6 cases")
def test_replication():
    inputs = [labelmap(np.full((8, 8, 8), i)) for i in (2, 17, 41)]
    cases = list(generate_corpus(inputs, SynthConfig(replication=2, intensity_synthesis=False)))
    assert len(cases) == 6
    assert sorted((c.index, c.replicate) for c in cases) == [(i, r) for i in range(3) for r in range(2)]


@criterion("AC6", "5 identical one-hot stacks reproduce labels; mean (0.44, 0.56) picks channel 2; invariant over 20 fold shuffles")
def test_ensembling():
    rng = np.random.default_rng(11)
    ids = [0, 2, 17, 41]
    labels = rng.choice(ids, (9, 8, 7))
    onehot = np.stack([(labels == i).astype(np.float32) for i in ids])
    out = average_and_argmax([ProbabilityStack.from_array(onehot, ids) for _ in range(5)])
    assert np.array_equal(out.data, labels)

    folds = [ProbabilityStack.from_array(np.array(p, np.float32).reshape(2, 1, 1, 1), (2, 17))
             for p in [(0.6, 0.4)] * 3 + [(0.2, 0.8)] * 2]
    assert average_and_argmax(folds).data.ravel().tolist() == [17]

    stacks = [ProbabilityStack.from_array(rng.dirichlet(np.ones(4), (9, 8, 7)).transpose(3, 0, 1, 2).astype(np.float32), ids)
              for _ in range(5)]
    ref = average_and_argmax(stacks).data.tobytes()
    for _ in range(20):
        assert average_and_argmax([stacks[i] for i in rng.permutation(5)]).data.tobytes() == ref


@criterion("AC7", "10 voxels at (0.8 mm)^3 give exactly 5.12 mm^3; TIV additive on disjoint maps; override arithmetic within 1e-12")
def test_volumetry():
    data = np.zeros((5, 5, 5), int)
    data.flat[:10] = 17
    rep = structure_volumes(labelmap(data, spacing=(0.8, 0.8, 0.8)))
    assert rep.volume(17) == 5.12

    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.choice([0, 2, 17], (6, 5, 4))
        b = np.where(a > 0, 0, rng.choice([0, 41, 53], (6, 5, 4)))
        sp = (0.8, 0.8, 0.8)
        ta = structure_volumes(labelmap(a, sp)).tiv_mm3
        tb = structure_volumes(labelmap(b, sp)).tiv_mm3
        assert structure_volumes(labelmap(a + b, sp)).tiv_mm3 == pytest.approx(ta + tb, abs=1e-12)

    data = np.zeros((10, 10, 10), int)
    data.flat[:123] = 17
    data.flat[123:400] = 2
    rep = normalize_by_tiv(structure_volumes(labelmap(data, spacing=(0.8, 0.8, 0.8))), tiv_override=1_450_000.0)
    assert abs(rep.normalized[17] - (123 * 0.512) / 1_450_000.0) <= 1e-12
    assert abs(rep.normalized[2] - (277 * 0.512) / 1_450_000.0) <= 1e-12
    assert rep.tiv_mm3 == pytest.approx(400 * 0.512, abs=1e-9)


@criterion("AC8", "exact Mann-Whitney p({1,2,3},{4,5,6}) = 0.1; Bonferroni alpha 0.05, m 8 gives 0.00625 (shown 0.006); rank invariance on 100 samples")
def test_statistics():
    u, p = mann_whitney_u(GroupSample("a", (1, 2, 3)), GroupSample("b", (4, 5, 6)))
    u_o, p_o = mann_whitney_enumerate([1, 2, 3], [4, 5, 6])
    assert (u, p) == (u_o, p_o) == (0.0, 0.1)
    res = bonferroni([0.004] + [0.2] * 7, alpha=0.05, m=8)
    assert res[0].threshold == 0.05 / 8 == 0.00625
    assert format_threshold(res[0].threshold) == "0.006"
    assert res[0].significant

    rng = np.random.default_rng(3)
    transforms = [np.exp, lambda x: x**3 + x, lambda x: 2.5 * x + 7, np.arctan]
    for k in range(100):
        n1, n2 = int(rng.integers(3, 15)), int(rng.integers(3, 15))
        a = rng.normal(0, 1, n1)
        b = rng.normal(rng.uniform(-1, 1), 1, n2)
        if k % 3 == 0:  # exercise ties
            a, b = np.round(a, 1), np.round(b, 1)
        f = transforms[k % len(transforms)]
        assert mann_whitney_u(a.tolist(), b.tolist()) == mann_whitney_u(f(a).tolist(), f(b).tolist())


@criterion("AC9", "64^3 phantom: CSF relabel, synthesis, 1.0->0.8->1.0 mm label round trip keeps every DSC >= 0.90; self-evaluation 1.0/0.0; < 3 min")
def test_end_to_end_phantom():
    t0 = time.perf_counter()
    labels, mask = make_phantom(64)
    prepped = lab.relabel_unassigned_to_csf(labels, mask)
    assert 24 in prepped.data and not np.any((np.asarray(mask.data) > 0) & (np.asarray(prepped.data) == 0))

    case = generate_case(prepped, SynthConfig(seed=2024), 0, 0, "phantom")
    assert case.image is not None and np.isfinite(case.image.data).all()
    up_img = resample_image(case.image, ResampleSpec(target_spacing=(0.8, 0.8, 0.8)))
    assert up_img.dims == (80, 80, 80)

    up = resample_labels(prepped, ResampleSpec(target_spacing=(0.8, 0.8, 0.8)))
    back = resample_labels(up, ResampleSpec.like(prepped.grid))
    excl = lab.evaluation_label_set("whole-brain")
    rep = evaluate_pair(prepped, back, excl, "phantom")
    assert len(rep.per_label) == 27
    worst = min(rep.per_label, key=lambda r: r.dsc)
    assert worst.dsc >= 0.90, worst

    self_rep = evaluate_pair(prepped, prepped, excl)
    assert all(r.dsc == 1.0 and r.asd_mm == 0.0 for r in self_rep.per_label)
    assert time.perf_counter() - t0 < 180


@criterion("AC10", "NIfTI round trip is bit-exact for every datatype with and without gzip; scl_slope/scl_inter applied")
def test_nifti_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    aff = np.array([[-0.8, 0, 0, 90.0], [0, 0.8, 0, -126.0], [0, 0, 1.2, -72.0], [0, 0, 0, 1]])
    for dt in sorted({d.str for d in DATATYPES.values()}):
        dt = np.dtype(dt)
        if dt.kind == "f":
            data = rng.standard_normal((7, 6, 5)).astype(dt)
        else:
            info = np.iinfo(dt)
            data = rng.integers(info.min, info.max, (7, 6, 5), dtype=dt, endpoint=True)
        g = VoxelGrid(data, aff)
        for name in ("x.nii", "x.nii.gz"):
            save_nifti(g, tmp_path / name)
            back = load_nifti(tmp_path / name)
            assert back.data.dtype == dt and back.data.tobytes() == g.data.tobytes()
            assert np.allclose(back.affine, aff, atol=1e-6)

    raw = np.full((2, 2, 2), 3, np.int16)
    hdr = make_header(VoxelGrid(raw, np.eye(4)))
    hdr["scl_slope"], hdr["scl_inter"] = 2.0, 1.0
    (tmp_path / "s.nii").write_bytes(hdr.tobytes() + b"\0" * 4 + raw.tobytes(order="F"))
    assert np.all(load_nifti(tmp_path / "s.nii").data == 7.0)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
