import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import labelmap
from uhfsegkit.labels import DKT62, FS35
from uhfsegkit.synth import (
    CaseFailure,
    CaseStreams,
    SpatialTransform,
    SynthConfig,
    _minmax,
    apply_transform_labels,
    bias_field,
    generate_case,
    generate_corpus,
    render_gmm,
    sample_gmm,
    sample_spatial_transform,
    synthesize_intensities,
    write_case,
)

STATIC = dict(rotation_range=0, scale_range=(1, 1), shear_range=0, translation_range=0, elastic_std=0)
PLAIN = dict(simulate_bias=False, simulate_gamma=False, simulate_resolution=False)


def _blobs(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x, y, z = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    data = np.zeros((n, n, n), np.int32)
    for lab in (2, 17, 41, 53):
        c = rng.uniform(n * 0.3, n * 0.7, 3)
        data[(x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= (n / 5) ** 2] = lab
    return labelmap(data)


def test_config_round_trip_and_validation(tmp_path):
    cfg = SynthConfig(seed=3, replication=2, scale_range=(0.9, 1.1))
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"sed": 1})
    with pytest.raises(ValueError):
        SynthConfig(replication=0)
    with pytest.raises(ValueError):
        SynthConfig(gmm_std_range=(5, 1))


def test_identity_transform_from_degenerate_ranges():
    m = _blobs()
    t = sample_spatial_transform(SynthConfig(**STATIC), CaseStreams(0).stage("spatial"), m.grid)
    assert t.is_identity
    assert np.array_equal(apply_transform_labels(m, t).data, m.data)


def test_same_stream_same_transform():
    m = _blobs()
    cfg = SynthConfig(seed=11)
    a = sample_spatial_transform(cfg, CaseStreams(11, 4, 1).stage("spatial"), m.grid)
    b = sample_spatial_transform(cfg, CaseStreams(11, 4, 1).stage("spatial"), m.grid)
    c = sample_spatial_transform(cfg, CaseStreams(11, 5, 1).stage("spatial"), m.grid)
    assert a.params() == b.params() and np.array_equal(a.elastic, b.elastic)
    assert a.params() != c.params()


@pytest.mark.parametrize("shift", [(3, 0, 0), (0, -2, 1), (1, 1, 1)])
def test_integer_translation_is_index_shift(shift):
    m = _blobs(16)
    spacing = 0.8
    m = labelmap(m.data, spacing=(spacing,) * 3)
    t = SpatialTransform(translation=np.array(shift, dtype=np.float64) * spacing)
    out = apply_transform_labels(m, t).data
    # oracle: out[i] = in[i + shift], background where i + shift leaves the volume
    expect = np.zeros_like(m.data)
    n = m.data.shape[0]
    for i in np.ndindex(m.data.shape):
        j = tuple(a + s for a, s in zip(i, shift))
        if all(0 <= v < n for v in j):
            expect[i] = m.data[j]
    assert np.array_equal(out, expect)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_transforms_are_invertible_and_preserve_ids(seed):
    m = _blobs(20)
    cfg = SynthConfig(seed=seed, elastic_spacing=10.0)
    t = sample_spatial_transform(cfg, CaseStreams(seed).stage("spatial"), m.grid)
    assert np.all(t.jacobian_dets(m.grid) > 0)
    assert set(np.unique(apply_transform_labels(m, t).data)) <= set(np.unique(m.data))


def test_bias_zero_std_is_ones():
    m = _blobs(12)
    f = bias_field(m.grid, SynthConfig(bias_std=0.0), CaseStreams(0).stage("bias"))
    assert np.all(f.data == 1.0)


def test_bias_field_positive_and_smooth():
    m = _blobs(24)
    f = np.asarray(bias_field(m.grid, SynthConfig(bias_std=0.5), CaseStreams(0).stage("bias")).data)
    assert f.min() > 0
    assert np.abs(np.diff(np.log(f), axis=0)).max() < 0.2


def test_single_label_constant_image():
    m = labelmap(np.full((8, 8, 8), 17))
    cfg = SynthConfig(gmm_std_range=(0, 0), **PLAIN)
    img = synthesize_intensities(m, cfg, CaseStreams(0))
    assert len(np.unique(img.data)) == 1


def test_two_labels_two_values():
    data = np.zeros((8, 8, 8), np.int32)
    data[:4] = 17
    m = labelmap(data)
    cfg = SynthConfig(gmm_std_range=(0, 0), **PLAIN)
    img = synthesize_intensities(m, cfg, CaseStreams(0))
    assert len(np.unique(img.data)) == 2


def test_gmm_means_match():
    data = np.zeros((64, 64, 64), np.int32)
    data[32:] = 17
    streams = CaseStreams(5)
    rng = streams.stage("gmm")
    ids = [0, 17]
    cfg = SynthConfig()
    means, stds = sample_gmm(ids, cfg, rng)
    img = render_gmm(data, ids, means, stds, rng)
    for k, lab in enumerate(ids):
        vals = img[data == lab]
        assert vals.size >= 100_000
        assert abs(vals.mean() - means[k]) <= 3 * stds[k] / np.sqrt(vals.size)


def test_degenerate_config_renders_plain_gmm():
    m = _blobs(16)
    cfg = SynthConfig(seed=9, **STATIC, **PLAIN)
    case = generate_case(m, cfg, 0, 0)
    rng = CaseStreams(9, 0, 0).stage("gmm")
    ids = sorted(np.unique(m.data).tolist())
    means, stds = sample_gmm(ids, cfg, rng)
    expect = _minmax(render_gmm(np.asarray(m.data), ids, means, stds, rng)).astype(np.float32)
    assert np.array_equal(case.image.data, expect)
    assert np.array_equal(case.labels.data, m.data)


def test_image_and_labels_share_the_transform():
    m = _blobs(20)
    cfg = SynthConfig(seed=2, gmm_std_range=(0, 0), elastic_spacing=8.0, **PLAIN)
    case = generate_case(m, cfg, 0, 0)
    img, lab = np.asarray(case.image.data), np.asarray(case.labels.data)
    for k in np.unique(lab):
        assert len(np.unique(img[lab == k])) == 1
    # distinct labels got distinct constants, so the image determines the labels
    assert len(np.unique(img)) == len(np.unique(lab))


def test_stage_order_recorded():
    case = generate_case(_blobs(16), SynthConfig(seed=1), 0, 0)
    assert case.provenance["stage_order"] == ["gmm", "bias", "gamma", "resolution", "normalize"]
    img = np.asarray(case.image.data)
    assert img.min() == 0.0 and img.max() == 1.0


def test_replication_count():
    inputs = [_blobs(12, s) for s in range(3)]
    cases = list(generate_corpus(inputs, SynthConfig(replication=2)))
    assert len(cases) == 6
    assert [(c.index, c.replicate) for c in cases] == [(i, r) for i in range(3) for r in range(2)]


def _files(cases, root):
    out = {}
    for c in cases:
        for p in write_case(c, root):
            out[p.name] = p.read_bytes()
    return out


def test_corpus_deterministic_across_workers(tmp_path):
    inputs = [_blobs(16, s) for s in range(2)]
    cfg = SynthConfig(seed=4, replication=2)
    a = _files(generate_corpus(inputs, cfg, jobs=1), tmp_path / "a")
    b = _files(generate_corpus(inputs, cfg, jobs=2), tmp_path / "b")
    assert a == b and len(a) == 12


def test_labels_only_mode():
    cases = list(generate_corpus([_blobs(12)], SynthConfig(intensity_synthesis=False, replication=2)))
    assert all(c.image is None for c in cases)
    assert not np.array_equal(cases[0].labels.data, cases[1].labels.data)


def test_labels_only_parcellation_gets_cortex_input():
    data = np.zeros((12, 12, 12), np.int32)
    data[2:6, 2:10, 2:10] = 1035
    data[6:10, 2:10, 2:10] = 2035
    case = generate_case(labelmap(data, convention=DKT62), SynthConfig(intensity_synthesis=False, **STATIC), 0, 0)
    assert case.image is None
    assert set(np.unique(case.input_labels.data)) == {0, 3, 42}
    assert case.input_labels.convention is FS35


def test_case_failure_is_isolated():
    bad = SynthConfig(elastic_std=500.0, elastic_spacing=2.0)
    cases = list(generate_corpus([_blobs(8)], bad))
    assert isinstance(cases[0], CaseFailure)
    assert "invertible" in cases[0].error


def test_write_case_outputs(tmp_path):
    case = generate_case(_blobs(12), SynthConfig(seed=1), 2, 1, "subj")
    names = sorted(p.name for p in write_case(case, tmp_path))
    assert names == ["subj_r01_image.nii.gz", "subj_r01_labels.nii.gz", "subj_r01_params.json"]
    prov = json.loads((tmp_path / "subj_r01_params.json").read_text())
    assert prov["seed"] == 1 and prov["case_index"] == 2 and prov["replicate"] == 1
