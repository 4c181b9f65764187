import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchscene import synth
from sketchscene.codec import (CODE, DEFAULT_VOCAB, FAMILIES, FAMILY_MARGIN, SIZE, TRANS, YAW,
                               NormalizationStats, ObjectRecord, ShapeParams, decode_scene,
                               decode_shape, encode_object, encode_scene, encode_shape,
                               load_dataset, save_dataset)
from sketchscene.errors import (CapacityError, CodecError, EmptySceneError, VocabularyError)

V = DEFAULT_VOCAB


def make(cat=0, yaw=0.0, trans=(0.0, 0.0, 0.25), variant=0):
    shape = V.categories[cat].shapes()[variant]
    size = V.nominal_size(cat, variant)
    return ObjectRecord(cat, yaw, size, trans, shape)


def test_yaw_block():
    assert np.allclose(encode_object(make(yaw=math.pi / 2))[YAW], [1.0, 0.0])
    assert np.allclose(encode_object(make(yaw=0.0))[YAW], [0.0, 1.0])


def test_size_ratio_against_half_extent():
    # oracle: plain division of each extent by the declared half extent
    norm = NormalizationStats(room_half_extent=4.0, size_cap=4.0)
    obj = ObjectRecord(0, 0.0, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), V.categories[0].shapes()[0])
    v = encode_object(obj, norm, strict=False)
    assert np.allclose(v[SIZE], [0.25, 0.25, 0.25])
    assert np.allclose(v[TRANS], 0.0)


def test_encode_scene_padding():
    objs = [make(0, trans=(-2, 0, 0.25)), make(1, trans=(0, 1, 0.25)), make(4, trans=(2, 2, 0.5))]
    m = encode_scene(objs, 12)
    norms = np.linalg.norm(m.data, axis=0)
    assert np.count_nonzero(norms == 0) == 9
    assert np.all(norms[:3] > 0)
    full = encode_scene([make(i % 8) for i in range(12)], 12)
    assert np.all(np.linalg.norm(full.data, axis=0) > 0)


def test_encode_errors():
    with pytest.raises(CapacityError):
        encode_scene([make()] * 13, 12)
    with pytest.raises(EmptySceneError):
        encode_scene([], 12)
    with pytest.raises(VocabularyError):
        encode_object(ObjectRecord(99, 0.0, (1, 1, 1), (0, 0, 0), V.categories[0].shapes()[0]))
    with pytest.raises(CodecError):
        ObjectRecord(0, float("nan"), (1, 1, 1), (0, 0, 0), V.categories[0].shapes()[0])


def test_all_zero_matrix_decodes_empty():
    d = decode_scene(np.zeros((16, 12)))
    assert d.empty and d.objects == [] and not d.clean


def nearest_entry_bruteforce(code):
    best, arg = np.inf, -1
    for k, shape in enumerate(V.table_shapes):
        d = math.dist(code, encode_shape(shape))
        if d < best:
            best, arg = d, k
    return arg


def test_noisy_decode_matches_bruteforce_nearest():
    rng = np.random.default_rng(0)
    scenes = synth.sample_corpus(synth.GeneratorConfig(seed=4), 40)
    for scene in scenes:
        m = encode_scene(scene, 12).data
        noisy = m.copy()
        k = len(scene)
        noisy[:, :k] += rng.uniform(-0.01, 0.01, size=(16, k))
        d = decode_scene(noisy)
        assert len(d.objects) == k
        for j, (o, ref) in enumerate(zip(d.objects, scene)):
            entry = nearest_entry_bruteforce(noisy[CODE, j])
            assert o.category == V.table_category[entry] == ref.category
            assert abs(math.remainder(o.yaw - ref.yaw, 2 * math.pi)) < 0.05


def test_shape_roundtrip_and_family_margin():
    box = ShapeParams("box", (1.0, 1.0, 1.0, 0.0))
    assert decode_shape(encode_shape(box)) == box or np.allclose(
        decode_shape(encode_shape(box)).params, box.params)
    # pairwise scan over shapes that differ only in family
    codes = [encode_shape(ShapeParams(f, (0.3, 0.2, 0.4, 0.5))) for f in FAMILIES]
    for i in range(len(codes)):
        for j in range(i + 1, len(codes)):
            assert np.linalg.norm(codes[i] - codes[j]) >= FAMILY_MARGIN - 1e-12
    with pytest.raises(CodecError):
        ShapeParams("torus", (1, 1, 1, 1))


def test_codec_table_separation():
    # variants of one category may sit close; different categories must not
    c, cat = V.table_codes, V.table_category
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    cross = d[cat[:, None] != cat[None, :]]
    assert cross.min() >= 0.35
    assert V.min_entry_separation() > 0.0
    assert np.max(np.abs(V.table_codes)) <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 7), st.integers(0, 1), st.floats(-math.pi, math.pi),
       st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_object_roundtrip_property(cat, variant, yaw, x, y):
    obj = make(cat, yaw, (x, y, V.nominal_size(cat, variant)[2] / 2), variant)
    d = decode_scene(encode_scene([obj], 4))
    (o,) = d.objects
    assert d.clean
    assert o.category == obj.category and o.shape == obj.shape
    assert abs(math.remainder(o.yaw - obj.yaw, 2 * math.pi)) <= 1e-9
    assert np.allclose(o.size, obj.size, atol=1e-9) and np.allclose(o.translation, obj.translation, atol=1e-9)


def test_dataset_file_roundtrip(tmp_path):
    scenes = synth.sample_corpus(synth.GeneratorConfig(seed=2), 5)
    save_dataset(tmp_path / "d.json", scenes)
    back, norm, vocab = load_dataset(tmp_path / "d.json")
    assert back == scenes and norm == NormalizationStats() and vocab.names == V.names
