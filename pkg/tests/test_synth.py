import math

import numpy as np
import pytest

from sketchscene import synth
from sketchscene.codec import DEFAULT_VOCAB, ObjectRecord
from sketchscene.errors import MaskingError
from sketchscene.knowledge import ADJACENT_RELATIONS, analyze_scene, classify_relations

V = DEFAULT_VOCAB


def single_anchor(probs, seed=0, **kw):
    return synth.GeneratorConfig(anchors={"bed": ("nightstand",)},
                                 adjacent={("bed", "nightstand"): probs}, seed=seed, **kw)


def test_certain_attachment_always_touches():
    cfg = single_anchor((1.0, 0.0, 0.0))
    for scene in synth.sample_corpus(cfg, 30):
        groups, rels = analyze_scene(scene)
        bed = [i for i, o in enumerate(scene) if o.category == V.index("bed")]
        ns = [i for i, o in enumerate(scene) if o.category == V.index("nightstand")]
        for i in bed:
            for j in ns:
                assert (min(i, j), max(i, j), "attachment") in rels


def test_zero_probabilities_give_no_adjacent_relations():
    cfg = synth.GeneratorConfig(adjacent={k: (0.0, 0.0, 0.0) for k in synth.GeneratorConfig().adjacent})
    for scene in synth.sample_corpus(cfg, 30):
        _, rels = analyze_scene(scene)
        assert not [r for r in rels if r[2] in ADJACENT_RELATIONS]


def test_attachment_frequency_binomial():
    p, n_scenes = 0.7, 500
    plans = [synth.sample_plan(single_anchor((p, 0.0, 0.0), seed=9), np.random.default_rng(s))
             for s in np.random.SeedSequence(9).spawn(n_scenes)]
    draws = sum(sum(o.category == V.index("nightstand") for o in pl.objects) for pl in plans)
    attached = 0
    for pl in plans:
        rels = classify_relations(pl.objects, pl.group_of)
        attached += sum(1 for (i, j), r in pl.relations.items() if r == "attachment")
        # the generator's own record agrees with the geometric predicate
        for (i, j), r in pl.relations.items():
            assert (i, j, r) in rels
    freq = attached / draws
    assert abs(freq - p) <= max(0.06, 3 * math.sqrt(p * (1 - p) / draws))


def test_no_interpenetration():
    for scene in synth.sample_corpus(synth.GeneratorConfig(seed=5), 40):
        for a in range(len(scene)):
            for b in range(a + 1, len(scene)):
                ca, cb = synth.box_corners(scene[a]), synth.box_corners(scene[b])
                lo = np.maximum(ca.min(0), cb.min(0))
                hi = np.minimum(ca.max(0), cb.max(0))
                overlap = np.prod(np.clip(hi - lo, 0, None))
                assert overlap <= 1e-6


def test_render_empty_and_symmetry_and_views():
    assert not synth.render_sketch([], 0).pixels.any()
    box = ObjectRecord(0, 0.0, V.nominal_size(0, 0), (0.0, 0.0, 0.25), V.categories[0].shapes()[0])
    r = synth.render_sketch([box], 0).pixels
    assert r.any()
    assert np.array_equal(r, r[:, ::-1])
    assert np.count_nonzero(r != synth.render_sketch([box], 5).pixels) > 0


def test_pgm_roundtrip(tmp_path):
    scene = synth.sample_corpus(synth.GeneratorConfig(seed=1), 1)[0]
    r = synth.render_sketch(scene, 3)
    synth.write_pgm(tmp_path / "s.pgm", r)
    back = synth.read_pgm(tmp_path / "s.pgm")
    assert back.pixels.dtype == np.uint8 and set(np.unique(back.pixels)) <= {0, 1}
    assert np.array_equal(back.pixels, r.pixels)


def test_mask_counts():
    rng = np.random.default_rng(0)
    scene = synth.sample_corpus(synth.GeneratorConfig(seed=1), 1)[0]
    s4 = (scene * 4)[:4]
    s5 = (scene * 5)[:5]
    assert len(synth.mask_scene(s4, 0.5, rng)[0]) == 2
    assert len(synth.mask_scene(s5, 0.8, rng)[0]) == 1
    with pytest.raises(MaskingError):
        synth.mask_scene(scene[:1], 0.5, rng)


def test_determinism():
    cfg = synth.GeneratorConfig(seed=7)
    a, b = synth.sample_corpus(cfg, 10), synth.sample_corpus(cfg, 10)
    assert a == b
    assert all(np.array_equal(synth.render_sketch(x, 4).pixels, synth.render_sketch(y, 4).pixels)
               for x, y in zip(a, b))


def test_source_a_differs_from_default():
    a = synth.PRESETS["source-a"](0).planted_table()
    b = synth.PRESETS["default"](0).planted_table()
    assert a != b
