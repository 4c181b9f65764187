import numpy as np
import pytest

from sketchscene import synth
from sketchscene.checkpoint import read_checkpoint, write_checkpoint
from sketchscene.codec import DEFAULT_VOCAB, encode_scene
from sketchscene.config import ModelConfig, RunConfig
from sketchscene.diffusion import make_schedule
from sketchscene.errors import CapacityError, CheckpointError, ConfigError
from sketchscene.experiments import place_known
from sketchscene.knowledge import build_kb
from sketchscene.model import SceneModel
from sketchscene.training import canonical_order, entity_list, fit, known_slots, prepare

NAMES = DEFAULT_VOCAB.names
SMALL = ModelConfig(width=16, heads=2, sketch_blocks=1)


def test_checkpoint_file_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array(1.5), "e": np.zeros((0, 4))}
    write_checkpoint(tmp_path / "x.ckpt", arrays)
    back = read_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(arrays)
    assert all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in arrays.items())
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")


def test_model_roundtrip_and_resume(tmp_path):
    data = prepare(synth.sample_corpus(synth.GeneratorConfig(seed=0), 6), views=[0, 1])
    kb = build_kb(data.scenes)
    model = SceneModel(SMALL, NAMES, kb, seed=3)
    sched = make_schedule()
    opt, _ = fit(model, data, sched, 3, np.random.default_rng(0), batch_size=4, total_steps=6)
    model.save(tmp_path / "m.ckpt", 3, opt)
    back, step, opt2 = SceneModel.load(tmp_path / "m.ckpt", NAMES, kb)
    assert step == 3 and back.cfg == model.cfg and opt2.t == opt.t
    for k, p in model.params.items():
        assert np.array_equal(p.data, back.params[k].data)
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])
    # continuing the resumed copy equals continuing the original
    fit(model, data, sched, 2, np.random.default_rng(9), batch_size=4, optimizer=opt, start_step=3, total_steps=6)
    fit(back, data, sched, 2, np.random.default_rng(9), batch_size=4, optimizer=opt2, start_step=3, total_steps=6)
    assert all(np.array_equal(p.data, back.params[k].data) for k, p in model.params.items())


def test_load_rejects_mismatches(tmp_path):
    SceneModel(SMALL, NAMES).save(tmp_path / "m.ckpt")
    with pytest.raises(ConfigError):
        SceneModel.load(tmp_path / "m.ckpt", NAMES[:5])
    arrays = read_checkpoint(tmp_path / "m.ckpt")
    arrays.pop("den.head.w")
    write_checkpoint(tmp_path / "cut.ckpt", arrays)
    with pytest.raises(CheckpointError):
        SceneModel.load(tmp_path / "cut.ckpt", NAMES)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"widht": 16})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": "x", "ablation": "nothing"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {}})
    run = RunConfig.from_dict({"data": "x", "ablation": "no-sf", "model": {"width": 32, "heads": 4}})
    assert not run.effective_model().use_spectrum_filter and run.effective_model().width == 32
    assert RunConfig.from_dict(run.to_dict()) == run


def test_canonical_layout_and_known_slots():
    scene = synth.sample_corpus(synth.GeneratorConfig(seed=4), 1)[0]
    ordered = canonical_order(scene)
    ents = entity_list(scene)
    assert [NAMES[o.category] for o in ordered] == ents
    kept = ordered[1::2]
    slots = known_slots(kept, ents)
    assert [ents[s] for s in slots] == [NAMES[o.category] for o in kept]
    partial, known = place_known(kept, ents, 12)
    full = encode_scene(ordered, 12).data
    for s in slots:
        assert known[s]
    # a kept object lands in a column of its own category in the full layout
    assert all(NAMES[ordered[s].category] == ents[s] for s in slots)
    assert known.sum() == len(kept) and np.count_nonzero(np.linalg.norm(partial, axis=0)) == len(kept)
    assert full.shape == partial.shape
    with pytest.raises(CapacityError):
        place_known(ordered, ents, 2)


def test_with_knowledge_shares_network():
    data = prepare(synth.sample_corpus(synth.GeneratorConfig(seed=0), 4), views=[0])
    kb = build_kb(data.scenes)
    model = SceneModel(SMALL, NAMES, kb, seed=1)
    empty = model.with_knowledge(None)
    assert empty.params is model.params and model.kb is kb
    ents = data.entities[0]
    off = ~np.eye(len(ents), dtype=bool)
    # only self-loops remain without knowledge
    assert np.count_nonzero(empty.adjacency(ents)[:, off]) == 0
    assert np.array_equal(model.with_knowledge(kb).adjacency(ents), model.adjacency(ents))
    assert np.count_nonzero(model.adjacency(ents)[:, off]) > 0
