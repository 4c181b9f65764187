"""Command line entry point.

Every command writes its artifacts plus a ``*.manifest.json`` recording the
command, its arguments, the derived seeds, the digests of all inputs and
outputs, and library versions. Outputs are written only when the command
succeeds; anything created by a failing command is removed.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, synth
from ._accel import BACKEND
from .codec import (DEFAULT_VOCAB, NormalizationStats, ObjectRecord, Vocabulary, load_dataset,
                    save_dataset)
from .config import ABLATIONS, ModelConfig, RunConfig
from .errors import ConfigError, SketchSceneError
from .evaluation import config_digest, evaluate
from .experiments import (complete_scenes, decode_all, format_table, generate,
                          knowledge_variants, object_validity, place_known, report_for, transfer_experiment)
from .knowledge import KnowledgeBase, build_kb
from .model import SceneModel
from .training import entity_list, fit, prepare

log = logging.getLogger("sketchscene")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# ---------------------------------------------------------------------------
# seeds, digests, manifests


def derive_seed(master: int, stream: str) -> int:
    """Independent, reproducible sub-seed for a named stream."""
    digest = hashlib.sha256(f"{int(master)}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    if p.is_dir():
        for sub in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(str(sub.relative_to(p)).encode())
            h.update(file_digest(sub).encode())
        return h.hexdigest()
    with open(p, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions():
    return {"sketchscene": __version__, "numpy": np.__version__,
            "python": platform.python_version(), "kernel_backend": BACKEND}


class Artifacts:
    """Tracks paths created by a command so a failure can remove them."""

    def __init__(self):
        self.created = []

    def claim(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            self.created.append(p)
        return p

    def mkdir(self, path) -> Path:
        p = Path(path)
        missing = []
        q = p
        while not q.exists():
            missing.append(q)
            q = q.parent
        p.mkdir(parents=True, exist_ok=True)
        self.created.extend(reversed(missing))
        return p

    def rollback(self):
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_manifest(arts: Artifacts, path, command, args, seeds, inputs, outputs):
    manifest = {
        "command": command,
        "args": args,
        "seeds": seeds,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
        "versions": versions(),
    }
    write_json(arts.claim(path), manifest)


def _require(path, what):
    if not path or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path!r}")
    return Path(path)


def _dataset_file(path):
    p = _require(path, "dataset")
    return p / "scenes.json" if p.is_dir() else p


def _load_json(path, what):
    try:
        with open(_require(path, what)) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e


def _args_dict(ns):
    return {k: v for k, v in sorted(vars(ns).items()) if k not in ("func", "verbose")}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(ns, arts):
    if ns.preset not in synth.PRESETS:
        raise ConfigError(f"--preset must be one of {sorted(synth.PRESETS)}")
    if ns.n < 1:
        raise ConfigError("--n must be >= 1")
    seed = derive_seed(ns.seed, "data")
    if ns.config:
        cfg = synth.config_from_dict({**_load_json(ns.config, "generator config"), "seed": seed})
    else:
        cfg = synth.PRESETS[ns.preset](seed)
    views = list(range(synth.N_VIEWPOINTS)) if ns.views == "all" else _int_list(ns.views, "--views")
    scenes = synth.sample_corpus(cfg, ns.n)
    out = arts.mkdir(ns.out)
    data_path = arts.claim(out / "scenes.json")
    save_dataset(data_path, scenes, NormalizationStats(cfg.room_half_extent, 3.0), cfg.vocab,
                 extra={"generator": synth.config_to_dict(cfg)})
    planted = arts.claim(out / "planted.json")
    synth.save_planted(planted, cfg)
    outputs = [data_path, planted]
    if views:
        sk = arts.mkdir(out / "sketches")
        for i, s in enumerate(scenes):
            for v in views:
                synth.write_pgm(arts.claim(sk / f"scene{i:04d}_v{v:02d}.pgm"), synth.render_sketch(s, v))
        outputs.append(sk)
    write_manifest(arts, out / "manifest.json", "gen-data", _args_dict(ns), {"data": seed}, [], outputs)
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_build_kb(ns, arts):
    path = _dataset_file(ns.data)
    scenes, _, vocab = load_dataset(path)
    kb = build_kb(scenes, vocab, corpus_id=file_digest(path)[:16])
    out = arts.claim(ns.out)
    kb.save(out)
    write_manifest(arts, f"{ns.out}.manifest.json", "build-kb", _args_dict(ns), {}, [path], [out])
    print(f"knowledge base over {len(scenes)} scenes written to {out}")


def _load_kb(path, vocab: Vocabulary):
    if not path:
        return None
    kb = KnowledgeBase.load(_require(path, "knowledge base"))
    if list(kb.vocab) != list(vocab.names):
        raise ConfigError(f"knowledge base vocabulary {kb.vocab} differs from dataset vocabulary {vocab.names}")
    return kb


def _check_dims(cfg: ModelConfig, data_D, data_M, where):
    problems = []
    if cfg.D != data_D:
        problems.append(f"model.D={cfg.D} but {where} has D={data_D}")
    if cfg.M != data_M:
        problems.append(f"model.M={cfg.M} but {where} has M={data_M}")
    if problems:
        raise ConfigError("; ".join(problems))


def _train(run: RunConfig, arts, out: Path, resume=None, label="train"):
    data_path = _dataset_file(run.data)
    scenes, norm, vocab = load_dataset(data_path)
    kb = _load_kb(run.kb, vocab)
    cfg = run.effective_model()
    if cfg.D != 8 + cfg.f:
        raise ConfigError(f"model.D={cfg.D} must equal 8 + model.f ({8 + cfg.f})")
    data = prepare(scenes, cfg.M, norm, vocab, canonical=run.canonical_order)
    _check_dims(cfg, data.matrices.shape[1], data.matrices.shape[2], "the dataset")
    init_seed = derive_seed(run.seed, "init") % (2 ** 32)
    if resume:
        model, start, opt = SceneModel.load(_require(resume, "checkpoint"), vocab.names, kb)
        diffs = {k: (v, getattr(cfg, k)) for k, v in model.cfg.to_dict().items() if getattr(cfg, k) != v}
        if diffs:
            raise ConfigError("checkpoint config differs from run config: " +
                              ", ".join(f"{k}: checkpoint {a} vs run {b}" for k, (a, b) in diffs.items()))
    else:
        model, start, opt = SceneModel(cfg, vocab.names, kb, seed=init_seed), 0, None
    total = run.optimizer.steps
    remaining = max(total - start, 0)
    rng = np.random.default_rng([derive_seed(run.seed, "train"), start])
    sched = model_schedule(cfg)
    opt, losses = fit(model, data, sched, remaining, rng, batch_size=run.optimizer.batch_size,
                      lr=run.optimizer.lr, optimizer=opt, start_step=start, total_steps=total)
    arts.mkdir(out)
    ckpt = arts.claim(out / "model.ckpt")
    model.save(ckpt, start + remaining, opt)
    loss_path = arts.claim(out / "losses.json")
    write_json(loss_path, {"start_step": start, "end_step": start + remaining, "losses": losses})
    inputs = [data_path] + ([Path(run.kb)] if run.kb else []) + ([Path(resume)] if resume else [])
    seeds = {"init": init_seed, "train": derive_seed(run.seed, "train")}
    write_manifest(arts, out / "manifest.json", label, {"config": run.to_dict(), "resume": resume},
                   seeds, inputs, [ckpt, loss_path])
    return model, data, vocab, norm


def model_schedule(cfg: ModelConfig, reverse_variance="posterior"):
    from .experiments import schedule_for
    return schedule_for(cfg, reverse_variance)


def _run_config(ns) -> RunConfig:
    run = RunConfig.from_dict(_load_json(ns.config, "run config"))
    if getattr(ns, "steps", None) is not None:
        run.optimizer.steps = ns.steps
    return run


def cmd_train(ns, arts):
    run = _run_config(ns)
    out = Path(ns.out or run.output_dir)
    _train(run, arts, out, resume=ns.resume)
    print(f"checkpoint written to {out / 'model.ckpt'}")


def _int_list(text, flag):
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from e


def _model_inputs(ns):
    vocab = DEFAULT_VOCAB
    if ns.vocab:
        vocab = Vocabulary.from_dict(_load_json(ns.vocab, "vocabulary")["vocab"])
    kb = _load_kb(ns.kb, vocab) if ns.kb else None
    model, _, _ = SceneModel.load(_require(ns.ckpt, "checkpoint"), vocab.names, kb)
    raster = synth.read_pgm(_require(ns.sketch, "sketch"))
    if raster.pixels.shape != (model.cfg.sketch_size, model.cfg.sketch_size):
        raise ConfigError(f"sketch is {raster.pixels.shape}, checkpoint expects "
                          f"{model.cfg.sketch_size}x{model.cfg.sketch_size}")
    entities = [e.strip() for e in ns.entities.split(",") if e.strip()]
    if not entities:
        raise ConfigError("--entities needs at least one type name")
    unknown = [e for e in entities if e not in vocab.names]
    if unknown:
        raise ConfigError(f"unknown entities {unknown}; vocabulary is {vocab.names}")
    if len(entities) > model.cfg.M:
        raise ConfigError(f"{len(entities)} entities exceed capacity M={model.cfg.M}")
    return model, vocab, raster.pixels[None], [sorted(entities, key=vocab.index)]


def _scene_doc(decoded, matrix, norm, vocab):
    return {
        "norm": norm.to_dict(),
        "vocab": vocab.to_dict(),
        "scenes": [{"objects": [o.to_dict() for o in decoded.objects],
                    "columns": decoded.columns,
                    "issues": {str(k): v for k, v in decoded.issues.items()},
                    "empty": decoded.empty,
                    "matrix": np.asarray(matrix).tolist()}],
    }


def _seed_inputs(ns):
    return [p for p in (ns.ckpt, ns.kb, ns.sketch, ns.vocab, getattr(ns, "scene", None)) if p]


def cmd_generate(ns, arts):
    model, vocab, pixels, ents = _model_inputs(ns)
    norm = NormalizationStats()
    seed = derive_seed(ns.seed, "sample")
    mats = generate(model, pixels, ents, seed, ddim=ns.ddim, reverse_variance=ns.reverse_variance)
    decoded = decode_all(mats, norm, vocab)[0]
    out = arts.claim(ns.out)
    write_json(out, _scene_doc(decoded, mats[0], norm, vocab))
    write_manifest(arts, f"{ns.out}.manifest.json", "generate", _args_dict(ns), {"sample": seed},
                   _seed_inputs(ns), [out])
    print(f"{len(decoded.objects)} objects written to {out}")


def cmd_complete(ns, arts):
    model, vocab, pixels, ents = _model_inputs(ns)
    doc = _load_json(ns.scene, "partial scene")
    try:
        norm = NormalizationStats.from_dict(doc["norm"]) if "norm" in doc else NormalizationStats()
        objects = [ObjectRecord.from_dict(o) for o in doc["scenes"][0]["objects"]]
    except (KeyError, IndexError, TypeError) as e:
        raise ConfigError(f"partial scene file lacks scenes[0].objects: {e}") from e
    keep = list(range(len(objects))) if not ns.mask else _int_list(ns.mask, "--mask")
    bad = [i for i in keep if not 0 <= i < len(objects)]
    if bad:
        raise ConfigError(f"--mask indices {bad} outside 0..{len(objects) - 1}")
    kept = [objects[i] for i in keep]
    for name in {vocab.names[o.category] for o in kept}:
        need = sum(vocab.names[o.category] == name for o in kept)
        if need > ents[0].count(name):
            raise ConfigError(f"{need} known '{name}' objects but --entities lists {ents[0].count(name)}")
    seed = derive_seed(ns.seed, "sample")
    if kept:
        partial, known = place_known(kept, ents[0], model.cfg.M, norm, vocab)
    else:
        partial, known = np.zeros((model.cfg.D, model.cfg.M)), np.zeros(model.cfg.M, dtype=bool)
    mats = complete_scenes(model, partial[None], known[None], pixels, ents, seed, ddim=ns.ddim,
                           reverse_variance=ns.reverse_variance)
    decoded = decode_all(mats, norm, vocab)[0]
    out = arts.claim(ns.out)
    doc = _scene_doc(decoded, mats[0], norm, vocab)
    doc["scenes"][0]["known_columns"] = [int(c) for c in np.flatnonzero(known)]
    write_json(out, doc)
    write_manifest(arts, f"{ns.out}.manifest.json", "complete", _args_dict(ns), {"sample": seed},
                   _seed_inputs(ns), [out])
    print(f"completed scene ({len(decoded.objects)} objects) written to {out}")


def _scene_set(path):
    p = _require(path, "scene set")
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    files = [f for f in files if not f.name.endswith(".manifest.json") and f.name != "manifest.json"
             and f.name != "planted.json"]
    scenes, vocab = [], None
    for f in files:
        with open(f) as fh:
            doc = json.load(fh)
        if "scenes" not in doc:
            continue
        v = Vocabulary.from_dict(doc["vocab"]) if "vocab" in doc else DEFAULT_VOCAB
        if vocab is not None and v.names != vocab.names:
            raise ConfigError(f"{f}: vocabulary differs from other scene files")
        vocab = v
        scenes += [[ObjectRecord.from_dict(o) for o in s["objects"]] for s in doc["scenes"]]
    if not scenes:
        raise ConfigError(f"no scenes found under {path}")
    return scenes, vocab, files


def cmd_eval(ns, arts):
    gen, vg, fg = _scene_set(ns.gen)
    ref, vr, fr = _scene_set(ns.ref)
    if vg.names != vr.names:
        raise ConfigError("generated and reference sets use different vocabularies")
    nonempty = [s for s in gen if s]
    digest = config_digest({"gen": [file_digest(f) for f in fg], "ref": [file_digest(f) for f in fr],
                            "seed": ns.seed})
    rep = evaluate(nonempty, ref, len(vr), seed=derive_seed(ns.seed, "eval") % (2 ** 32), digest=digest,
                   n_gen_empty=len(gen) - len(nonempty))
    out = arts.claim(ns.out)
    write_json(out, rep.to_dict())
    write_manifest(arts, f"{ns.out}.manifest.json", "eval", _args_dict(ns),
                   {"eval": derive_seed(ns.seed, "eval") % (2 ** 32)}, fg + fr, [out])
    print(json.dumps(rep.to_dict(), indent=1, sort_keys=True))


def _sampled_corpus_eval(models, data, n, seed, vocab, norm, out, arts, label):
    reports = transfer_experiment(models, data, n=n, seed=seed, vocab=vocab, norm=norm)
    rep_path = arts.claim(out / f"{label}.json")
    write_json(rep_path, {k: r.to_dict() for k, r in reports.items()})
    table = arts.claim(out / f"{label}.txt")
    with open(table, "w") as fh:
        fh.write(format_table(reports) + "\n")
    print(format_table(reports))
    return [rep_path, table]


def cmd_ablate(ns, arts):
    base = _run_config(ns)
    out = arts.mkdir(ns.out)
    models, ckpts, data = {}, [], None
    for name in ("sketch-only", "knowledge-only", "no-sf", "full"):
        run = RunConfig.from_dict({**base.to_dict(), "ablation": name})
        model, data, vocab, norm = _train(run, arts, out / name, label=f"ablate:{name}")
        models[name] = model
        ckpts.append(out / name / "model.ckpt")
    seed = derive_seed(base.seed, "sample") % (2 ** 32)
    outputs = _sampled_corpus_eval(models, data, ns.n, seed, vocab, norm, out, arts, "ablation")
    write_manifest(arts, out / "manifest.json", "ablate", {"config": base.to_dict(), "n": ns.n},
                   {"sample": seed}, [_dataset_file(base.data)] + ([Path(base.kb)] if base.kb else []),
                   ckpts + outputs)


def cmd_transfer(ns, arts):
    base = _run_config(ns)
    if base.ablation != "full":
        raise ConfigError("transfer needs the knowledge branch; use ablation 'full'")
    out = arts.mkdir(ns.out)
    # the generator is trained once with the in-source base, then generates
    # with each knowledge base swapped in
    run = RunConfig.from_dict({**base.to_dict(), "kb": ns.kb_b})
    model, data, vocab, norm = _train(run, arts, out / "model", label="transfer")
    models = knowledge_variants(model, _load_kb(ns.kb_a, vocab), _load_kb(ns.kb_b, vocab))
    seed = derive_seed(base.seed, "sample") % (2 ** 32)
    outputs = _sampled_corpus_eval(models, data, ns.n, seed, vocab, norm, out, arts, "transfer")
    write_manifest(arts, out / "manifest.json", "transfer", {"config": base.to_dict(), "n": ns.n},
                   {"sample": seed}, [_dataset_file(base.data), Path(ns.kb_a), Path(ns.kb_b)],
                   [out / "model" / "model.ckpt"] + outputs)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="sketchscene", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample a procedural scene corpus with sketches")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=50, help="number of scenes (default 50)")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--preset", default="default", help=f"generator preset: {sorted(synth.PRESETS)}")
    g.add_argument("--config", help="generator config JSON (overrides --preset)")
    g.add_argument("--views", default="all",
                   help="viewpoints to render: 'all', '' for none, or comma-separated indices 0..20")
    g.set_defaults(func=cmd_gen_data)

    k = sub.add_parser("build-kb", help="count relations over a corpus into a knowledge base")
    k.add_argument("--data", required=True, help="dataset directory or scenes.json")
    k.add_argument("--out", required=True, help="knowledge-base JSON path")
    k.set_defaults(func=cmd_build_kb)

    t = sub.add_parser("train", help="train the denoiser from a run config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--resume", help="checkpoint to continue from; training runs to optimizer.steps")
    t.add_argument("--steps", type=int, help="override optimizer.steps (total, not additional)")
    t.set_defaults(func=cmd_train)

    for name, helptext in (("generate", "sample one scene for a sketch and entity list"),
                           ("complete", "fill in a partial scene")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--ckpt", required=True, help="model checkpoint")
        q.add_argument("--kb", help="knowledge-base JSON (must match the training vocabulary)")
        q.add_argument("--vocab", help="dataset JSON whose vocabulary to use (default built-in)")
        q.add_argument("--sketch", required=True, help="binary PGM sketch")
        q.add_argument("--entities", required=True, help="comma-separated entity type names")
        q.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        q.add_argument("--out", required=True, help="output scene JSON")
        q.add_argument("--ddim", action="store_true", help="deterministic DDIM updates")
        q.add_argument("--reverse-variance", default="posterior", choices=("posterior", "beta"),
                       help="reverse-chain noise: posterior variance (default) or beta_t")
        if name == "complete":
            q.add_argument("--scene", required=True, help="scene JSON holding the known objects")
            q.add_argument("--mask", default="",
                           help="comma-separated indices of known objects to keep (default all)")
            q.set_defaults(func=cmd_complete)
        else:
            q.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="metrics of a generated scene set against a reference set")
    e.add_argument("--gen", required=True, help="generated scene JSON file or directory")
    e.add_argument("--ref", required=True, help="reference scene JSON file or directory")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--seed", type=int, default=0, help="master seed for the classifier (default 0)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help=f"train and compare the ablation grid {sorted(ABLATIONS)}")
    a.add_argument("--config", required=True, help="run config JSON")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--n", type=int, default=200, help="generated scenes per variant (default 200)")
    a.add_argument("--steps", type=int, help="override optimizer.steps")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("transfer", help="compare empty / source-A / source-B knowledge bases")
    r.add_argument("--config", required=True, help="run config JSON (data = target corpus)")
    r.add_argument("--kb-a", required=True, help="knowledge base built from the source-A corpus")
    r.add_argument("--kb-b", required=True, help="knowledge base built from the target corpus")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--n", type=int, default=200, help="generated scenes per variant (default 200)")
    r.add_argument("--steps", type=int, help="override optimizer.steps")
    r.set_defaults(func=cmd_transfer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    arts = Artifacts()
    try:
        ns.func(ns, arts)
    except ConfigError as e:
        arts.rollback()
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SketchSceneError, ValueError, OSError) as e:
        arts.rollback()
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except BaseException:
        arts.rollback()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
