"""Drivers shared by the command line and the acceptance suite: training a
model variant, conditional generation over a corpus, completion, and the
transfer and ablation comparisons."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence

import numpy as np

from . import diffusion
from .codec import DEFAULT_VOCAB, NormalizationStats, Vocabulary, decode_scene, encode_scene
from .config import ABLATIONS, ModelConfig
from .errors import CapacityError, CheckpointError
from .evaluation import MetricReport, config_digest, evaluate
from .knowledge import KnowledgeBase
from .model import SceneModel
from .training import GraphCache, PreparedData, fit, known_slots, sketch_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 10000
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0           # parameter initialisation
    data_seed: int = 1      # batch and noise sampling


def schedule_for(cfg: ModelConfig, reverse_variance="posterior"):
    return diffusion.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, reverse_variance)


def train_variant(cfg: ModelConfig, data: PreparedData, kb: Optional[KnowledgeBase],
                  settings: TrainSettings, vocab: Vocabulary = DEFAULT_VOCAB):
    """Fresh model trained on ``data``; returns ``(model, optimizer, losses)``.

    Variants trained with equal settings share their initial parameters and
    their sequence of batches, noises and steps.
    """
    model = SceneModel(cfg, vocab.names, kb, seed=settings.seed)
    rng = np.random.default_rng(settings.data_seed)
    opt, losses = fit(model, data, schedule_for(cfg), settings.steps, rng,
                      batch_size=settings.batch_size, lr=settings.lr)
    return model, opt, losses


def pick_conditions(data: PreparedData, n: int, seed: int):
    """``n`` (scene index, viewpoint index) pairs drawn with one seed."""
    rng = np.random.default_rng(seed)
    return rng.integers(len(data), size=n), rng.integers(data.rasters.shape[1], size=n)


def generate(model: SceneModel, pixels, entity_lists, seed: int, batch: int = 100,
             ddim=False, reverse_variance="posterior") -> np.ndarray:
    """Scene matrices ``(n, D, M)`` for binary rasters and entity lists."""
    sched = schedule_for(model.cfg, reverse_variance)
    graphs = GraphCache(model)
    rng = np.random.default_rng(seed)
    out = []
    for lo in range(0, len(entity_lists), batch):
        hi = min(lo + batch, len(entity_lists))
        cond = model.condition(sketch_input(pixels[lo:hi]), graph=graphs.batch(entity_lists[lo:hi]))
        fn = diffusion.model_eps_fn(model, cond)
        out.append(diffusion.sample(fn, (hi - lo, model.cfg.D, model.cfg.M), sched, rng, ddim=ddim))
    return np.concatenate(out)


def complete_scenes(model: SceneModel, partial, known_mask, pixels, entity_lists, seed: int,
                    batch: int = 100, ddim=False, reverse_variance="posterior") -> np.ndarray:
    sched = schedule_for(model.cfg, reverse_variance)
    graphs = GraphCache(model)
    rng = np.random.default_rng(seed)
    partial = np.asarray(partial, dtype=np.float64)
    known_mask = np.asarray(known_mask, dtype=bool)
    out = []
    for lo in range(0, len(partial), batch):
        hi = min(lo + batch, len(partial))
        cond = model.condition(sketch_input(pixels[lo:hi]), graph=graphs.batch(entity_lists[lo:hi]))
        fn = diffusion.model_eps_fn(model, cond)
        out.append(diffusion.complete(fn, partial[lo:hi], known_mask[lo:hi], sched, rng, ddim=ddim))
    return np.concatenate(out)


def decode_all(matrices, norm: NormalizationStats = NormalizationStats(),
               vocab: Vocabulary = DEFAULT_VOCAB):
    return [decode_scene(m, norm, vocab) for m in matrices]


def object_validity(decoded) -> float:
    """Fraction of decoded objects without validation issues (1.0 if none)."""
    n = sum(len(d.objects) for d in decoded)
    bad = sum(len(d.issues) for d in decoded)
    return 1.0 - bad / n if n else 1.0


def generate_for_corpus(model: SceneModel, data: PreparedData, n: int, seed: int,
                        norm: NormalizationStats = NormalizationStats(),
                        vocab: Vocabulary = DEFAULT_VOCAB):
    """Generate ``n`` scenes conditioned on sketches and entity lists of
    ``data``; returns ``(decoded scenes, condition scene indices)``."""
    idx, views = pick_conditions(data, n, seed)
    mats = generate(model, data.rasters[idx, views], [data.entities[i] for i in idx], seed + 1)
    return decode_all(mats, norm, vocab), idx


def report_for(decoded, reference, vocab: Vocabulary, seed: int, digest: str) -> MetricReport:
    gen = [d.objects for d in decoded if not d.empty]
    empty = sum(d.empty for d in decoded)
    rep = evaluate(gen, reference, len(vocab), seed=seed, digest=digest, n_gen_empty=empty)
    rep.notes.append(f"object validity {object_validity(decoded):.4f}")
    return rep


def transfer_experiment(models: Dict[str, Optional[SceneModel]], target: PreparedData,
                        n: int = 200, seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB,
                        norm: NormalizationStats = NormalizationStats()) -> Dict[str, MetricReport]:
    """Reports per knowledge-base variant on one target corpus.

    Every variant sees the same sketches, entity lists and sampler seed.
    """
    missing = [k for k, m in models.items() if m is None]
    if missing:
        raise CheckpointError(f"no trained model for variants {missing}")
    reports = {}
    for name, model in models.items():
        decoded, _ = generate_for_corpus(model, target, n, seed, norm, vocab)
        digest = config_digest({"variant": name, "model": model.cfg.to_dict(),
                                "kb": model.kb.meta, "seed": seed, "n": n})
        reports[name] = report_for(decoded, target.scenes, vocab, seed, digest)
    return reports


def knowledge_variants(model: SceneModel, kb_a: KnowledgeBase, kb_b: KnowledgeBase):
    """One trained generator paired with an empty, a cross-source and an
    in-source knowledge base, swapped in at generation time."""
    return {"empty": model.with_knowledge(None), "source-a": model.with_knowledge(kb_a),
            "source-b": model.with_knowledge(kb_b)}


def ablation_configs(base: ModelConfig):
    return {name: replace(base, **flags) for name, flags in ABLATIONS.items()}


def format_table(reports: Dict[str, MetricReport]) -> str:
    lines = [f"{'variant':<16}{'ckl':>10}{'ckl x100':>10}{'sca':>8}{'fd_desc':>10}{'kd_desc':>10}"]
    for name, r in reports.items():
        def fmt(v, spec):
            return format(v, spec) if v is not None else "-"
        lines.append(f"{name:<16}{r.ckl:>10.4f}{r.ckl_x100:>10.2f}{fmt(r.sca, '>8.3f')}"
                     f"{fmt(r.fd_desc, '>10.4f')}{fmt(r.kd_desc, '>10.4f')}")
    return "\n".join(lines)


def place_known(kept, entities, M: int, norm: NormalizationStats = NormalizationStats(),
                vocab: Vocabulary = DEFAULT_VOCAB):
    """``(partial (D, M), known (M,))`` with each kept object in its slot."""
    slots = known_slots(kept, entities, vocab)
    if max(slots) >= M:
        raise CapacityError(f"known objects need {max(slots) + 1} columns, capacity is {M}")
    cols = encode_scene(kept, M, norm, vocab).data
    partial = np.zeros_like(cols)
    known = np.zeros(M, dtype=bool)
    for i, c in enumerate(slots):
        partial[:, c] = cols[:, i]
        known[c] = True
    return partial, known


def masked_completion_inputs(data: PreparedData, fraction: float, seed: int, n: int,
                             norm: NormalizationStats = NormalizationStats(),
                             vocab: Vocabulary = DEFAULT_VOCAB):
    """Partial matrices with a fraction of each scene's objects removed.

    Returns ``(idx, views, partial (n, D, M), known (n, M))``; kept objects
    sit in the columns :func:`known_slots` assigns from the entity list.
    """
    from .synth import mask_scene
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(data), size=n)
    views = rng.integers(data.rasters.shape[1], size=n)
    D, M = data.matrices.shape[1:]
    partial = np.zeros((n, D, M))
    known = np.zeros((n, M), dtype=bool)
    for k, i in enumerate(idx):
        kept, _ = mask_scene(data.scenes[i], fraction, rng)
        partial[k], known[k] = place_known(kept, data.entities[i], M, norm, vocab)
    return idx, views, partial, known
