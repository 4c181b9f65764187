"""Dataset preparation and the optimisation loop.

A prepared dataset holds, per scene, the encoded matrix, rasters from every
viewpoint and the sorted list of entity types. Training batches pick scenes
uniformly and one viewpoint per scene.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import synth
from .autodiff import Adam
from .codec import DEFAULT_VOCAB, NormalizationStats, ObjectRecord, Vocabulary, encode_scene
from .diffusion import DiffusionSchedule, train_step

log = logging.getLogger(__name__)


def canonical_order(scene: Sequence[ObjectRecord]) -> List[ObjectRecord]:
    """Objects sorted by category index, then by floor position."""
    return sorted(scene, key=lambda o: (o.category, round(o.translation[0], 6),
                                        round(o.translation[1], 6)))


def entity_list(scene: Sequence[ObjectRecord], vocab: Vocabulary = DEFAULT_VOCAB):
    """Entity type names of a scene, one per object, in vocabulary order."""
    return [vocab.names[i] for i in sorted(o.category for o in scene)]


def known_slots(known: Sequence[ObjectRecord], entities: Sequence[str],
                vocab: Vocabulary = DEFAULT_VOCAB):
    """Column index for every known object, laid out as in a canonically
    ordered scene whose categories are ``entities``.

    Training scenes are sorted by category, so column ``j`` of a complete
    scene holds the ``j``-th entry of the sorted entity list. Known objects
    take the first free columns of their category. Objects whose category is
    not (or no longer) available in the entity list go to the remaining
    free columns, after every entity slot.
    """
    cats = sorted(vocab.index(e) for e in entities)
    free = list(range(len(cats)))
    slots = [None] * len(known)
    order = sorted(range(len(known)), key=lambda i: (known[i].category,
                                                     round(known[i].translation[0], 6),
                                                     round(known[i].translation[1], 6)))
    leftovers = []
    for i in order:
        match = next((c for c in free if cats[c] == known[i].category), None)
        if match is None:
            leftovers.append(i)
        else:
            free.remove(match)
            slots[i] = match
    spare = [c for c in range(max(len(cats), len(known)) + len(leftovers)) if c >= len(cats)]
    for i, c in zip(leftovers, spare):
        slots[i] = c
    return slots


def sketch_input(pixels) -> np.ndarray:
    """Binary rasters (stroke = 1) as float network input."""
    return np.asarray(pixels, dtype=np.float64)


@dataclass
class PreparedData:
    scenes: list
    matrices: np.ndarray      # (N, D, M)
    rasters: np.ndarray       # (N, V, S, S) uint8, stroke pixels 1
    entities: list            # per scene list of type names

    def __len__(self):
        return len(self.scenes)


def prepare(scenes, M=12, norm: NormalizationStats = NormalizationStats(),
            vocab: Vocabulary = DEFAULT_VOCAB, views: Optional[Sequence[int]] = None,
            size=64, canonical=True) -> PreparedData:
    views = list(range(synth.N_VIEWPOINTS)) if views is None else list(views)
    ordered = [canonical_order(s) if canonical else list(s) for s in scenes]
    mats = np.stack([encode_scene(s, M, norm, vocab).data for s in ordered])
    rasters = np.zeros((len(ordered), len(views), size, size), dtype=np.uint8)
    for i, s in enumerate(ordered):
        for k, v in enumerate(views):
            rasters[i, k] = synth.render_sketch(s, v, size).pixels
    ents = [entity_list(s, vocab) for s in ordered]
    return PreparedData(ordered, mats, rasters, ents)


class GraphCache:
    """Memoised padded graph inputs per entity list for one model."""

    def __init__(self, model):
        self.model = model
        self._cache = {}

    def batch(self, entity_lists):
        from .conditioning import pad_entities
        adj = []
        for e in entity_lists:
            key = tuple(e)
            if key not in self._cache:
                self._cache[key] = self.model.adjacency(e)
            adj.append(self._cache[key])
        return pad_entities(self.model.table, entity_lists, adj)


def fit(model, data: PreparedData, sched: DiffusionSchedule, steps: int, rng,
        batch_size=32, lr=2e-3, optimizer: Optional[Adam] = None, start_step=0,
        total_steps: Optional[int] = None, lr_floor=0.1, callback: Optional[Callable] = None,
        log_every=250):
    """Run ``steps`` optimiser updates; returns ``(optimizer, losses)``.

    The learning rate follows a cosine decay from ``lr`` to ``lr * lr_floor``
    over ``total_steps`` (default: this call's steps), evaluated at the
    global step ``start_step + k`` so a resumed run continues the same curve.
    """
    total = total_steps if total_steps is not None else start_step + steps
    opt = optimizer or Adam(model.params, lr=lr)
    graphs = GraphCache(model)
    losses = []
    N, V = data.rasters.shape[:2]
    t0 = time.perf_counter()
    for k in range(steps):
        frac = min((start_step + k) / max(total - 1, 1), 1.0)
        opt.lr = lr * (lr_floor + (1 - lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))
        idx = rng.integers(N, size=batch_size)
        view = rng.integers(V, size=batch_size)
        pixels = sketch_input(data.rasters[idx, view])
        graph = graphs.batch([data.entities[i] for i in idx])
        loss = train_step(model, opt, sched, data.matrices[idx], pixels, graph, rng)
        losses.append(loss)
        if callback is not None:
            callback(start_step + k + 1, loss)
        if log_every and (k + 1) % log_every == 0:
            log.info("step %d loss %.4f (%.1fs)", start_step + k + 1,
                     float(np.mean(losses[-log_every:])), time.perf_counter() - t0)
    return opt, losses
