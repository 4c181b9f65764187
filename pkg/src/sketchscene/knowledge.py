"""Object-relationship knowledge base.

Pipeline per scene: voxelise objects on a global lattice, group them with
DBSCAN over minimum voxel-centre distances, label every object pair with a
geometric relation, then count relation instances per category pair over the
corpus and squash counts into probabilities with a scaled logistic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np

from .codec import DEFAULT_VOCAB, ObjectRecord, Vocabulary, wrap_angle
from .errors import BuildError, VocabularyError
from .kernels import min_set_distance

RELATIONS = ("attachment", "alignment", "dependent", "parallel_collinearity", "co_occurrence")
ADJACENT_RELATIONS = RELATIONS[:3]
DISTANT_RELATIONS = RELATIONS[3:]


@dataclass(frozen=True)
class Tolerances:
    voxel_len: float = 0.1
    eps: float = 0.25
    min_pts: int = 1
    coplanar_tol: float = 0.02
    parallel_tol_deg: float = 5.0


@dataclass
class VoxelSet:
    voxel_len: float
    cells: np.ndarray  # (n, 3) integer lattice indices

    def centers(self):
        return (self.cells + 0.5) * self.voxel_len


def _rotation(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def voxelize(obj: ObjectRecord, voxel_len: float) -> VoxelSet:
    """Lattice cells whose centres fall inside the object's oriented box."""
    if voxel_len <= 0:
        raise ValueError("voxel_len must be positive")
    half = np.asarray(obj.size) / 2.0
    t = np.asarray(obj.translation)
    R = _rotation(obj.yaw)
    reach = np.abs(R) @ half
    lo = np.floor((t - reach) / voxel_len - 0.5).astype(np.int64)
    hi = np.ceil((t + reach) / voxel_len - 0.5).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    local = ((grid + 0.5) * voxel_len - t) @ R
    inside = np.all(np.abs(local) <= half + 1e-9, axis=1)
    cells = grid[inside]
    if len(cells) == 0:
        cells = np.floor(t / voxel_len).astype(np.int64)[None, :]
    return VoxelSet(voxel_len, cells)


def object_distances(voxsets: Sequence[VoxelSet], cutoff=np.inf):
    """Symmetric matrix of minimum voxel-centre distances.

    Pairs whose centre bounding boxes are already further apart than
    ``cutoff`` get that bounding-box separation instead (a lower bound that
    exceeds the cutoff, so threshold decisions are unchanged).
    """
    n = len(voxsets)
    centers = [v.centers() for v in voxsets]
    lo = [c.min(axis=0) for c in centers]
    hi = [c.max(axis=0) for c in centers]
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sep = np.maximum(np.maximum(lo[j] - hi[i], lo[i] - hi[j]), 0.0)
            bound = float(np.linalg.norm(sep))
            if bound > cutoff:
                dij = bound
            else:
                dij = min_set_distance(centers[i], centers[j])
            d[i, j] = d[j, i] = dij
    return d


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN over a precomputed distance matrix; noise points become
    singleton clusters. Labels are contiguous from 0 in order of first
    appearance."""
    n = dist.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]  # includes self
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neighbors[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(k for k in neighbors[j] if labels[k] == -1)
        cluster += 1
    for i in range(n):
        if labels[i] == -1:
            labels[i] = cluster
            cluster += 1
    # relabel by first appearance
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=np.int64)


def cluster_groups(scene: Sequence[ObjectRecord], eps=0.25, min_pts=1, voxel_len=0.1,
                   distances=None) -> np.ndarray:
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    if distances is None:
        distances = object_distances([voxelize(o, voxel_len) for o in scene], cutoff=eps)
    return dbscan(distances, eps, min_pts)


def _vertical_faces(obj: ObjectRecord):
    """(unit normal in the xy plane, plane offset) for the four side faces."""
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    ex, ey = np.array([c, s]), np.array([-s, c])
    t = np.asarray(obj.translation[:2])
    w, d = obj.size[0] / 2, obj.size[1] / 2
    faces = []
    for n, h in ((ex, w), (-ex, w), (ey, d), (-ey, d)):
        faces.append((n, float(n @ t) + h))
    return faces


def coplanar(a: ObjectRecord, b: ObjectRecord, tol=0.02, angle_tol_deg=5.0) -> bool:
    """True when some side face of ``a`` and some side face of ``b`` lie in
    the same plane. Floor and ceiling faces are ignored: every floor-standing
    object shares the floor plane."""
    cos_tol = math.cos(math.radians(angle_tol_deg))
    for na, oa in _vertical_faces(a):
        for nb, ob in _vertical_faces(b):
            dot = float(na @ nb)
            if abs(dot) < cos_tol:
                continue
            sgn = 1.0 if dot > 0 else -1.0
            if abs(oa - sgn * ob) <= tol:
                return True
    return False


def axis_angle(yaw_a, yaw_b):
    """Angle in [0, pi/2] between the undirected primary horizontal axes."""
    a = abs(wrap_angle(yaw_a - yaw_b)) % math.pi
    return min(a, math.pi - a)


def classify_relations(scene: Sequence[ObjectRecord], partition, tol: Tolerances = Tolerances(),
                       distances=None):
    """Set of ``(i, j, relation)`` with ``i < j``.

    Same-group pairs get exactly one of attachment > alignment > dependent.
    Cross-group pairs always get co-occurrence, plus parallel collinearity
    when their primary horizontal axes are parallel.
    """
    if distances is None:
        distances = object_distances([voxelize(o, tol.voxel_len) for o in scene],
                                     cutoff=max(tol.eps, tol.voxel_len))
    partition = np.asarray(partition)
    if len(partition) != len(scene):
        raise ValueError("partition does not cover the scene")
    par_tol = math.radians(tol.parallel_tol_deg)
    out = set()
    n = len(scene)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = scene[i], scene[j]
            if partition[i] == partition[j]:
                # centres of cells that share a face are one voxel apart
                if distances[i, j] <= tol.voxel_len * (1 + 1e-9):
                    out.add((i, j, "attachment"))
                elif coplanar(a, b, tol.coplanar_tol, tol.parallel_tol_deg):
                    out.add((i, j, "alignment"))
                else:
                    out.add((i, j, "dependent"))
            else:
                out.add((i, j, "co_occurrence"))
                if axis_angle(a.yaw, b.yaw) <= par_tol:
                    out.add((i, j, "parallel_collinearity"))
    return out


def analyze_scene(scene: Sequence[ObjectRecord], tol: Tolerances = Tolerances()):
    """Groups and relation triples for one scene."""
    vox = [voxelize(o, tol.voxel_len) for o in scene]
    dist = object_distances(vox, cutoff=max(tol.eps, tol.voxel_len))
    groups = dbscan(dist, tol.eps, tol.min_pts)
    return groups, classify_relations(scene, groups, tol, distances=dist)


def relation_probability(n, n_max):
    """Scaled logistic of the count relative to the relation's largest count."""
    return 1.0 / (1.0 + np.exp(-10.0 * np.asarray(n, dtype=np.float64) / n_max))


class KnowledgeBase:
    """Per-relation symmetric count and probability tables over the vocabulary.

    Pairs never observed under a relation are absent (probability 0 in
    :attr:`probs`, ``False`` in :meth:`present`).
    """

    def __init__(self, vocab_names: Sequence[str], counts: Dict[str, np.ndarray], meta=None):
        self.vocab = list(vocab_names)
        N = len(self.vocab)
        self.counts = {}
        self.probs = {}
        for r in RELATIONS:
            n = np.asarray(counts.get(r, np.zeros((N, N))), dtype=np.int64)
            if n.shape != (N, N) or not np.array_equal(n, n.T):
                raise BuildError(f"count table for {r} must be symmetric {N}x{N}")
            self.counts[r] = n
            p = np.zeros((N, N))
            if n.max() > 0:
                m = n > 0
                p[m] = relation_probability(n[m], n.max())
            self.probs[r] = p
        self.meta = dict(meta or {})

    @classmethod
    def empty(cls, vocab_names: Sequence[str], meta=None):
        return cls(vocab_names, {}, meta)

    def present(self, relation):
        return self.counts[relation] > 0

    def is_empty(self):
        return all(n.max() == 0 for n in self.counts.values())

    def type_index(self, entity):
        if isinstance(entity, (int, np.integer)):
            if 0 <= int(entity) < len(self.vocab):
                return int(entity)
        elif entity in self.vocab:
            return self.vocab.index(entity)
        raise VocabularyError(f"unknown entity {entity!r}")

    def to_json(self):
        rels = {}
        for r in RELATIONS:
            n, p = self.counts[r], self.probs[r]
            rows = []
            for i in range(len(self.vocab)):
                for j in range(i, len(self.vocab)):
                    if n[i, j] > 0:
                        rows.append({"a": self.vocab[i], "b": self.vocab[j],
                                     "n": int(n[i, j]), "p": float(p[i, j])})
            rels[r] = rows
        return {"meta": self.meta, "vocab": self.vocab, "relations": rels}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, doc):
        vocab = doc["vocab"]
        N = len(vocab)
        counts = {}
        for r, rows in doc["relations"].items():
            if r not in RELATIONS:
                raise BuildError(f"unknown relation {r!r} in knowledge base file")
            n = np.zeros((N, N), dtype=np.int64)
            for row in rows:
                i, j = vocab.index(row["a"]), vocab.index(row["b"])
                n[i, j] = n[j, i] = int(row["n"])
            counts[r] = n
        return cls(vocab, counts, doc.get("meta"))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def count_relations(scenes, n_types, tol: Tolerances = Tolerances()):
    counts = {r: np.zeros((n_types, n_types), dtype=np.int64) for r in RELATIONS}
    for scene in scenes:
        _, rels = analyze_scene(scene, tol)
        for i, j, r in rels:
            a, b = scene[i].category, scene[j].category
            counts[r][a, b] += 1
            if a != b:
                counts[r][b, a] += 1
    return counts


def build_kb(corpus, vocab: Vocabulary = DEFAULT_VOCAB, tol: Tolerances = Tolerances(),
             corpus_id: str = "") -> KnowledgeBase:
    """Count relations over ``corpus`` (a list of scenes) and normalise."""
    if len(corpus) == 0:
        raise BuildError("cannot build a knowledge base from an empty corpus")
    counts = count_relations(corpus, len(vocab), tol)
    meta = {"tolerances": asdict(tol), "voxel_len": tol.voxel_len,
            "corpus_id": corpus_id, "n_scenes": len(corpus)}
    return KnowledgeBase(vocab.names, counts, meta)


def query_subgraph(kb: KnowledgeBase, entities) -> np.ndarray:
    """Adjacency stack ``(len(RELATIONS), n, n)`` for the requested entities.

    Off-diagonal entries carry stored probabilities (0 when absent); the
    diagonal is 1.
    """
    if len(entities) == 0:
        raise VocabularyError("query needs at least one entity")
    bad = []
    idx = []
    for e in entities:
        try:
            idx.append(kb.type_index(e))
        except VocabularyError:
            bad.append(e)
    if bad:
        raise VocabularyError(f"unknown entities: {bad}")
    idx = np.array(idx)
    n = len(idx)
    out = np.empty((len(RELATIONS), n, n))
    eye = np.eye(n, dtype=bool)
    for k, r in enumerate(RELATIONS):
        a = kb.probs[r][np.ix_(idx, idx)]
        a[eye] = 1.0
        out[k] = a
    return out
