"""Scene <-> padded scene-matrix conversion and the toy shape-latent codec.

A scene matrix has one column per object slot. Each occupied column is::

    [sin(yaw), cos(yaw), size / size_cap (3), translation / half_extent (3), code (8)]

so D = 2 + 3 + 3 + 8 = 16. Unused slots are exact zeros.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, CodecError, EmptySceneError, VocabularyError

FAMILIES = ("box", "cylinder", "sphere_cap", "l_shape")
N_SHAPE_PARAMS = 4
CODE_DIM = 8
LAYOUT_DIM = 8
FAMILY_WEIGHT = 0.6
PARAM_WEIGHT = 0.8
# distinct families differ by FAMILY_WEIGHT * (e_a - e_b) in an orthogonal
# subspace of the code, so their codes are at least this far apart
FAMILY_MARGIN = FAMILY_WEIGHT * math.sqrt(2.0)
CODE_MAX_NORM = 1.0

YAW = slice(0, 2)
SIZE = slice(2, 5)
TRANS = slice(5, 8)
CODE = slice(8, 16)


def _codec_basis(seed=7):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((CODE_DIM, CODE_DIM)))
    return q * np.sign(np.diag(r))


_BASIS = _codec_basis()


def wrap_angle(a):
    """Map an angle to (-pi, pi]."""
    a = math.remainder(float(a), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class ShapeParams:
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CodecError(f"unknown shape family {self.family!r}")
        p = tuple(float(v) for v in self.params)
        if len(p) != N_SHAPE_PARAMS:
            raise CodecError(f"shape needs {N_SHAPE_PARAMS} params, got {len(p)}")
        if not all(math.isfinite(v) for v in p):
            raise CodecError("non-finite shape parameter")
        object.__setattr__(self, "params", p)


def encode_shape(shape: ShapeParams) -> np.ndarray:
    """Linear, invertible embedding of (family one-hot, params) into R^8."""
    v = np.zeros(CODE_DIM)
    v[FAMILIES.index(shape.family)] = FAMILY_WEIGHT
    v[4:] = PARAM_WEIGHT * np.asarray(shape.params)
    return _BASIS @ v


def decode_shape(code) -> ShapeParams:
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (CODE_DIM,) or not np.all(np.isfinite(code)):
        raise CodecError("shape code must be a finite 8-vector")
    v = _BASIS.T @ code
    family = FAMILIES[int(np.argmax(v[:4]))]
    return ShapeParams(family, tuple(v[4:] / PARAM_WEIGHT))


@dataclass(frozen=True)
class CategorySpec:
    name: str
    family: str
    # each variant: (w, d, h) nominal box size in meters plus one free param
    variants: tuple

    def shapes(self):
        out = []
        for (w, d, h), extra in self.variants:
            out.append(ShapeParams(self.family, (w / 3.0, d / 3.0, h / 3.0, extra)))
        return out


DEFAULT_CATEGORIES = (
    CategorySpec("bed", "box", (((2.0, 1.6, 0.5), 0.0), ((2.0, 1.4, 0.5), 0.0))),
    CategorySpec("nightstand", "box", (((0.5, 0.4, 0.5), 0.35), ((0.4, 0.4, 0.6), 0.35))),
    CategorySpec("wardrobe", "box", (((1.2, 0.6, 2.0), 0.7), ((1.0, 0.6, 1.9), 0.7))),
    CategorySpec("desk", "box", (((1.2, 0.6, 0.8), 1.0), ((1.4, 0.7, 0.8), 1.0))),
    CategorySpec("chair", "l_shape", (((0.5, 0.5, 0.9), 0.0), ((0.5, 0.5, 1.0), 0.0))),
    CategorySpec("table", "cylinder", (((0.9, 0.9, 0.8), 0.5), ((1.0, 1.0, 0.7), 0.5))),
    CategorySpec("sofa", "l_shape", (((2.0, 0.9, 0.8), 1.0), ((1.8, 0.9, 0.8), 1.0))),
    CategorySpec("lamp", "sphere_cap", (((0.4, 0.4, 1.6), 0.5), ((0.3, 0.3, 1.5), 0.5))),
)


class Vocabulary:
    """Object-type vocabulary plus the finite table of valid shape codes."""

    def __init__(self, categories: Sequence[CategorySpec] = DEFAULT_CATEGORIES):
        self.categories = tuple(categories)
        self.names = [c.name for c in self.categories]
        if len(set(self.names)) != len(self.names):
            raise VocabularyError("duplicate category names")
        shapes, cats, variants = [], [], []
        for ci, cat in enumerate(self.categories):
            for vi, s in enumerate(cat.shapes()):
                shapes.append(s)
                cats.append(ci)
                variants.append(vi)
        self.table_shapes = shapes
        self.table_category = np.array(cats)
        self.table_variant = np.array(variants)
        self.table_codes = np.stack([encode_shape(s) for s in shapes])

    def __len__(self):
        return len(self.categories)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown category {name!r}") from None

    def check(self, category: int):
        if not (0 <= int(category) < len(self)):
            raise VocabularyError(f"category {category} outside vocabulary of size {len(self)}")

    def nominal_size(self, category: int, variant: int):
        return self.categories[category].variants[variant][0]

    def table_entry(self, category: int, shape: ShapeParams, tol=1e-9) -> int:
        idx = np.flatnonzero(self.table_category == category)
        code = encode_shape(shape)
        d = np.linalg.norm(self.table_codes[idx] - code, axis=1)
        k = int(np.argmin(d))
        if d[k] > tol:
            raise CodecError(f"shape {shape} is not in the codec table for category {category}")
        return int(idx[k])

    def snap(self, code):
        """Nearest codec-table entry: ``(entry index, distance)``."""
        d = np.linalg.norm(self.table_codes - np.asarray(code)[None, :], axis=1)
        k = int(np.argmin(d))
        return k, float(d[k])

    def min_entry_separation(self) -> float:
        c = self.table_codes
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        return float(d.min())

    def to_dict(self):
        return {
            "categories": [
                {"name": c.name, "family": c.family,
                 "variants": [{"size": list(s), "extra": e} for s, e in c.variants]}
                for c in self.categories
            ]
        }

    @classmethod
    def from_dict(cls, d):
        cats = []
        for c in d["categories"]:
            variants = tuple((tuple(v["size"]), v["extra"]) for v in c["variants"])
            cats.append(CategorySpec(c["name"], c["family"], variants))
        return cls(cats)


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class NormalizationStats:
    room_half_extent: float = 4.0
    size_cap: float = 3.0

    def to_dict(self):
        return {"room_half_extent": self.room_half_extent, "size_cap": self.size_cap}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["room_half_extent"]), float(d["size_cap"]))


@dataclass(frozen=True)
class ObjectRecord:
    category: int
    yaw: float
    size: tuple
    translation: tuple
    shape: ShapeParams

    def __post_init__(self):
        size = tuple(float(v) for v in self.size)
        trans = tuple(float(v) for v in self.translation)
        if len(size) != 3 or len(trans) != 3:
            raise CodecError("size and translation must be 3-vectors")
        if not all(math.isfinite(v) for v in size + trans) or not math.isfinite(self.yaw):
            raise CodecError("non-finite object field")
        if min(size) <= 0:
            raise CodecError(f"box size must be positive, got {size}")
        object.__setattr__(self, "category", int(self.category))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "translation", trans)

    def to_dict(self):
        return {
            "category": self.category,
            "yaw": self.yaw,
            "size": list(self.size),
            "translation": list(self.translation),
            "shape": {"family": self.shape.family, "params": list(self.shape.params)},
        }

    @classmethod
    def from_dict(cls, d):
        s = d["shape"]
        return cls(d["category"], d["yaw"], tuple(d["size"]), tuple(d["translation"]),
                   ShapeParams(s["family"], tuple(s["params"])))


@dataclass
class SceneMatrix:
    data: np.ndarray
    valid_count: Optional[int] = None

    @property
    def D(self):
        return self.data.shape[0]

    @property
    def M(self):
        return self.data.shape[1]


def encode_object(obj: ObjectRecord, norm: NormalizationStats = NormalizationStats(),
                  vocab: Vocabulary = DEFAULT_VOCAB, strict=True) -> np.ndarray:
    vocab.check(obj.category)
    if strict:
        vocab.table_entry(obj.category, obj.shape)
    size = np.asarray(obj.size) / norm.size_cap
    trans = np.asarray(obj.translation) / norm.room_half_extent
    if np.any(size > 1.0) or np.any(np.abs(trans) > 1.0):
        raise CodecError(
            f"object exceeds normalisation bounds (size {obj.size}, translation {obj.translation})")
    v = np.empty(LAYOUT_DIM + CODE_DIM)
    v[0] = math.sin(obj.yaw)
    v[1] = math.cos(obj.yaw)
    v[SIZE] = size
    v[TRANS] = trans
    v[CODE] = encode_shape(obj.shape)
    return v


def encode_scene(objs: Sequence[ObjectRecord], M: int = 12,
                 norm: NormalizationStats = NormalizationStats(),
                 vocab: Vocabulary = DEFAULT_VOCAB, floor_center=(0.0, 0.0),
                 strict=True) -> SceneMatrix:
    """Encode objects column by column and zero-pad to ``M`` columns.

    ``floor_center`` is the (x, y) position of the room floor centre in the
    objects' coordinate frame; it is subtracted so the encoded scene has the
    floor centre at the origin.
    """
    if len(objs) == 0:
        raise EmptySceneError("cannot encode an empty scene")
    if len(objs) > M:
        raise CapacityError(f"{len(objs)} objects exceed capacity M={M}")
    fx, fy = float(floor_center[0]), float(floor_center[1])
    data = np.zeros((LAYOUT_DIM + CODE_DIM, M))
    for i, o in enumerate(objs):
        if fx or fy:
            tx, ty, tz = o.translation
            o = ObjectRecord(o.category, o.yaw, o.size, (tx - fx, ty - fy, tz), o.shape)
        data[:, i] = encode_object(o, norm, vocab, strict=strict)
    return SceneMatrix(data, len(objs))


@dataclass
class DecodedScene:
    objects: list
    columns: list
    empty: bool
    issues: dict = field(default_factory=dict)

    @property
    def clean(self):
        """True when at least one object survived and none failed validation."""
        return not self.empty and not self.issues


def column_issues(v, norm: NormalizationStats, snap_dist: float, snap_radius: float):
    """Plausibility problems of one decoded column (empty list = valid)."""
    issues = []
    yaw_norm = float(np.hypot(v[0], v[1]))
    if not 0.5 <= yaw_norm <= 1.5:
        issues.append(f"yaw block norm {yaw_norm:.3f}")
    size = v[SIZE] * norm.size_cap
    if np.any(size < 0.05) or np.any(size > norm.size_cap):
        issues.append(f"size {np.round(size, 3).tolist()}")
    if np.any(np.abs(v[TRANS]) > 1.0) or v[TRANS][2] < 0:
        issues.append("translation outside room")
    if snap_dist > snap_radius:
        issues.append(f"shape code {snap_dist:.3f} from codec table")
    return issues


def decode_scene(m, norm: NormalizationStats = NormalizationStats(),
                 vocab: Vocabulary = DEFAULT_VOCAB, pad_threshold: float = 0.1,
                 snap_radius: float = 0.2) -> DecodedScene:
    """Pop-out decoding: drop near-zero columns, denormalise the rest."""
    data = m.data if isinstance(m, SceneMatrix) else np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise CodecError("scene matrix contains non-finite entries")
    norms = np.linalg.norm(data, axis=0)
    objs, cols, issues = [], [], {}
    for j in np.flatnonzero(norms > pad_threshold):
        v = data[:, j]
        entry, dist = vocab.snap(v[CODE])
        bad = column_issues(v, norm, dist, snap_radius)
        if bad:
            issues[len(objs)] = bad
        yaw = math.atan2(v[0], v[1]) if np.hypot(v[0], v[1]) > 0 else 0.0
        size = tuple(np.maximum(v[SIZE] * norm.size_cap, 1e-6))
        trans = tuple(v[TRANS] * norm.room_half_extent)
        cat = int(vocab.table_category[entry])
        objs.append(ObjectRecord(cat, yaw, size, trans, vocab.table_shapes[entry]))
        cols.append(int(j))
    return DecodedScene(objs, cols, empty=not objs, issues=issues)


# ---------------------------------------------------------------------------
# dataset file


def save_dataset(path, scenes, norm=NormalizationStats(), vocab=DEFAULT_VOCAB, extra=None):
    doc = {
        "norm": norm.to_dict(),
        "vocab": vocab.to_dict(),
        "scenes": [{"objects": [o.to_dict() for o in s]} for s in scenes],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_dataset(path):
    """Returns ``(scenes, norm, vocab)``; the vocab key is optional."""
    with open(path) as fh:
        doc = json.load(fh)
    norm = NormalizationStats.from_dict(doc["norm"])
    vocab = Vocabulary.from_dict(doc["vocab"]) if "vocab" in doc else DEFAULT_VOCAB
    scenes = [[ObjectRecord.from_dict(o) for o in s["objects"]] for s in doc["scenes"]]
    return scenes, norm, vocab
