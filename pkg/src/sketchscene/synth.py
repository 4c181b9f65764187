"""Procedural scene corpus with planted relation statistics, wireframe sketch
rasters, and object masking for the completion task.

Layouts are built on a 0.1 m integer lattice (all coordinates are handled in
decimetres internally) with group orientations restricted to multiples of
90 degrees, so that box faces land exactly on voxel boundaries. That keeps the
geometric relation classifier's decisions exact for generated scenes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .codec import DEFAULT_VOCAB, NormalizationStats, ObjectRecord, Vocabulary
from .errors import MaskingError, PlacementError
from .kernels import rasterize_segments

ADJACENT = ("attachment", "alignment", "dependent")
SIDES = ("left", "right", "front")
GAP_ADJ = 1     # decimetres between a non-touching satellite and its anchor
GAP_GROUP = 5   # minimum decimetres between different groups


def _pair(a, b):
    return (a, b) if a <= b else (b, a)


@dataclass
class GeneratorConfig:
    """Scene sampler settings.

    ``adjacent`` maps ``(anchor, satellite)`` category-name pairs to
    probabilities of the satellite being placed attached / aligned / dependent;
    the remainder is the probability that it is placed as a separate group.
    ``axis_prob`` is, per category, the probability that a group led by it is
    oriented along the room's x axis (otherwise along y).
    """

    vocab: Vocabulary = DEFAULT_VOCAB
    anchors: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: {
        "bed": ("nightstand", "lamp"),
        "desk": ("chair", "lamp"),
        "table": ("chair", "nightstand"),
        "sofa": ("lamp", "nightstand"),
        "wardrobe": ("chair", "lamp"),
    })
    adjacent: Dict[Tuple[str, str], Tuple[float, float, float]] = field(default_factory=lambda: {
        ("bed", "nightstand"): (0.80, 0.10, 0.05),
        ("bed", "lamp"): (0.20, 0.40, 0.30),
        ("desk", "chair"): (0.65, 0.05, 0.20),
        ("desk", "lamp"): (0.10, 0.70, 0.10),
        ("table", "chair"): (0.50, 0.15, 0.25),
        ("table", "nightstand"): (0.05, 0.20, 0.60),
        ("sofa", "lamp"): (0.35, 0.25, 0.15),
        ("sofa", "nightstand"): (0.90, 0.02, 0.03),
        ("wardrobe", "chair"): (0.02, 0.30, 0.45),
        ("wardrobe", "lamp"): (0.12, 0.50, 0.35),
    })
    axis_prob: Dict[str, float] = field(default_factory=lambda: {
        "bed": 0.95, "desk": 0.75, "table": 0.55, "sofa": 0.30, "wardrobe": 0.10,
        "nightstand": 0.5, "chair": 0.5, "lamp": 0.5,
    })
    groups: Tuple[int, int] = (2, 3)
    satellites: Tuple[int, int] = (1, 2)
    objects: Tuple[int, int] = (2, 9)
    room_half_extent: float = 4.0
    max_tries: int = 200
    seed: int = 0

    def __post_init__(self):
        for key, probs in self.adjacent.items():
            if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1 + 1e-12:
                raise ValueError(f"invalid planted probabilities for {key}: {probs}")
        for k, p in self.axis_prob.items():
            if not 0 <= p <= 1:
                raise ValueError(f"invalid axis probability for {k}: {p}")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid object-count range {self.objects}")

    def planted_table(self):
        """Ground-truth relation probabilities, keyed by relation name."""
        table = {r: {} for r in ADJACENT}
        for (a, s), probs in self.adjacent.items():
            for r, p in zip(ADJACENT, probs):
                table[r][(a, s)] = p
        par = {}
        names = list(self.anchors)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                qa, qb = self.axis_prob[a], self.axis_prob[b]
                par[_pair(a, b)] = qa * qb + (1 - qa) * (1 - qb)
        table["parallel_collinearity"] = par
        return table

    def planted_json(self):
        return {
            "note": "adjacent relations are conditioned on an (anchor, satellite) draw; "
                    "parallel_collinearity applies to pairs of group-leading anchors",
            "relations": {
                r: [{"a": a, "b": b, "p": p} for (a, b), p in sorted(t.items())]
                for r, t in self.planted_table().items()
            },
        }


def source_a_config(seed: int = 0) -> GeneratorConfig:
    """A second procedural distribution over the same vocabulary.

    Relation probabilities and group orientations are shifted relative to
    the defaults while the anchor/satellite structure is kept, which gives a
    knowledge base that is related to, but not the same as, one built from
    the default generator.
    """
    return GeneratorConfig(
        adjacent={
            ("bed", "nightstand"): (0.70, 0.15, 0.05),
            ("bed", "lamp"): (0.30, 0.30, 0.30),
            ("desk", "chair"): (0.55, 0.10, 0.25),
            ("desk", "lamp"): (0.20, 0.55, 0.15),
            ("table", "chair"): (0.60, 0.10, 0.20),
            ("table", "nightstand"): (0.10, 0.30, 0.40),
            ("sofa", "lamp"): (0.25, 0.35, 0.20),
            ("sofa", "nightstand"): (0.75, 0.10, 0.05),
            ("wardrobe", "chair"): (0.05, 0.40, 0.35),
            ("wardrobe", "lamp"): (0.20, 0.40, 0.30),
        },
        axis_prob={
            "bed": 0.85, "desk": 0.60, "table": 0.50, "sofa": 0.40, "wardrobe": 0.20,
            "nightstand": 0.5, "chair": 0.5, "lamp": 0.5,
        },
        seed=seed,
    )


PRESETS = {"default": lambda seed=0: GeneratorConfig(seed=seed), "source-a": source_a_config}


def config_from_dict(d, vocab=DEFAULT_VOCAB):
    kw = dict(d)
    if "anchors" in kw:
        kw["anchors"] = {k: tuple(v) for k, v in kw["anchors"].items()}
    if "adjacent" in kw:
        kw["adjacent"] = {tuple(k.split("|")): tuple(v) for k, v in kw["adjacent"].items()}
    for key in ("groups", "satellites", "objects"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return GeneratorConfig(vocab=vocab, **kw)


def config_to_dict(cfg: GeneratorConfig):
    return {
        "anchors": {k: list(v) for k, v in cfg.anchors.items()},
        "adjacent": {f"{a}|{s}": list(p) for (a, s), p in cfg.adjacent.items()},
        "axis_prob": dict(cfg.axis_prob),
        "groups": list(cfg.groups),
        "satellites": list(cfg.satellites),
        "objects": list(cfg.objects),
        "room_half_extent": cfg.room_half_extent,
        "max_tries": cfg.max_tries,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# layout construction (integer decimetres)


@dataclass
class _Box:
    category: int
    variant: int
    x0: int
    x1: int
    y0: int
    y1: int
    h: int
    yaw_quarter: int  # yaw = yaw_quarter * pi/2


@dataclass
class ScenePlan:
    """Objects plus the generator's own record of what it planted."""

    objects: List[ObjectRecord]
    group_of: List[int]
    relations: Dict[Tuple[int, int], str]


def _rot(boxes, k):
    """Rotate a group of boxes by k quarter turns about the origin."""
    out = []
    for b in boxes:
        x0, x1, y0, y1 = b.x0, b.x1, b.y0, b.y1
        for _ in range(k % 4):
            x0, x1, y0, y1 = -y1, -y0, x0, x1
        out.append(_Box(b.category, b.variant, x0, x1, y0, y1, b.h, (b.yaw_quarter + k) % 4))
    return out


def _dm(v):
    return int(round(v * 10))


def _build_group(cfg, rng, leader, satellites):
    """Lay out one group in its local frame. ``satellites`` is a list of
    ``(category, relation)``; relation is one of ``ADJACENT``."""
    vocab = cfg.vocab
    var = int(rng.integers(len(vocab.categories[leader].variants)))
    w, d, h = (_dm(v) for v in vocab.nominal_size(leader, var))
    x0, y0 = -(w // 2), -(d // 2)
    anchor = _Box(leader, var, x0, x0 + w, y0, y0 + d, h, 0)
    boxes = [anchor]
    sides = list(rng.permutation(SIDES))[:len(satellites)]
    for (cat, rel), side in zip(satellites, sides):
        sv = int(rng.integers(len(vocab.categories[cat].variants)))
        sw, sd, sh = (_dm(v) for v in vocab.nominal_size(cat, sv))
        gap = 0 if rel == "attachment" else GAP_ADJ
        if side == "front":
            # satellite in front of the anchor (negative y), facing it
            lo, hi, length, anchor_lo, anchor_hi = anchor.x0, anchor.x1, sw, anchor.x0, anchor.x1
        else:
            lo, hi, length, anchor_lo, anchor_hi = anchor.y0, anchor.y1, sd, anchor.y0, anchor.y1
        offset = _lateral_offset(rng, rel, length, anchor_lo, anchor_hi)
        if offset is None:
            raise PlacementError(f"no lateral offset realises {rel} on side {side}")
        if side == "front":
            b = _Box(cat, sv, offset, offset + sw, anchor.y0 - gap - sd, anchor.y0 - gap, sh, 2)
        elif side == "left":
            b = _Box(cat, sv, anchor.x0 - gap - sw, anchor.x0 - gap, offset, offset + sd, sh, 0)
        else:
            b = _Box(cat, sv, anchor.x1 + gap, anchor.x1 + gap + sw, offset, offset + sd, sh, 0)
        boxes.append(b)
    return boxes


def _lateral_offset(rng, rel, length, a_lo, a_hi):
    """Start coordinate of a satellite's lateral extent along an anchor side."""
    if rel == "alignment":
        return a_lo if rng.random() < 0.5 else a_hi - length
    # keep contact / proximity: satellite overlaps the anchor's side range
    candidates = list(range(a_lo - length + 2, a_hi - 1))
    if rel == "dependent":
        # no lateral face may be coplanar with any anchor lateral face
        candidates = [c for c in candidates
                      if min(abs(c - a_lo), abs(c - a_hi),
                             abs(c + length - a_lo), abs(c + length - a_hi)) >= 1]
    if not candidates:
        return None
    return int(candidates[int(rng.integers(len(candidates)))])


def _footprint(boxes):
    return (min(b.x0 for b in boxes), max(b.x1 for b in boxes),
            min(b.y0 for b in boxes), max(b.y1 for b in boxes))


def _gap(fa, fb):
    dx = max(fb[0] - fa[1], fa[0] - fb[1], 0)
    dy = max(fb[2] - fa[3], fa[2] - fb[3], 0)
    return math.hypot(dx, dy)


def _to_record(vocab, b):
    cat = vocab.categories[b.category]
    (w, d, h), _ = cat.variants[b.variant]
    yaw = b.yaw_quarter * math.pi / 2
    tx = (b.x0 + b.x1) / 20.0
    ty = (b.y0 + b.y1) / 20.0
    return ObjectRecord(b.category, yaw, (w, d, h), (tx, ty, h / 2.0), cat.shapes()[b.variant])


def sample_plan(cfg: GeneratorConfig, rng) -> ScenePlan:
    vocab = cfg.vocab
    anchors = list(cfg.anchors)
    for _ in range(cfg.max_tries):
        n_groups = int(rng.integers(cfg.groups[0], cfg.groups[1] + 1))
        n_groups = min(n_groups, len(anchors))
        leaders = [anchors[i] for i in rng.permutation(len(anchors))[:n_groups]]
        groups = []   # list of (leader name, [(sat name, relation)])
        loners = []
        for a in leaders:
            n_sat = int(rng.integers(cfg.satellites[0], cfg.satellites[1] + 1))
            sats = []
            for _ in range(n_sat):
                s = cfg.anchors[a][int(rng.integers(len(cfg.anchors[a])))]
                probs = cfg.adjacent.get((a, s), (0.0, 0.0, 0.0))
                u = rng.random()
                edges = np.cumsum(probs)
                k = int(np.searchsorted(edges, u, side="right"))
                if k < 3:
                    sats.append((s, ADJACENT[k]))
                else:
                    loners.append(s)
            groups.append((a, sats))
        groups += [(s, []) for s in loners]
        n_obj = sum(1 + len(s) for _, s in groups)
        if cfg.objects[0] <= n_obj <= cfg.objects[1]:
            break
    else:
        raise PlacementError(f"could not meet object-count range {cfg.objects}")

    half = _dm(cfg.room_half_extent) - 2
    placed = []
    for leader, sats in groups:
        lead = vocab.index(leader)
        local = _build_group(cfg, rng, lead, [(vocab.index(s), r) for s, r in sats])
        along_x = rng.random() < cfg.axis_prob.get(leader, 0.5)
        k = (0 if along_x else 1) + 2 * int(rng.integers(2))
        local = _rot(local, k)
        fx0, fx1, fy0, fy1 = _footprint(local)
        if fx1 - fx0 > 2 * half or fy1 - fy0 > 2 * half:
            raise PlacementError(f"group led by {leader!r} does not fit in the room")
        for _ in range(cfg.max_tries):
            ox = int(rng.integers(-half - fx0, half - fx1 + 1))
            oy = int(rng.integers(-half - fy0, half - fy1 + 1))
            fp = (fx0 + ox, fx1 + ox, fy0 + oy, fy1 + oy)
            if all(_gap(fp, other_fp) >= GAP_GROUP for _, other_fp, _ in placed):
                moved = [_Box(b.category, b.variant, b.x0 + ox, b.x1 + ox, b.y0 + oy, b.y1 + oy,
                              b.h, b.yaw_quarter) for b in local]
                placed.append((moved, fp, sats))
                break
        else:
            raise PlacementError(
                f"could not place group led by {leader!r} after {cfg.max_tries} tries "
                f"({len(placed)} groups already placed)")

    objects, group_of, relations = [], [], {}
    for g, (boxes, _, sats) in enumerate(placed):
        first = len(objects)
        for b in boxes:
            objects.append(_to_record(vocab, b))
            group_of.append(g)
        for i, (_, rel) in enumerate(sats):
            relations[(first, first + 1 + i)] = rel
    return ScenePlan(objects, group_of, relations)


def sample_scene(cfg: GeneratorConfig, rng) -> List[ObjectRecord]:
    return sample_plan(cfg, rng).objects


def sample_corpus(cfg: GeneratorConfig, n: int, seed: Optional[int] = None):
    """``n`` scenes from independent RNG streams spawned off one master seed."""
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    return [sample_scene(cfg, np.random.default_rng(s)) for s in root.spawn(n)]


# ---------------------------------------------------------------------------
# sketch rasters


@dataclass
class SketchRaster:
    pixels: np.ndarray
    viewpoint: int
    clipped: list = field(default_factory=list)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


N_VIEWPOINTS = 21
CAMERA_RADIUS = 9.0
CAMERA_TARGET = np.array([0.0, 0.0, 0.5])
FOCAL_PX = 55.0
NEAR = 0.1
_ELEVATIONS = (math.radians(30), math.radians(50), math.radians(70))


def viewpoints():
    """21 camera positions on the upper hemisphere: 3 elevation rings of 7.

    Viewpoint 0 looks along +y from the -y side, so scenes symmetric about
    x = 0 render to left-right symmetric rasters.
    """
    out = []
    for e in _ELEVATIONS:
        for k in range(7):
            az = -math.pi / 2 + 2 * math.pi * k / 7
            eye = CAMERA_TARGET + CAMERA_RADIUS * np.array(
                [math.cos(e) * math.cos(az), math.cos(e) * math.sin(az), math.sin(e)])
            if k == 0:
                eye[0] = 0.0
            out.append(eye)
    return out


_VIEWPOINTS = viewpoints()


def _camera(eye):
    f = CAMERA_TARGET - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.array([0.0, 0.0, 1.0]))
    r = r / np.linalg.norm(r)
    u = np.cross(r, f)
    return r, u, f


_BOX_EDGES = ((0, 1), (1, 3), (3, 2), (2, 0), (4, 5), (5, 7), (7, 6), (6, 4),
              (0, 4), (1, 5), (2, 6), (3, 7))


def box_corners(obj: ObjectRecord):
    w, d, h = obj.size
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    pts = []
    for dz in (-h / 2, h / 2):
        for dy in (-d / 2, d / 2):
            for dx in (-w / 2, w / 2):
                pts.append((c * dx - s * dy + obj.translation[0],
                            s * dx + c * dy + obj.translation[1],
                            dz + obj.translation[2]))
    return np.array(pts)


def render_sketch(scene: Sequence[ObjectRecord], viewpoint: int, size=64,
                  jitter: float = 0.0, rng=None) -> SketchRaster:
    """Wireframe box projection of every object from one of the fixed viewpoints.

    All 12 box edges are drawn (no hidden-line removal). Edges crossing the
    near plane are cut at it; anything landing outside the image is dropped
    and the object index is listed in ``clipped``. ``jitter`` (pixels, default
    off) perturbs segment endpoints to imitate freehand strokes.
    """
    if not 0 <= viewpoint < N_VIEWPOINTS:
        raise ValueError(f"viewpoint {viewpoint} outside 0..{N_VIEWPOINTS - 1}")
    eye = _VIEWPOINTS[viewpoint]
    r, u, f = _camera(eye)
    segs, clipped = [], []
    lim = size / 2
    for idx, obj in enumerate(scene):
        pc = box_corners(obj) - eye
        cam = np.stack([pc @ r, pc @ u, pc @ f], axis=1)
        outside = False
        for a, b in _BOX_EDGES:
            pa, pb = cam[a], cam[b]
            if pa[2] < NEAR and pb[2] < NEAR:
                outside = True
                continue
            if pa[2] < NEAR or pb[2] < NEAR:
                t = (NEAR - pa[2]) / (pb[2] - pa[2])
                q = pa + t * (pb - pa)
                pa, pb = (q, pb) if pa[2] < NEAR else (pa, q)
                outside = True
            xa, ya = FOCAL_PX * pa[0] / pa[2], FOCAL_PX * pa[1] / pa[2]
            xb, yb = FOCAL_PX * pb[0] / pb[2], FOCAL_PX * pb[1] / pb[2]
            if max(abs(xa), abs(ya), abs(xb), abs(yb)) >= lim:
                outside = True
            segs.append((xa, ya, xb, yb))
        if outside:
            clipped.append(idx)
    segs = np.array(segs, dtype=np.float64).reshape(-1, 4)
    if jitter > 0 and len(segs):
        rng = rng if rng is not None else np.random.default_rng(0)
        segs = segs + rng.normal(0.0, jitter, segs.shape)
    return SketchRaster(rasterize_segments(segs, size, size), viewpoint, clipped)


def write_pgm(path, raster: SketchRaster):
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii"))
        fh.write((raster.pixels.astype(np.uint8) * 255).tobytes())


def read_pgm(path, viewpoint=-1) -> SketchRaster:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return SketchRaster((pix > maxval // 2).astype(np.uint8), viewpoint)


# ---------------------------------------------------------------------------
# masking


def mask_scene(scene: Sequence[ObjectRecord], fraction: float, rng):
    """Remove ``ceil(fraction * K)`` objects at random, always keeping one.

    Returns ``(kept objects, sorted list of removed indices)``.
    """
    K = len(scene)
    if K <= 1:
        raise MaskingError("a scene with fewer than two objects cannot be masked")
    if not 0.3 <= fraction <= 0.8:
        raise MaskingError(f"mask fraction {fraction} outside [0.3, 0.8]")
    n_remove = min(int(math.ceil(fraction * K - 1e-9)), K - 1)
    removed = sorted(int(i) for i in rng.choice(K, size=n_remove, replace=False))
    gone = set(removed)
    kept = [o for i, o in enumerate(scene) if i not in gone]
    return kept, removed


def save_planted(path, cfg: GeneratorConfig):
    with open(path, "w") as fh:
        json.dump(cfg.planted_json(), fh, indent=1, sort_keys=True)
