"""Scene-set metrics: category KL, real/generated classification accuracy,
and Frechet / polynomial-kernel distances over hand-made scene descriptors.

The distances follow the structure of FID and KID but use the descriptor
features below, so they are reported as ``fd_desc`` and ``kd_desc``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import MetricError
from .knowledge import RELATIONS, Tolerances, analyze_scene

log = logging.getLogger(__name__)

SMOOTHING = 1e-6
RIDGE = 1e-6


@dataclass
class SceneDescriptor:
    histogram: np.ndarray
    count: int
    mean_distance: float
    mean_volume: float
    relation_freq: np.ndarray

    def vector(self):
        return np.concatenate([self.histogram,
                               [self.count, self.mean_distance, self.mean_volume],
                               self.relation_freq])


def describe(scene, n_types: int, tol: Tolerances = Tolerances()) -> SceneDescriptor:
    """Descriptor of one (non-empty) scene.

    Relation frequencies are the fraction of unordered object pairs carrying
    each relation; scenes with a single object get zeros.
    """
    if len(scene) == 0:
        raise MetricError("cannot describe an empty scene")
    hist = np.bincount([o.category for o in scene], minlength=n_types).astype(np.float64)
    hist /= hist.sum()
    centres = np.array([o.translation for o in scene], dtype=np.float64)
    n = len(scene)
    rel = np.zeros(len(RELATIONS))
    if n > 1:
        d = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
        mean_d = float(d[np.triu_indices(n, 1)].mean())
        _, triples = analyze_scene(scene, tol)
        for _, _, r in triples:
            rel[RELATIONS.index(r)] += 1
        rel /= n * (n - 1) / 2
    else:
        mean_d = 0.0
    vol = float(np.mean([np.prod(o.size) for o in scene]))
    return SceneDescriptor(hist, n, mean_d, vol, rel)


def descriptor_matrix(scenes, n_types: int, tol: Tolerances = Tolerances()) -> np.ndarray:
    return np.stack([describe(s, n_types, tol).vector() for s in scenes])


def category_distribution(scenes, n_types: int) -> np.ndarray:
    counts = np.zeros(n_types)
    for s in scenes:
        for o in s:
            counts[o.category] += 1
    return counts


def ckl(gen, ref, n_types: int, smoothing: float = SMOOTHING) -> float:
    """``KL(ref || gen)`` between object-category distributions, with
    ``smoothing`` added to every bin of both before normalising."""
    if len(gen) == 0 or len(ref) == 0:
        raise MetricError("category KL needs non-empty scene sets")
    p = category_distribution(ref, n_types) + smoothing
    q = category_distribution(gen, n_types) + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


# ---------------------------------------------------------------------------
# classification accuracy


def _train_classifier(X, y, rng, hidden=32, epochs=300, lr=1e-2):
    params = {
        "w1": Tensor(rng.normal(0, 1 / math.sqrt(X.shape[1]), (X.shape[1], hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.normal(0, 1 / math.sqrt(hidden), (hidden, 1)), requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    }
    opt = Adam(params, lr=lr)
    Xt = Tensor(X)
    sign = Tensor((2.0 * y - 1.0)[:, None])
    for _ in range(epochs):
        opt.zero_grad()
        logit = ad.matmul(ad.tanh(ad.matmul(Xt, params["w1"]) + params["b1"]), params["w2"]) + params["b2"]
        # logistic loss log(1 + exp(-s * logit)), written stably via softplus
        z = -(sign * logit)
        loss = ad.mean(_softplus(z))
        loss.backward()
        opt.step()
    return params


def _softplus(z: Tensor) -> Tensor:
    """``log(1 + e^z)`` as ``max(z, 0) + log(1 + e^{-|z|})``."""
    keep = Tensor((z.data > 0).astype(np.float64))
    sgn = Tensor(np.sign(z.data))
    return z * keep + ad.log(ad.exp(-(z * sgn)) + 1.0)


def _predict(params, X):
    with ad.no_grad():
        h = np.tanh(X @ params["w1"].data + params["b1"].data)
        return (h @ params["w2"].data + params["b2"].data)[:, 0] > 0


def sca(gen, ref, n_types: int, seed: int = 0, repeats: int = 5, train_frac: float = 0.7,
        min_scenes: int = 100, tol: Tolerances = Tolerances(), features=None) -> float:
    """Mean held-out accuracy of a 2-layer classifier separating generated
    from reference scenes. ``features`` may pass precomputed descriptor
    matrices ``(gen, ref)``."""
    if features is None:
        if min(len(gen), len(ref)) < min_scenes:
            raise MetricError(f"classification accuracy needs >= {min_scenes} scenes per side")
        Xg, Xr = descriptor_matrix(gen, n_types, tol), descriptor_matrix(ref, n_types, tol)
    else:
        Xg, Xr = (np.asarray(f, dtype=np.float64) for f in features)
        if min(len(Xg), len(Xr)) < min_scenes:
            raise MetricError(f"classification accuracy needs >= {min_scenes} scenes per side")
    X = np.concatenate([Xg, Xr])
    y = np.concatenate([np.zeros(len(Xg)), np.ones(len(Xr))])
    # identical descriptors (e.g. a copied reference scene) always land on the
    # same side of the split, otherwise the classifier is scored on its own
    # training rows under the opposite label
    _, group = np.unique(X, axis=0, return_inverse=True)
    group = group.reshape(-1)
    n_groups = group.max() + 1
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(repeats):
        in_train = np.zeros(n_groups, dtype=bool)
        in_train[rng.permutation(n_groups)[:int(round(train_frac * n_groups))]] = True
        tr, te = np.flatnonzero(in_train[group]), np.flatnonzero(~in_train[group])
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd[sd < 1e-12] = 1.0
        params = _train_classifier((X[tr] - mu) / sd, y[tr], rng)
        pred = _predict(params, (X[te] - mu) / sd)
        accs.append(float(np.mean(pred == (y[te] > 0.5))))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# distribution distances


def frechet_distance(X, Y):
    """Frechet distance between Gaussian fits of two descriptor sets.

    Returns ``(value, ridge_added)``; a ridge of 1e-6 is added to both
    covariances when either is singular.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    mu1, mu2 = X.mean(axis=0), Y.mean(axis=0)
    s1 = np.atleast_2d(np.cov(X, rowvar=False))
    s2 = np.atleast_2d(np.cov(Y, rowvar=False))
    ridge = False
    for s in (s1, s2):
        ev = np.linalg.eigvalsh(s)
        if ev.min() <= 1e-12 * max(ev.max(), 1e-300):
            ridge = True
    if ridge:
        eye = np.eye(len(s1)) * RIDGE
        s1, s2 = s1 + eye, s2 + eye
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))
    return max(value, 0.0), ridge


def kernel_distance(X, Y):
    """Unbiased MMD^2 with the kernel ``(x . y / d + 1)^3``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise MetricError("kernel distance needs at least two samples per side")
    d = X.shape[1]
    kxx = (X @ X.T / d + 1.0) ** 3
    kyy = (Y @ Y.T / d + 1.0) ** 3
    kxy = (X @ Y.T / d + 1.0) ** 3
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def frechet_and_kernel(gen, ref, n_types: int, min_scenes: int = 50,
                       tol: Tolerances = Tolerances(), features=None):
    """``(frechet, kernel distance, ridge_added)`` over scene descriptors."""
    if features is None:
        if min(len(gen), len(ref)) < min_scenes:
            raise MetricError(f"distances need >= {min_scenes} scenes per side")
        Xg, Xr = descriptor_matrix(gen, n_types, tol), descriptor_matrix(ref, n_types, tol)
    else:
        Xg, Xr = features
    fd, ridge = frechet_distance(Xg, Xr)
    return fd, kernel_distance(Xg, Xr), ridge


# ---------------------------------------------------------------------------
# reports


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    ckl: float
    sca: Optional[float]
    fd_desc: Optional[float]
    kd_desc: Optional[float]
    n_gen: int
    n_ref: int
    n_gen_empty: int = 0
    config_digest: str = ""
    notes: list = field(default_factory=list)

    @property
    def ckl_x100(self):
        """The same value in the ``CKL x 0.01`` reporting convention."""
        return self.ckl * 100.0

    def to_dict(self):
        d = asdict(self)
        d["ckl_x100"] = self.ckl_x100
        return d


def evaluate(gen, ref, n_types: int, seed: int = 0, digest: str = "", n_gen_empty: int = 0,
             tol: Tolerances = Tolerances()) -> MetricReport:
    """All metrics for non-empty generated scenes ``gen`` against ``ref``.

    Metrics whose sample-size requirement is not met are left as ``None``
    with a note.
    """
    notes = []
    value = ckl(gen, ref, n_types)
    Xg = descriptor_matrix(gen, n_types, tol) if gen else np.zeros((0, n_types + 8))
    Xr = descriptor_matrix(ref, n_types, tol)
    acc = fd = kd = None
    if min(len(Xg), len(Xr)) >= 100:
        acc = sca(None, None, n_types, seed=seed, features=(Xg, Xr))
    else:
        notes.append("sca skipped: fewer than 100 scenes per side")
    if min(len(Xg), len(Xr)) >= 50:
        fd, kd, ridge = frechet_and_kernel(None, None, n_types, features=(Xg, Xr))
        if ridge:
            notes.append(f"covariance ridge {RIDGE:g} added")
    else:
        notes.append("fd/kd skipped: fewer than 50 scenes per side")
    return MetricReport(value, acc, fd, kd, len(gen), len(ref), n_gen_empty, digest, notes)
