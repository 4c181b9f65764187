import math

import numpy as np
import pytest

from sketchscene import synth
from sketchscene.codec import DEFAULT_VOCAB, ObjectRecord
from sketchscene.errors import MetricError
from sketchscene.evaluation import (ckl, describe, descriptor_matrix, evaluate, frechet_distance,
                                    kernel_distance, sca)

from oracles import ckl_closed_form, gaussian_frechet

N = len(DEFAULT_VOCAB)


def obj(cat, x=0.0):
    shape = DEFAULT_VOCAB.categories[cat].shapes()[0]
    size = DEFAULT_VOCAB.nominal_size(cat, 0)
    return ObjectRecord(cat, 0.0, size, (x, 0.0, size[2] / 2), shape)


@pytest.fixture(scope="module")
def corpus():
    return synth.sample_corpus(synth.GeneratorConfig(seed=21), 500)


@pytest.fixture(scope="module")
def descriptors(corpus):
    return descriptor_matrix(corpus, N)


def test_ckl_examples(corpus):
    assert ckl(corpus, corpus, N) <= 1e-9
    chairs = [[obj(4)] for _ in range(10)]
    tables = [[obj(5)] for _ in range(10)]
    p_ref = np.bincount([4] * 10, minlength=N)
    p_gen = np.bincount([5] * 10, minlength=N)
    value = ckl(tables, chairs, N)
    assert math.isfinite(value) and value > 5
    assert value == pytest.approx(ckl_closed_form(p_ref, p_gen), rel=1e-12)
    assert ckl(corpus + corpus[:1], corpus, N) <= 0.01
    with pytest.raises(MetricError):
        ckl([], corpus, N)


def test_ckl_permutation_invariant(corpus):
    a, b = corpus[:250], corpus[250:]
    order = np.random.default_rng(0).permutation(250)
    assert ckl(a, b, N) == pytest.approx(ckl([a[i] for i in order], b[::-1], N), abs=1e-15)


def test_sca_bootstrap_is_chance(descriptors):
    accs = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        boot = descriptors[rng.integers(len(descriptors), size=len(descriptors))]
        accs.append(sca(None, None, N, seed=seed, features=(boot, descriptors)))
    assert 0.45 <= float(np.median(accs)) <= 0.55


def test_sca_disjoint_vocabulary_separable():
    xs = np.random.default_rng(0).uniform(-1.5, -0.5, size=(2, 120))
    a = [[obj(0, x - 1), obj(1, 1.5)] for x in xs[0]]
    b = [[obj(4, x - 1), obj(5, 1.5)] for x in xs[1]]
    assert sca(a, b, N, seed=0) >= 0.95
    assert sca(a, b, N, seed=3) == sca(a, b, N, seed=3)
    with pytest.raises(MetricError):
        sca(a[:10], b[:10], N)


def test_frechet_and_kernel_identical(descriptors):
    fd, _ = frechet_distance(descriptors, descriptors)
    assert fd == pytest.approx(0.0, abs=1e-6)
    assert kernel_distance(descriptors, descriptors) <= 1e-8


def test_frechet_mean_shift_and_closed_form():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 5)) @ rng.normal(size=(5, 5))
    delta = np.array([0.5, -1.0, 0.0, 2.0, 0.3])
    fd, ridge = frechet_distance(X + delta, X)
    assert not ridge and fd >= delta @ delta - 1e-8
    Y = rng.normal(size=(300, 5)) * 2
    ref = gaussian_frechet(X.mean(0), np.cov(X, rowvar=False), Y.mean(0), np.cov(Y, rowvar=False))
    assert frechet_distance(X, Y)[0] == pytest.approx(ref, rel=1e-7)


def test_frechet_ridge_on_singular():
    X = np.random.default_rng(2).normal(size=(100, 3))
    X = np.hstack([X, X[:, :1]])
    _, ridge = frechet_distance(X, X + 0.1)
    assert ridge


def test_distances_permutation_invariant(descriptors):
    rng = np.random.default_rng(3)
    X, Y = descriptors[:200], descriptors[200:400] + 0.05
    p, q = rng.permutation(200), rng.permutation(200)
    assert frechet_distance(X[p], Y[q])[0] == pytest.approx(frechet_distance(X, Y)[0], rel=1e-9)
    assert kernel_distance(X[p], Y[q]) == pytest.approx(kernel_distance(X, Y), rel=1e-9)


def test_describe():
    d = describe([obj(0, -2), obj(1, 2)], N)
    assert d.count == 2 and d.histogram[0] == 0.5 and d.mean_distance == pytest.approx(4.0)
    with pytest.raises(MetricError):
        describe([], N)


def test_evaluate_report(corpus):
    rep = evaluate(corpus[:120], corpus[120:240], N, seed=0, digest="abc")
    d = rep.to_dict()
    assert d["ckl_x100"] == pytest.approx(100 * d["ckl"])
    assert rep.sca is not None and rep.fd_desc is not None and rep.config_digest == "abc"
    small = evaluate(corpus[:10], corpus[:10], N)
    assert small.sca is None and small.fd_desc is None and len(small.notes) == 2
