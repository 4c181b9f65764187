import math

import numpy as np
import pytest

from sketchscene import autodiff as ad
from sketchscene import diffusion as df
from sketchscene import synth
from sketchscene.autodiff import Adam, Tensor
from sketchscene.config import ModelConfig
from sketchscene.errors import SamplerDivergenceError, ScheduleError, StepRangeError
from sketchscene.model import SceneModel
from sketchscene.training import GraphCache, prepare, sketch_input

from oracles import analytic_eps_fn

SCHED = df.make_schedule()


def test_schedule_examples():
    s = df.make_schedule(T=1, beta_start=0.3, beta_end=0.3)
    assert s.alpha_bars[0] == pytest.approx(0.7)
    assert np.prod(1 - np.linspace(1e-4, 0.2, 100)) == pytest.approx(SCHED.alpha_bars[-1], rel=1e-12)
    assert SCHED.alpha_bars[-1] < 0.01
    for bad in [dict(T=0), dict(beta_start=0.0), dict(beta_start=0.3, beta_end=0.2), dict(beta_end=1.0)]:
        with pytest.raises(ScheduleError):
            df.make_schedule(**bad)
    with pytest.raises(ScheduleError):
        df.make_schedule(reverse_variance="other")


def test_q_sample_examples():
    rng = np.random.default_rng(0)
    O0, eps = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    assert np.array_equal(df.q_sample(O0, 0, eps, SCHED), O0)
    ab = SCHED.alpha_bars[9]
    assert np.allclose(df.q_sample(O0, 10, np.zeros_like(O0), SCHED), math.sqrt(ab) * O0)
    out = df.q_sample(O0, np.array([0, 100]), eps, SCHED)
    assert np.array_equal(out[0], O0[0])
    with pytest.raises(StepRangeError):
        df.q_sample(O0, 101, eps, SCHED)


def test_forward_composition_matches_marginal():
    rng = np.random.default_rng(1)
    O0 = rng.normal(size=(4, 3))
    n, t = 10_000, 25
    O = np.broadcast_to(O0, (n, 4, 3)).copy()
    for s in range(1, t + 1):
        O = df.q_step(O, s, rng.standard_normal(O.shape), SCHED)
    ab = SCHED.alpha_bar(t)
    se_mean = math.sqrt((1 - ab) / n)
    assert np.all(np.abs(O.mean(0) - math.sqrt(ab) * O0) <= 4 * se_mean)
    se_var = (1 - ab) * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(O.var(0, ddof=1) - (1 - ab)) <= 4 * se_var)


def test_loss_examples():
    eps = np.random.default_rng(2).normal(size=(500, 6, 4))
    assert df.diffusion_loss(Tensor(eps), eps).item() == 0.0
    zero = df.diffusion_loss(Tensor(np.zeros_like(eps)), eps).item()
    # chi-square with D*M degrees of freedom, averaged over the batch
    assert abs(zero - 24) <= 4 * math.sqrt(2 * 24 / 500)


def test_oracle_injection_gives_zero_loss_and_nonfinite_skips():
    cfg = ModelConfig(D=16, M=12, width=16, sketch_blocks=1)
    model = SceneModel(cfg, synth.GeneratorConfig().vocab.names)
    data = prepare(synth.sample_corpus(synth.GeneratorConfig(seed=0), 4), views=[0])
    opt = Adam(model.params)
    graph = GraphCache(model).batch(data.entities)
    rng = np.random.default_rng(0)
    pix = sketch_input(data.rasters[:, 0])
    loss = df.train_step(model, opt, SCHED, data.matrices, pix, graph, rng,
                         predict=lambda t, O, e: Tensor(e))
    assert loss == 0.0
    before = {k: p.data.copy() for k, p in model.params.items()}
    loss = df.train_step(model, opt, SCHED, data.matrices, pix, graph, rng,
                         predict=lambda t, O, e: Tensor(np.full(e.shape, np.nan)))
    assert not np.isfinite(loss)
    assert all(np.array_equal(before[k], p.data) for k, p in model.params.items())


def test_loss_decreases_on_frozen_batch():
    cfg = ModelConfig(width=16, heads=2, sketch_blocks=1, T=100)
    scenes = synth.sample_corpus(synth.GeneratorConfig(seed=3), 10)
    data = prepare(scenes, views=[0])
    model = SceneModel(cfg, synth.GeneratorConfig().vocab.names)
    rng = np.random.default_rng(0)
    t = rng.integers(1, 101, size=10)
    eps = rng.standard_normal(data.matrices.shape)
    O_t = df.q_sample(data.matrices, t, eps, SCHED)
    graph = GraphCache(model).batch(data.entities)
    pix = sketch_input(data.rasters[:, 0])
    opt = Adam(model.params, lr=3e-3)
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = df.diffusion_loss(model.predict(model.condition(pix, graph=graph), t - 1, Tensor(O_t)), eps)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_t1_chain_by_hand():
    s = df.make_schedule(T=1, beta_start=0.2, beta_end=0.2, reverse_variance="beta")
    rng = np.random.default_rng(5)
    z = np.random.default_rng(5).standard_normal((1, 3, 2))
    eps_hat = np.full((1, 3, 2), 0.3)
    out = df.sample(lambda t, O: eps_hat, (1, 3, 2), s, rng)
    hand = (z - 0.2 / math.sqrt(0.2) * eps_hat) / math.sqrt(0.8)
    assert np.allclose(out, hand, atol=1e-14)


@pytest.mark.parametrize("variance", ["posterior", "beta"])
@pytest.mark.parametrize("ddim", [False, True])
def test_perfect_denoiser_recovers_datum(variance, ddim):
    sched = df.make_schedule(reverse_variance=variance)
    O0 = np.random.default_rng(6).uniform(-0.8, 0.8, size=(1, 16, 12))
    out = df.sample(analytic_eps_fn(O0, sched), O0.shape, sched, np.random.default_rng(7), ddim=ddim)
    assert np.max(np.abs(out - O0)) <= 1e-3


def test_sample_deterministic_and_divergence():
    fn = lambda t, O: 0.1 * O
    a = df.sample(fn, (2, 4, 3), SCHED, np.random.default_rng(1))
    b = df.sample(fn, (2, 4, 3), SCHED, np.random.default_rng(1))
    assert np.array_equal(a, b)
    with pytest.raises(SamplerDivergenceError) as err:
        df.sample(lambda t, O: -50.0 * O, (1, 4, 3), SCHED, np.random.default_rng(0))
    assert err.value.step <= SCHED.T


def test_terminal_moments():
    O0 = np.random.default_rng(8).uniform(-1, 1, size=(16, 12))
    n = 10_000
    eps = np.random.default_rng(9).standard_normal((n, 16, 12))
    OT = df.q_sample(np.broadcast_to(O0, eps.shape), SCHED.T, eps, SCHED)
    x = OT.reshape(n, -1)
    assert np.all(np.abs(x.mean(0)) <= 3 * math.sqrt(1 / n) + math.sqrt(SCHED.alpha_bars[-1]))
    assert abs(x.mean()) <= 3 / math.sqrt(x.size) + math.sqrt(SCHED.alpha_bars[-1])
    assert abs(x.var() - 1) <= 3 * math.sqrt(2 / x.size) + 1e-4


def test_complete_contract():
    rng = np.random.default_rng(0)
    partial = rng.normal(size=(3, 4, 5))
    known = np.zeros((3, 5), dtype=bool)
    known[:, :2] = True
    fn = lambda t, O: 0.2 * O
    for ddim in (False, True):
        out = df.complete(fn, partial, known, SCHED, np.random.default_rng(1), ddim=ddim)
        assert np.array_equal(out[:, :, :2], partial[:, :, :2])
    full = df.complete(fn, partial, np.ones((3, 5), bool), SCHED, np.random.default_rng(1))
    assert np.array_equal(full, partial)
    none = df.complete(fn, partial, np.zeros((3, 5), bool), SCHED, np.random.default_rng(2))
    assert np.array_equal(none, df.sample(fn, partial.shape, SCHED, np.random.default_rng(2)))


def test_complete_with_perfect_denoiser_fills_unknown():
    sched = SCHED
    O0 = np.random.default_rng(10).uniform(-0.8, 0.8, size=(1, 16, 12))
    known = np.zeros((1, 12), bool)
    known[0, ::2] = True
    partial = np.where(known[:, None, :], O0, 0.0)
    out = df.complete(analytic_eps_fn(O0, sched), partial, known, sched, np.random.default_rng(1))
    assert np.max(np.abs(out - O0)) <= 1e-3
