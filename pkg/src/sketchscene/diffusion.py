"""Noise schedule, forward corruption, the training objective, ancestral
sampling and inpainting-style completion."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import SamplerDivergenceError, ScheduleError, StepRangeError

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e3


REVERSE_VARIANCES = ("posterior", "beta")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Tables indexed by diffusion time t = 1..T (entry t - 1).

    ``reverse_variance`` picks the noise injected by the reverse chain:
    ``"beta"`` uses ``sigma_t^2 = beta_t``, ``"posterior"`` uses the variance
    of ``q(O_{t-1} | O_t, O_0)``, ``beta_t (1 - abar_{t-1}) / (1 - abar_t)``.
    The two agree for long chains; at T = 100 the first injects roughly
    twenty times the noise the network expects at t = 1, which it cannot
    remove in the final step.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    reverse_variance: str = "posterior"

    @property
    def sigmas(self):
        if self.reverse_variance == "beta":
            return np.sqrt(self.betas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        return np.sqrt(self.betas * (1.0 - prev) / (1.0 - self.alpha_bars))

    def alpha_bar(self, t):
        """``prod_{s<=t} alpha_s`` with the convention alpha_bar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise StepRangeError(f"t outside [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_schedule(T=100, beta_start=1e-4, beta_end=0.2,
                  reverse_variance="posterior") -> DiffusionSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"invalid schedule T={T}, beta {beta_start}->{beta_end}")
    if reverse_variance not in REVERSE_VARIANCES:
        raise ScheduleError(f"reverse_variance must be one of {REVERSE_VARIANCES}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas), reverse_variance)


def q_sample(O0, t, eps, sched: DiffusionSchedule):
    """``sqrt(abar_t) O0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per batch item."""
    O0 = np.asarray(O0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if O0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {O0.shape}")
    ab = sched.alpha_bar(t)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (O0.ndim - 1))
    return np.sqrt(ab) * O0 + np.sqrt(1.0 - ab) * eps


def q_step(O_prev, t, eps, sched: DiffusionSchedule):
    """One forward kernel ``N(sqrt(1 - beta_t) O_{t-1}, beta_t I)``."""
    b = sched.betas[t - 1]
    return np.sqrt(1.0 - b) * O_prev + np.sqrt(b) * eps


def diffusion_loss(eps_hat: Tensor, eps) -> Tensor:
    """Batch mean of the per-scene squared error ``||eps - eps_hat||^2``."""
    diff = eps_hat - Tensor(eps)
    return ad.sum_(ad.square(diff)) * (1.0 / eps_hat.shape[0])


def train_step(model, optimizer, sched: DiffusionSchedule, O0, pixels, graph, rng,
               predict: Optional[Callable] = None):
    """Sample t and noise, regress the noise, apply one optimiser step.

    ``graph`` is the padded ``(H0, A, mask)`` triple for the batch. Returns
    the loss; a non-finite loss skips the update.
    """
    B = O0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(O0.shape)
    O_t = q_sample(O0, t, eps, sched)
    optimizer.zero_grad()
    if predict is None:
        cond = model.condition(pixels, graph=graph)
        eps_hat = model.predict(cond, t - 1, Tensor(O_t))
    else:
        eps_hat = predict(t, O_t, eps)
    loss = diffusion_loss(eps_hat, eps)
    value = float(loss.data)
    if not np.isfinite(value):
        log.warning("non-finite loss; optimiser step skipped")
        return value
    loss.backward()
    optimizer.step()
    return value


def _reverse_mean(O_t, eps_hat, t, sched):
    a = sched.alphas[t - 1]
    ab = sched.alpha_bars[t - 1]
    return (O_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def _ddim_step(O_t, eps_hat, t, sched):
    ab = sched.alpha_bars[t - 1]
    ab_prev = sched.alpha_bar(t - 1)
    x0 = (O_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def _check_divergence(O, t):
    norm = float(np.max(np.linalg.norm(O.reshape(O.shape[0], -1), axis=1)))
    if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise SamplerDivergenceError(t, norm)


def sample(eps_fn: Callable, shape, sched: DiffusionSchedule, rng, ddim=False):
    """Reverse chain from standard normal noise.

    ``eps_fn(t, O_t)`` returns the noise estimate for diffusion time ``t``
    (1..T) as an array of ``shape``. No noise is injected at the final step.
    """
    O = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(t, O)
        if ddim:
            O = _ddim_step(O, eps_hat, t, sched)
        else:
            O = _reverse_mean(O, eps_hat, t, sched)
            if t > 1:
                O = O + sched.sigmas[t - 1] * rng.standard_normal(shape)
        _check_divergence(O, t)
    return O


def complete(eps_fn: Callable, partial, known_mask, sched: DiffusionSchedule, rng, ddim=False):
    """Fill the unknown columns of ``partial`` (``(B, D, M)``).

    ``known_mask`` (``(B, M)`` booleans) marks columns to keep. Every reverse
    step overwrites known columns with their forward-noised values at the
    new time, so the last step restores them exactly. With ``ddim`` the
    reverse updates are deterministic and the known columns follow one fixed
    noise draw (the path a deterministic inversion of them traces).
    """
    partial = np.asarray(partial, dtype=np.float64)
    known = np.asarray(known_mask, dtype=bool)
    if known.ndim == 1:
        known = np.broadcast_to(known, (partial.shape[0], known.shape[0]))
    if not known.any():
        return sample(eps_fn, partial.shape, sched, rng, ddim=ddim)
    if known.all():
        return partial.copy()
    keep = known[:, None, :]
    fixed = rng.standard_normal(partial.shape) if ddim else None

    def project(O, t):
        noise = fixed if ddim else rng.standard_normal(partial.shape)
        return np.where(keep, q_sample(partial, t, noise, sched), O)

    O = project(rng.standard_normal(partial.shape), sched.T)
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(t, O)
        if ddim:
            O = _ddim_step(O, eps_hat, t, sched)
        else:
            O = _reverse_mean(O, eps_hat, t, sched)
            if t > 1:
                O = O + sched.sigmas[t - 1] * rng.standard_normal(partial.shape)
        O = project(O, t - 1)
        _check_divergence(O, t)
    return np.where(keep, partial, O)


def model_eps_fn(model, cond):
    """Adapter from a :class:`SceneModel` plus fixed condition tokens to the
    ``eps_fn(t, O_t)`` interface used by the samplers."""
    B = cond.shape[0]

    def fn(t, O):
        with no_grad():
            steps = np.full(B, t - 1)
            return model.predict(cond, steps, Tensor(O)).data

    return fn
