"""Noise-prediction network.

Token layout (batch-major, tokens along axis 1)::

    [H_S, H_G, time, object_1 .. object_M]      -> (B, M + 3, D)

Stage order: context embedding -> self-attention -> encoder block(s) ->
cross-attention whose keys/values are the two condition tokens plus the
spectrum-filtered object tokens -> linear head on the object tokens.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ComplexTensor, Tensor
from .config import ModelConfig
from .errors import ShapeError, StageError, StepRangeError

N_PREFIX = 3  # condition (2) + time (1) tokens ahead of the object tokens


def _projected(cfg: ModelConfig):
    return cfg.width != cfg.D


def init_params(cfg: ModelConfig, rng, P=None) -> nn.Params:
    P = P if P is not None else nn.Params()
    D = cfg.width
    if _projected(cfg):
        nn.init_linear(P, "den.in.cond", cfg.D, D, rng)
        nn.init_linear(P, "den.in.obj", cfg.D, D, rng)
    nn.init_linear(P, "den.time1", D, D, rng)
    nn.init_linear(P, "den.time2", D, D, rng)
    P.create("den.pos", (cfg.M + N_PREFIX, D), rng, scale=0.1)
    nn.init_attention(P, "den.att1", D, rng)
    nn.init_layer_norm(P, "den.ln1", D, rng)
    for b in range(cfg.encoder_blocks):
        nn.init_encoder_block(P, f"den.enc{b}", D, 2 * D, rng)
    nn.init_attention(P, "den.att2", D, rng)
    nn.init_layer_norm(P, "den.ln2", D, rng)
    P.create("den.sf.conv", (2, 2), rng, init="eye")
    nn.init_linear(P, "den.head", D, cfg.D, rng)
    return P


def time_embedding(P, cfg: ModelConfig, steps) -> Tensor:
    """``(B, 1, D)`` time tokens for zero-based step indices."""
    steps = np.asarray(steps)
    if np.any(steps < 0) or np.any(steps >= cfg.T):
        raise StepRangeError(f"step index outside [0, {cfg.T}): {steps}")
    e = Tensor(nn.sinusoidal(steps, cfg.width, max_period=10.0 * cfg.T))
    h = nn.linear(P, "den.time2", ad.leaky_relu(nn.linear(P, "den.time1", e)))
    return ad.reshape(h, (len(steps), 1, cfg.width))


def embed_context(P, cfg: ModelConfig, cond: Tensor, steps, O_t) -> Tensor:
    """Context tokens ``(B, M + 3, width)`` from condition tokens ``(B, 2, D)``,
    step indices ``(B,)`` and scene matrices ``(B, D, M)``.

    When the token width equals D the condition and object columns enter
    unchanged; otherwise each passes through a learned linear map.
    """
    O_t = ad.as_tensor(O_t)
    if O_t.ndim != 3 or O_t.shape[1:] != (cfg.D, cfg.M):
        raise ShapeError(f"scene batch {O_t.shape} != (B, {cfg.D}, {cfg.M})")
    objs = ad.swap_last(O_t)
    if _projected(cfg):
        cond = nn.linear(P, "den.in.cond", cond)
        objs = nn.linear(P, "den.in.obj", objs)
    tokens = ad.concat([cond, time_embedding(P, cfg, steps), objs], axis=1)
    if cfg.positions:
        tokens = tokens + P["den.pos"]
    return tokens


def atten1(P, cfg: ModelConfig, I: Tensor) -> Tensor:
    return nn.layer_norm(P, "den.ln1", I + nn.attention(P, "den.att1", I, I, cfg.heads))


# ---------------------------------------------------------------------------
# spectrum filter


def highpass_mask(D, M, bandwidth):
    """Complement of a centred 2D Gaussian over the DFT grid.

    Frequencies are measured in cycles/sample with wrap-around, so the DC bin
    is the Gaussian's peak. The Gaussian's standard deviation is
    ``B / (1 - B)``: it spans a quarter-ish of the band at B = 0.25 and
    becomes infinitely wide (mask identically 0) at B = 1.
    """
    fu = np.fft.fftfreq(D)[:, None]
    fv = np.fft.fftfreq(M)[None, :]
    r2 = fu * fu + fv * fv
    if bandwidth >= 1.0:
        return np.zeros((D, M))
    s = bandwidth / (1.0 - bandwidth)
    return 1.0 - np.exp(-r2 / (2.0 * s * s))


def time_scale(t, T):
    """Filter-branch weight ``exp(-t / T)`` for diffusion time ``t`` in [0, T]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise StepRangeError(f"diffusion time outside [0, {T}]: {t}")
    return np.exp(-t / T)


def filter_branch(X, conv, mask, scale) -> Tensor:
    """``scale * Re(IFFT(Conv(mask * FFT(X))))`` over the last two axes."""
    F = ad.fft2(X)
    m = Tensor(mask)
    gr, gi = F.re * m, F.im * m
    # 1x1 complex-channel mixing shared across bins
    hr = gr * conv[0:1, 0:1] + gi * conv[0:1, 1:2]
    hi = gr * conv[1:2, 0:1] + gi * conv[1:2, 1:2]
    return ad.ifft2_real(ComplexTensor(hr, hi)) * Tensor(scale)


def spectrum_filter(X, bandwidth, t, T, conv=None) -> Tensor:
    """Residual high-pass enhancement of a ``(D, M)`` matrix or a batch.

    ``t`` is the diffusion time in [0, T] (one per batch item); the branch
    weight decays from 1 at t = 0 to 1/e at t = T.
    """
    X = ad.as_tensor(X)
    D, M = X.shape[-2], X.shape[-1]
    mask = highpass_mask(D, M, bandwidth)
    conv = ad.as_tensor(np.eye(2) if conv is None else conv)
    scale = time_scale(t, T)
    if X.ndim == 3:
        scale = scale.reshape(-1, 1, 1)
    return X + filter_branch(X, conv, mask, scale)


def atten2(P, cfg: ModelConfig, I1: Tensor, steps) -> Tensor:
    """Cross-attention: queries are all tokens, keys/values the condition
    tokens plus filtered object tokens (time token excluded)."""
    objs = I1[:, N_PREFIX:]
    if cfg.use_spectrum_filter:
        t = np.asarray(steps) + 1  # zero-based step k is diffusion time k + 1
        filtered = spectrum_filter(ad.swap_last(objs), cfg.bandwidth, t, cfg.T, P["den.sf.conv"])
        objs = ad.swap_last(filtered)
    kv = ad.concat([I1[:, 0:2], objs], axis=1)
    return nn.layer_norm(P, "den.ln2", I1 + nn.attention(P, "den.att2", I1, kv, cfg.heads))


def _check(stage, t: Tensor):
    if t.has_nonfinite:
        raise StageError(stage)
    return t


def skip_coefficients(cfg: ModelConfig):
    """Per zero-based step ``(c, s)`` with ``eps_hat = c * O_t + s * head``.

    ``c * O_t`` is the least-squares linear noise estimate for data with
    per-entry second moment ``v = cfg.data_var``, and ``s`` is the standard
    deviation left over, so the head always regresses a unit-scale target.
    """
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T) if cfg.T > 1 else np.array([cfg.beta_start])
    ab = np.cumprod(1.0 - betas)
    total = ab * cfg.data_var + (1.0 - ab)
    return np.sqrt(1.0 - ab) / total, np.sqrt(ab * cfg.data_var / total)


def predict_noise(P, cfg: ModelConfig, cond: Tensor, steps, O_t) -> Tensor:
    """Noise estimate ``(B, D, M)``.

    The layer-normalised token stream cannot follow the scale of ``O_t``, so
    with ``cfg.input_skip`` the head output is a rescaled correction on top
    of a linear estimate from ``O_t`` (see :func:`skip_coefficients`).
    Without that term the reverse chain has no restoring force once ``O_t``
    drifts away from the training scale.
    """
    I = _check("embed_context", embed_context(P, cfg, cond, steps, O_t))
    x = _check("atten1", atten1(P, cfg, I))
    for b in range(cfg.encoder_blocks):
        x = nn.encoder_block(P, f"den.enc{b}", x, cfg.heads)
    _check("encoder", x)
    x = _check("atten2", atten2(P, cfg, x, steps))
    eps = ad.swap_last(nn.linear(P, "den.head", x[:, N_PREFIX:]))
    if cfg.input_skip:
        c, sd = skip_coefficients(cfg)
        k = np.asarray(steps)
        eps = eps * Tensor(sd[k].reshape(-1, 1, 1)) + ad.as_tensor(O_t) * Tensor(c[k].reshape(-1, 1, 1))
    return _check("head", eps)
