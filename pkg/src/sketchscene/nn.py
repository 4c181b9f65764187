"""Parameter store and the layers shared by the conditioner, the denoiser and
the evaluation classifier."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


class Params(OrderedDict):
    """Named trainable tensors. Names are dotted paths (``"den.att1.wq"``)."""

    def create(self, name, shape, rng, scale=None, init="normal"):
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "eye":
            data = np.eye(*shape)
        else:
            fan_in = shape[0] if len(shape) > 1 else 1
            s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
            data = rng.normal(0.0, s, size=shape)
        self[name] = ad.parameter(data, name=name)
        return self[name]

    def subset(self, prefix):
        return Params((k, v) for k, v in self.items() if k.startswith(prefix))

    def numpy(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.items())

    def load(self, arrays):
        for k, v in arrays.items():
            if k not in self:
                continue
            if self[k].shape != v.shape:
                raise ShapeError(f"parameter {k}: stored shape {v.shape} != {self[k].shape}")
            self[k].data = np.array(v, dtype=np.float64)

    def count(self):
        return sum(v.data.size for v in self.values())


def init_linear(P, name, n_in, n_out, rng, bias=True, scale=None):
    P.create(f"{name}.w", (n_in, n_out), rng, scale=scale)
    if bias:
        P.create(f"{name}.b", (n_out,), rng, init="zeros")


def linear(P, name, x):
    y = ad.matmul(x, P[f"{name}.w"])
    b = P.get(f"{name}.b")
    return y + b if b is not None else y


def init_layer_norm(P, name, width, rng):
    P.create(f"{name}.g", (width,), rng, init="ones")
    P.create(f"{name}.b", (width,), rng, init="zeros")


def layer_norm(P, name, x):
    return ad.layer_norm(x) * P[f"{name}.g"] + P[f"{name}.b"]


def init_attention(P, name, width, rng):
    for k in ("q", "k", "v", "o"):
        init_linear(P, f"{name}.{k}", width, width, rng)


def attention(P, name, q_in, kv_in, heads, key_mask=None):
    """Multi-head scaled dot-product attention over the token axis.

    ``q_in`` is ``(B, Tq, C)`` and ``kv_in`` is ``(B, Tk, C)``. ``key_mask``
    (``(B, Tk)`` booleans) excludes keys where it is False.
    """
    B, Tq, C = q_in.shape
    Tk = kv_in.shape[1]
    if kv_in.shape[0] != B or kv_in.shape[2] != C:
        raise ShapeError(f"attention: query {q_in.shape} vs key/value {kv_in.shape}")
    if C % heads:
        raise ShapeError(f"width {C} not divisible by {heads} heads")
    dh = C // heads

    def split(t, T):
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(linear(P, f"{name}.q", q_in), Tq)
    k = split(linear(P, f"{name}.k", kv_in), Tk)
    v = split(linear(P, f"{name}.v", kv_in), Tk)
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9)[:, None, None, :]
        scores = scores + Tensor(bias)
    w = ad.softmax(scores, axis=-1)
    out = ad.matmul(w, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, Tq, C))
    return linear(P, f"{name}.o", out)


def init_ffn(P, name, width, hidden, rng):
    init_linear(P, f"{name}.fc1", width, hidden, rng)
    init_linear(P, f"{name}.fc2", hidden, width, rng)


def ffn(P, name, x):
    return linear(P, f"{name}.fc2", ad.leaky_relu(linear(P, f"{name}.fc1", x)))


def init_encoder_block(P, name, width, hidden, rng):
    init_attention(P, f"{name}.att", width, rng)
    init_layer_norm(P, f"{name}.ln1", width, rng)
    init_ffn(P, f"{name}.ffn", width, hidden, rng)
    init_layer_norm(P, f"{name}.ln2", width, rng)


def encoder_block(P, name, x, heads, pre_norm=False):
    """Transformer encoder block with residuals; post-norm unless ``pre_norm``."""
    if pre_norm:
        h = layer_norm(P, f"{name}.ln1", x)
        x = x + attention(P, f"{name}.att", h, h, heads)
        return x + ffn(P, f"{name}.ffn", layer_norm(P, f"{name}.ln2", x))
    x = layer_norm(P, f"{name}.ln1", x + attention(P, f"{name}.att", x, x, heads))
    return layer_norm(P, f"{name}.ln2", x + ffn(P, f"{name}.ffn", x))


def sinusoidal(steps, dim, max_period=1000.0):
    """Standard sinusoidal step embedding, ``(len(steps), dim)``."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = steps * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
