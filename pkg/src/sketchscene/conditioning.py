"""Denoising condition: sketch encoding + knowledge-enhanced graph reasoning.

Both branches produce a D-vector per scene; the condition is their
column stack ``[H_S, H_G]``. Batched code paths carry the two vectors as two
tokens of shape ``(B, 2, D)``.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ChannelCountError, ShapeError, VocabularyError
from .knowledge import RELATIONS

N_CHANNELS = len(RELATIONS) + 1  # raw embedding channel + one per relation


class EntityEmbeddingTable:
    """Frozen per-type vectors; by default random orthonormal rows."""

    def __init__(self, names: Sequence[str], dim: int = 16, seed: int = 11, vectors=None):
        self.names = list(names)
        if vectors is None:
            if len(self.names) > dim:
                raise ValueError("orthogonal rows need dim >= vocabulary size")
            rng = np.random.default_rng(seed)
            q, r = np.linalg.qr(rng.standard_normal((dim, len(self.names))))
            vectors = (q * np.sign(np.diag(r))).T
        self.vectors = np.array(vectors, dtype=np.float64)
        self.vectors.setflags(write=False)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @classmethod
    def from_text(cls, path, names: Sequence[str], dim: int = 16, seed: int = 11):
        """Rows from a ``name v1 ... vD`` text file; missing names keep the
        random orthogonal row."""
        base = cls(names, dim, seed)
        vecs = base.vectors.copy()
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts or parts[0] not in base.names:
                    continue
                v = np.array([float(x) for x in parts[1:]])
                if v.shape != (dim,):
                    raise ShapeError(f"{parts[0]}: expected {dim} values, got {v.size}")
                vecs[base.names.index(parts[0])] = v
        return cls(names, dim, vectors=vecs)

    def lookup(self, types) -> np.ndarray:
        idx = []
        for t in types:
            if isinstance(t, str):
                if t not in self.names:
                    raise VocabularyError(f"unknown entity {t!r}")
                idx.append(self.names.index(t))
            else:
                if not 0 <= int(t) < len(self.names):
                    raise VocabularyError(f"unknown entity id {t}")
                idx.append(int(t))
        return self.vectors[idx]


def embed_entities(table: EntityEmbeddingTable, types) -> np.ndarray:
    return table.lookup(types)


def kegr_step(H, A, W, act=ad.leaky_relu) -> Tensor:
    """One graph-convolution step ``act(A @ H @ W)``."""
    H, A, W = ad.as_tensor(H), ad.as_tensor(A), ad.as_tensor(W)
    if A.shape[-1] != H.shape[-2] or A.shape[-2] != A.shape[-1] or W.shape[0] != H.shape[-1] \
            or W.shape[0] != W.shape[1]:
        raise ShapeError(f"kegr_step: H {H.shape}, A {A.shape}, W {W.shape}")
    return act(ad.matmul(ad.matmul(A, H), W))


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, rng, P: Optional[nn.Params] = None) -> nn.Params:
    P = P if P is not None else nn.Params()
    Dw = cfg.D_omega
    for j in range(cfg.J):
        P.create(f"kegr.w{j}", (Dw, Dw), rng, scale=1.0 / np.sqrt(Dw)).data += np.eye(Dw) * 0.5
    P.create("kegr.fuse.w", (N_CHANNELS, 1), rng, scale=1.0 / np.sqrt(N_CHANNELS))
    P.create("kegr.fuse.b", (1,), rng, init="zeros")
    nn.init_linear(P, "kegr.proj", Dw, cfg.D, rng)

    n_patch = (cfg.sketch_size // cfg.patch) ** 2
    W = cfg.sketch_width
    nn.init_linear(P, "sketch.patch", cfg.patch * cfg.patch, W, rng)
    P.create("sketch.pos", (n_patch, W), rng, scale=0.02)
    for b in range(cfg.sketch_blocks):
        nn.init_encoder_block(P, f"sketch.blk{b}", W, 2 * W, rng)
    nn.init_layer_norm(P, "sketch.ln", W, rng)
    nn.init_linear(P, "sketch.out", W, cfg.D, rng)
    return P


# ---------------------------------------------------------------------------
# graph reasoning


def pad_entities(table: EntityEmbeddingTable, entity_lists, adjacency_list):
    """Stack variable-size entity sets into padded batch arrays.

    Returns ``(H0 (B, n, Dw), A (B, R, n, n), mask (B, n))``; padded rows and
    columns of ``A`` are zero, including the diagonal.
    """
    B = len(entity_lists)
    n = max(len(e) for e in entity_lists)
    R = adjacency_list[0].shape[0]
    H0 = np.zeros((B, n, table.dim))
    A = np.zeros((B, R, n, n))
    mask = np.zeros((B, n), dtype=bool)
    for b, (ents, adj) in enumerate(zip(entity_lists, adjacency_list)):
        k = len(ents)
        H0[b, :k] = table.lookup(ents)
        A[b, :, :k, :k] = adj
        mask[b, :k] = True
    return H0, A, mask


def kegr_reason(P: nn.Params, cfg: ModelConfig, H0, A, mask=None) -> Tensor:
    """Graph feature ``(B, D)`` from node embeddings and relation adjacencies.

    Every relation channel runs ``J`` shared-weight steps from ``H0``; the raw
    embeddings form one more channel. A 1x1 convolution fuses the channels,
    then a masked mean over nodes and a linear map give the D-vector.
    Unbatched inputs (``H0`` of shape ``(n, Dw)``) return shape ``(D,)``.
    """
    H0 = np.asarray(H0, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    single = H0.ndim == 2
    if single:
        H0, A = H0[None], A[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if A.shape[1] != N_CHANNELS - 1:
        raise ChannelCountError(
            f"expected {N_CHANNELS - 1} relation adjacencies, got {A.shape[1]}")
    B, n, _ = H0.shape
    if mask is None:
        mask = np.ones((B, n), dtype=bool)
    h0 = Tensor(H0)
    channels = [h0]
    for r in range(A.shape[1]):
        h = h0
        Ar = Tensor(A[:, r])
        for j in range(cfg.J):
            h = kegr_step(h, Ar, P[f"kegr.w{j}"])
        channels.append(h)
    stacked = ad.stack(channels, axis=-1)                       # (B, n, Dw, C)
    fused = ad.leaky_relu(ad.matmul(stacked, P["kegr.fuse.w"]) + P["kegr.fuse.b"])
    fused = ad.reshape(fused, (B, n, H0.shape[2]))
    w = (mask / mask.sum(axis=1, keepdims=True))[:, :, None]
    pooled = ad.sum_(fused * Tensor(w), axis=1)                 # (B, Dw)
    out = nn.linear(P, "kegr.proj", pooled)
    return ad.reshape(out, (cfg.D,)) if single else out


# ---------------------------------------------------------------------------
# sketch encoder


def patchify(pixels, patch):
    """``(B, S, S)`` rasters to ``(B, (S/p)^2, p*p)`` patch rows."""
    pix = np.asarray(pixels, dtype=np.float64)
    if pix.ndim == 2:
        pix = pix[None]
    B, H, W = pix.shape
    g = H // patch
    return pix.reshape(B, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(B, g * g, patch * patch)


def encode_sketch(P: nn.Params, cfg: ModelConfig, pixels) -> Tensor:
    """Sketch feature ``(B, D)`` (or ``(D,)`` for a single raster)."""
    pix = np.asarray(pixels)
    single = pix.ndim == 2
    if pix.shape[-2:] != (cfg.sketch_size, cfg.sketch_size):
        raise ShapeError(f"raster {pix.shape[-2:]} != configured {cfg.sketch_size}x{cfg.sketch_size}")
    x = Tensor(patchify(pix, cfg.patch))
    x = nn.linear(P, "sketch.patch", x) + P["sketch.pos"]
    for b in range(cfg.sketch_blocks):
        x = nn.encoder_block(P, f"sketch.blk{b}", x, cfg.sketch_heads, pre_norm=True)
    x = nn.layer_norm(P, "sketch.ln", x)
    out = nn.linear(P, "sketch.out", ad.mean(x, axis=1))
    return ad.reshape(out, (cfg.D,)) if single else out


def assemble_condition(HS, HG) -> Tensor:
    """Column stack ``[H_S, H_G]``: ``(D, 2)`` for vectors, ``(B, 2, D)``
    token layout for batches."""
    HS, HG = ad.as_tensor(HS), ad.as_tensor(HG)
    if HS.shape != HG.shape:
        raise ShapeError(f"condition halves differ: {HS.shape} vs {HG.shape}")
    if HS.ndim == 1:
        return ad.stack([HS, HG], axis=1)
    return ad.stack([HS, HG], axis=1)


def condition(P: nn.Params, cfg: ModelConfig, pixels, H0, A, mask) -> Tensor:
    """Batched condition tokens ``(B, 2, D)`` honouring the ablation flags."""
    B = len(pixels)
    zero = Tensor(np.zeros((B, cfg.D)))
    HS = encode_sketch(P, cfg, pixels) if cfg.use_sketch else zero
    HG = kegr_reason(P, cfg, H0, A, mask) if cfg.use_knowledge else zero
    return assemble_condition(HS, HG)
