"""Modality alignment between CSI token sequences and a pretrained token dictionary.

Sequences here are token-major, ``[..., T, D]``: row ``t`` is the feature vector of
time step ``t``.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import numerics as nx
from .backbone import MultiHeadAttention
from .errors import ContractError, DimensionError, ParameterError
from .numerics import Linear, LayerNorm, Module, Parameter, Tensor


def embed_csi(y_bar, embed: Linear) -> Tensor:
    """[..., 2F, T] -> [..., T, D]: the same linear map applied to each time step."""
    return embed(nx.as_tensor(y_bar).swapaxes(-1, -2))


class TemporalMHSA(Module):
    """Pre-norm multi-head self-attention over time with a residual path; no mask, no positions."""

    def __init__(self, dim: int, heads: int, rng):
        super().__init__()
        self.ln = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def forward(self, y, weights: list | None = None) -> Tensor:
        y = nx.as_tensor(y)
        return y + self.attn(self.ln(y), causal=False, weights=weights)


def temporal_mhsa(y_hat, block: TemporalMHSA, weights: list | None = None) -> Tensor:
    return block(y_hat, weights)


_DICT_CACHE: OrderedDict = OrderedDict()
_DICT_CACHE_SIZE = 16


def _fingerprint(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    return hashlib.sha1(a.tobytes() + str((a.shape, a.dtype.str)).encode()).hexdigest()


def reduce_dictionary(d_full, d: int) -> Tensor:
    """PCA-reduced dictionary [d x D]; repeated calls on an unchanged table return the same object."""
    table = np.asarray(d_full.data if isinstance(d_full, Tensor) else d_full)
    n_tokens = table.shape[0]
    if d >= n_tokens:
        raise ParameterError(f"reduced size d={d} must be smaller than the vocabulary ({n_tokens})")
    key = (_fingerprint(table), d)
    hit = _DICT_CACHE.get(key)
    if hit is not None:
        _DICT_CACHE.move_to_end(key)
        return hit
    reduced = nx.pca_reduce(table, d)
    _DICT_CACHE[key] = reduced
    while len(_DICT_CACHE) > _DICT_CACHE_SIZE:
        _DICT_CACHE.popitem(last=False)
    return reduced


class VocabDictionary(Module):
    """Token table, its PCA reduction and the learnable map to semantic anchors."""

    def __init__(self, d_full: np.ndarray, d: int, m: int, rng, identity_init: bool = False):
        super().__init__()
        n_tokens = d_full.shape[0]
        if d > n_tokens // 4:
            raise ParameterError(f"d={d} must be <= |A|/4 = {n_tokens // 4}")
        if m > d or (m == d and not identity_init):
            raise ParameterError(f"anchor count m={m} must be < d={d}")
        self.d = d
        self.m = m
        self.register_buffer("d_full", d_full)
        self.register_buffer("d_hat", reduce_dictionary(self._buffers["d_full"], d).data.copy())
        if identity_init:
            self.anchor_map = Parameter(np.eye(m, d))
        else:
            self.anchor_map = nx.xavier_uniform(rng, m, d)

    @property
    def d_hat(self) -> Tensor:
        return Tensor._wrap(self._buffers["d_hat"])

    def anchors(self) -> Tensor:
        return make_anchors(self.d_hat, self.anchor_map)


def make_anchors(d_hat, anchor_map) -> Tensor:
    """Learnable linear combination along the dictionary axis: [m x d] @ [d x D] -> [m x D]."""
    return nx.as_tensor(anchor_map) @ nx.as_tensor(d_hat)


class CrossModalAttention(Module):
    def __init__(self, dim: int, rng, scale: float | None = None):
        super().__init__()
        self.w_q = nx.xavier_uniform(rng, dim, dim)
        self.w_k = nx.xavier_uniform(rng, dim, dim)
        self.w_v = nx.xavier_uniform(rng, dim, dim)
        self.scale = float(scale if scale is not None else dim)


def cross_modal_attend(y_time, d_hat, params: CrossModalAttention):
    """Queries from the CSI sequence, keys/values from the reduced dictionary.

    Returns ``(y_cross [..., T, D], weights [..., T, d])``; each output row is a
    convex combination of the value rows.
    """
    y_time, d_hat = nx.as_tensor(y_time), nx.as_tensor(d_hat)
    if y_time.shape[-1] != d_hat.shape[-1]:
        raise DimensionError(f"feature dims differ: {y_time.shape} vs dictionary {d_hat.shape}")
    q = y_time @ params.w_q
    k = d_hat @ params.w_k
    v = d_hat @ params.w_v
    weights = nx.softmax(q @ k.T * (1.0 / np.sqrt(params.scale)), axis=-1)
    return weights @ v, weights


class GatedFusion(Module):
    """Gate from the feature-axis concatenation [y_cross ; y_time] -> [..., T, 2D] @ [2D x D]."""

    def __init__(self, dim: int, rng):
        super().__init__()
        self.w_gate = nx.xavier_uniform(rng, 2 * dim, dim)
        self.b_gate = nx.zeros(dim)


def gated_fuse(y_cross, y_time, params: GatedFusion) -> Tensor:
    y_cross, y_time = nx.as_tensor(y_cross), nx.as_tensor(y_time)
    if y_cross.shape != y_time.shape:
        raise DimensionError(f"gated_fuse shapes differ: {y_cross.shape} vs {y_time.shape}")
    g = nx.sigmoid(nx.concat([y_cross, y_time], axis=-1) @ params.w_gate + params.b_gate)
    return y_cross * g + y_time * (1.0 - g)


def cosine_scores(pooled: np.ndarray, anchors: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of each pooled vector [..., D] with each anchor [m, D] -> [..., m]."""
    pn = np.linalg.norm(pooled, axis=-1, keepdims=True)
    an = np.linalg.norm(anchors, axis=-1)
    dots = pooled @ anchors.T
    denom = pn * an
    return np.where(denom > eps, dots / np.maximum(denom, eps), 0.0)


def retrieve_prompts(y_text, anchors, k: int):
    """Top-``k`` anchors by cosine similarity to the time-pooled sequence.

    Returns ``(prompts [..., k, D], scores [..., m], indices [..., k])``. Prompts
    come out in descending score order, ties going to the lower anchor index.
    Selection is not differentiable; gradients flow into the selected anchor rows.
    """
    y_text, anchors = nx.as_tensor(y_text), nx.as_tensor(anchors)
    m = anchors.shape[0]
    if k > m:
        raise ContractError(f"cannot select {k} prompts from {m} anchors")
    pooled = y_text.data.mean(axis=-2)
    scores = cosine_scores(pooled.astype(np.float64), anchors.data.astype(np.float64))
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return anchors[order], scores, order


def prefix_prompts(prompts, y_text) -> Tensor:
    """Prompts occupy positions ``0..K-1``, CSI tokens ``K..K+T-1``."""
    y_text = nx.as_tensor(y_text)
    if prompts is None or prompts.shape[-2] == 0:
        return y_text
    return nx.concat([nx.as_tensor(prompts), y_text], axis=-2)


def pooled(y_text) -> Tensor:
    return nx.as_tensor(y_text).mean(axis=-2)
