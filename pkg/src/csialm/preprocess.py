"""Complex CSI to normalized, patched real tensors, plus the channel-gating block.

Layouts follow the math: a real CSI tensor is [2F x T] with real parts in rows
``0..F-1`` and imaginary parts in rows ``F..2F-1``. Leading batch axes are allowed
everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor


def to_real(h: np.ndarray) -> np.ndarray:
    """[..., F, T] complex -> [..., 2F, T] real (block-stacked)."""
    h = np.asarray(h)
    return np.concatenate([h.real, h.imag], axis=-2)


def from_real(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    f = x.shape[-2] // 2
    out = np.empty(x.shape[:-2] + (f, x.shape[-1]), dtype=np.result_type(x.dtype, np.complex64))
    out.real = x[..., :f, :]
    out.imag = x[..., f:, :]
    return out


def real_vector(h: np.ndarray) -> np.ndarray:
    """[..., F] complex -> [..., 2F] real, same block layout as ``to_real``."""
    h = np.asarray(h)
    return np.concatenate([h.real, h.imag], axis=-1)


def complex_vector(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    f = x.shape[-1] // 2
    return x[..., :f] + 1j * x[..., f:]


class Normalizer(Module):
    """Scalar mean/std standardization with running statistics for inference."""

    def __init__(self, momentum: float = 0.99, eps: float = 1e-8):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", 0.0)
        self.register_buffer("running_std", 1.0)
        self.register_buffer("initialized", 0.0)

    def forward(self, x, stats: tuple[float, float] | None = None):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if stats is None:
            if self.training:
                mu, sigma = float(data.mean()), float(data.std())
                self._update(mu, sigma)
            else:
                mu, sigma = self.running_stats()
        else:
            mu, sigma = stats
        sigma = max(sigma, self.eps)
        out = (nx.as_tensor(x) - mu) * (1.0 / sigma) if isinstance(x, Tensor) else (data - mu) / sigma
        return out, (mu, sigma)

    def running_stats(self) -> tuple[float, float]:
        return float(self._buffers["running_mean"]), float(self._buffers["running_std"])

    def _update(self, mu: float, sigma: float) -> None:
        b = self._buffers
        if not b["initialized"]:
            b["running_mean"][...] = mu
            b["running_std"][...] = sigma
            b["initialized"][...] = 1.0
            return
        k = self.momentum
        b["running_mean"][...] = k * b["running_mean"] + (1 - k) * mu
        b["running_std"][...] = k * b["running_std"] + (1 - k) * sigma


def normalize(x, stats=None, normalizer: Normalizer | None = None):
    return (normalizer or Normalizer())(x, stats)


@dataclass
class PatchedTensor:
    values: object  # [..., C, N, T'] ndarray or Tensor
    patch_size: int
    pad: int

    @property
    def length(self) -> int:
        shape = self.values.shape
        return shape[-1] * shape[-2] - self.pad


def patch(x, n: int) -> PatchedTensor:
    """Non-overlapping windows of ``n`` steps along time; ``values[..., c, i, p] = x[..., c, p*n + i]``."""
    if n < 1:
        raise ValueError(f"patch size must be >= 1, got {n}")
    is_tensor = isinstance(x, Tensor)
    t = nx.as_tensor(x)
    *lead, c, length = t.shape
    n_patch = -(-length // n)
    pad = n_patch * n - length
    if pad:
        t = nx.concat([t, Tensor._wrap(np.zeros((*lead, c, pad), dtype=t.dtype))], axis=-1)
    t = t.reshape(*lead, c, n_patch, n).swapaxes(-1, -2)
    return PatchedTensor(t if is_tensor else t.data, n, pad)


def unpatch(p: PatchedTensor):
    is_tensor = isinstance(p.values, Tensor)
    t = nx.as_tensor(p.values)
    *lead, c, n, n_patch = t.shape
    t = t.swapaxes(-1, -2).reshape(*lead, c, n * n_patch)
    if p.pad:
        t = t[..., : n * n_patch - p.pad]
    return t if is_tensor else t.data


class CSSA(Module):
    """Channel gating from self-attention over per-channel pooled descriptors.

    Each of the C feature channels is summarized by its mean and RMS over all
    patches, embedded with a learned channel identity, mixed by single-head
    self-attention across channels, and mapped to a sigmoid gain in (0, 1).
    """

    def __init__(self, channels: int, rng: np.random.Generator, dim: int = 8):
        super().__init__()
        self.dim = dim
        self.w_in = nx.xavier_uniform(rng, 2, dim)
        self.channel_embed = nx.normal(rng, (channels, dim))
        self.w_q = nx.xavier_uniform(rng, dim, dim)
        self.w_k = nx.xavier_uniform(rng, dim, dim)
        self.w_v = nx.xavier_uniform(rng, dim, dim)
        self.w_out = nx.xavier_uniform(rng, dim, 1)
        self.b_out = nx.zeros(1)

    def gains(self, p: PatchedTensor) -> Tensor:
        y = nx.as_tensor(p.values)
        length = p.length
        mean = y.sum(axis=(-2, -1)) * (1.0 / length)
        rms = ((y * y).sum(axis=(-2, -1)) * (1.0 / length) + 1e-12).sqrt()
        desc = nx.stack([mean, rms], axis=-1)  # [..., C, 2]
        tokens = desc @ self.w_in + self.channel_embed
        q, k, v = tokens @ self.w_q, tokens @ self.w_k, tokens @ self.w_v
        att = nx.softmax(q @ k.T * (1.0 / np.sqrt(self.dim)), axis=-1)
        ctx = att @ v + tokens
        return nx.sigmoid(ctx @ self.w_out + self.b_out)[..., 0]  # [..., C]

    def forward(self, p: PatchedTensor) -> Tensor:
        g = self.gains(p)
        y = nx.as_tensor(p.values)
        gated = PatchedTensor(y * g.reshape(*g.shape, 1, 1), p.patch_size, p.pad)
        return unpatch(gated)


def cssa(p: PatchedTensor, params: CSSA) -> Tensor:
    return params(p)
