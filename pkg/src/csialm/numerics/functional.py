"""Fused differentiable ops with hand-written vector-Jacobian products."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, _op, _unbroadcast, as_tensor

STOCHASTIC_TOL = 1e-6


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _op(out, (x,), backward)


def layer_norm(x, gain=None, bias=None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 2:
        raise DimensionError(f"layer_norm needs extent >= 2 along axis {axis}, got {x.shape}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        parents.append(gain)
        out = out * gain.data
    if bias is not None:
        bias = as_tensor(bias)
        parents.append(bias)
        out = out + bias.data

    def backward(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _op(out, parents, backward)


def check_stochastic(p: np.ndarray, what: str, axis: int = -1, tol: float = STOCHASTIC_TOL) -> None:
    if (p < -tol).any() or not np.allclose(p.sum(axis=axis), 1.0, rtol=0, atol=tol):
        raise ContractError(f"{what}: rows are not stochastic within {tol}")


def kl_div(p, q, axis: int = -1, reduction: str = "mean") -> Tensor:
    """KL(p || q) for row-stochastic inputs, with 0 log 0 = 0.

    ``reduction`` is ``"mean"`` over rows, ``"sum"`` over rows, or ``"none"``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    tol = max(STOCHASTIC_TOL, 10 * np.finfo(p.dtype).eps * p.shape[axis])
    check_stochastic(p.data, "kl_div p", axis, tol)
    check_stochastic(q.data, "kl_div q", axis, tol)
    tiny = np.finfo(q.dtype).tiny
    pd = p.data
    qd = np.maximum(q.data, tiny)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    rows = np.where(pos, pd * (logp - np.log(qd)), 0.0).sum(axis=axis)
    n_rows = rows.size
    if reduction == "mean":
        out, scale = rows.mean(), 1.0 / n_rows
    elif reduction == "sum":
        out, scale = rows.sum(), 1.0
    elif reduction == "none":
        out, scale = rows, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        g = np.expand_dims(g, axis) if scale is None else g * scale
        gp = np.where(pos, logp - np.log(qd) + 1.0, 0.0) * g
        gq = -pd / qd * g
        return gp, gq

    return _op(np.asarray(out, dtype=pd.dtype), (p, q), backward)


def kl_div_logits(p, q_logits, axis: int = -1) -> Tensor:
    """Row-mean KL(p || softmax(q_logits)); stable when q has tiny entries."""
    p = as_tensor(p)
    check_stochastic(p.data, "kl_div_logits p", axis)
    logq = log_softmax(q_logits, axis=axis)
    pd = p.data
    pos = pd > 0
    ent = np.where(pos, pd * np.log(np.where(pos, pd, 1.0)), 0.0).sum(axis=axis).mean()
    n_rows = pd.size // pd.shape[axis]
    cross = (logq * Tensor._wrap(pd)).sum() * (1.0 / n_rows)
    return cross * -1.0 + float(ent)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; ``logits`` is [..., V], ``targets`` integer [...]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    n = targets.size

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (grad * (g / n),)

    return _op(np.asarray(-picked.mean(), dtype=logits.dtype), (logits,), backward)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along ``axis``; zero-norm operands score 0."""
    a, b = as_tensor(a), as_tensor(b)
    dot = (a * b).sum(axis=axis)
    na = ((a * a).sum(axis=axis) + eps * eps).sqrt()
    nb = ((b * b).sum(axis=axis) + eps * eps).sqrt()
    return dot / (na * nb)
