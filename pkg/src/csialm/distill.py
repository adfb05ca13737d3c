"""Relation-based knowledge transfer between attention layers of different widths.

Q, K and V of a layer (concatenated over native heads) are re-split into a
common number of relation heads, so teacher and student relation matrices have
the same shape even when their hidden sizes and head counts differ.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import LayerTrace, split_heads
from .errors import ContractError, ParameterError
from .numerics import Tensor

ROLES = ("q", "k", "v")


def _diag_alpha():
    return ((1, 0, 0), (0, 1, 0), (0, 0, 1))


@dataclass(frozen=True)
class RelationConfig:
    heads: int = 8
    alpha: tuple = field(default_factory=_diag_alpha)
    window: int | None = None  # trailing positions; None = shortest common length

    def __post_init__(self):
        if self.heads < 1:
            raise ParameterError(f"relation heads must be >= 1, got {self.heads}")
        a = np.asarray(self.alpha)
        if a.shape != (3, 3) or not np.all((a == 0) | (a == 1)):
            raise ParameterError(f"alpha must be a 3x3 matrix of 0/1 entries, got {self.alpha!r}")

    def pairs(self) -> list[tuple[str, str]]:
        return [(ROLES[i], ROLES[j]) for i in range(3) for j in range(3) if self.alpha[i][j]]


def _check_divisible(dim: int, heads: int) -> None:
    if dim % heads:
        raise ParameterError(f"D={dim} is not divisible by A_r={heads}")


def resplit(a, heads: int) -> list[Tensor]:
    """Contiguous column blocks of [..., n, D] -> ``heads`` x [..., n, D/heads]."""
    a = nx.as_tensor(a)
    _check_divisible(a.shape[-1], heads)
    return nx.split(a, heads, axis=-1)


def relation_logits(a_x, a_y, heads: int) -> Tensor:
    """Scaled per-head dot products [..., heads, n, n]."""
    a_x, a_y = nx.as_tensor(a_x), nx.as_tensor(a_y)
    dim = a_x.shape[-1]
    _check_divisible(dim, heads)
    hx, hy = split_heads(a_x, heads), split_heads(a_y, heads)
    return hx @ hy.swapaxes(-1, -2) * (1.0 / np.sqrt(dim // heads))


def relations(a_x, a_y, heads: int) -> Tensor:
    """Row-stochastic relation matrices [..., heads, n, n]; no mask."""
    return nx.softmax(relation_logits(a_x, a_y, heads), axis=-1)


def attention_relations(trace: LayerTrace, cfg: RelationConfig) -> dict:
    """All nine relation tensors of a layer, keyed by role pair, e.g. ``("q", "k")``."""
    return {(x, y): relations(getattr(trace, x), getattr(trace, y), cfg.heads) for x in ROLES for y in ROLES}


def _windows(teacher: LayerTrace, student: LayerTrace, window: int | None):
    nt, ns = teacher.q.shape[-2], student.q.shape[-2]
    if window is None:
        window = min(nt, ns)
    if window > nt or window > ns:
        raise ContractError(f"window of {window} positions exceeds trace lengths {nt} (teacher) / {ns} (student)")
    t, s = teacher.window(window), student.window(window)
    if t.q.shape[-2] != s.q.shape[-2]:
        raise ContractError(f"relation windows differ: {t.q.shape[-2]} vs {s.q.shape[-2]}")
    return t, s


def kd_loss(teacher: LayerTrace, student: LayerTrace, cfg: RelationConfig | None = None) -> Tensor:
    """Sum over enabled (x, y) pairs of the head- and row-averaged KL(teacher || student).

    The teacher side is treated as a constant.
    """
    cfg = cfg or RelationConfig()
    teacher, student = _windows(teacher, student, cfg.window)
    total = None
    for x, y in cfg.pairs():
        with nx.no_grad():
            r_t = relations(getattr(teacher, x).data, getattr(teacher, y).data, cfg.heads).data
        logits_s = relation_logits(getattr(student, x), getattr(student, y), cfg.heads)
        term = nx.kl_div_logits(r_t, logits_s, axis=-1)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def self_distill(teacher, student, inputs, steps: int = 2000, lr: float = 1e-3, cfg: RelationConfig | None = None,
                 tol: float | None = None) -> list[float]:
    """Fit ``student`` to the last-layer relations of a frozen ``teacher`` on fixed ``inputs``.

    Both models are called as ``model(inputs, trace=True)`` and must return
    ``(output, traces)``. Returns the per-step loss history; stops early once the
    loss drops below ``tol``.
    """
    cfg = cfg or RelationConfig()
    teacher.eval()
    with nx.no_grad():
        _, t_traces = teacher(inputs, trace=True)
    target = t_traces[-1]
    opt = nx.Adam(student.trainable_parameters(), lr=lr)
    history = []
    for _ in range(steps):
        opt.zero_grad()
        _, s_traces = student(inputs, trace=True)
        loss = kd_loss(target, s_traces[-1], cfg)
        history.append(float(loss.data))
        if tol is not None and history[-1] < tol:
            break
        loss.backward()
        opt.step()
    return history
