"""Decoder-only transformer backbone, LoRA adapters, surrogate pretraining and the student network."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, LengthError
from .numerics import Linear, LayerNorm, Module, Parameter, Tensor
from .preprocess import Normalizer, to_real

NEG_INF = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 8
    ffn_mult: int = 4
    max_positions: int = 64
    vocab: int = 512
    causal: bool = True
    lora: bool = True
    lora_rank: int = 4
    lora_alpha: float = 8.0
    frozen_base: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.lora and self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1 when LoRA is enabled")


@dataclass(frozen=True)
class StudentConfig:
    layers: int = 3
    hidden: int = 128
    heads: int = 8
    prompt_len: int = 4
    ffn_mult: int = 4
    max_positions: int = 64

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")

    def transformer_config(self) -> BackboneConfig:
        return BackboneConfig(
            layers=self.layers, hidden=self.hidden, heads=self.heads, ffn_mult=self.ffn_mult,
            max_positions=self.max_positions, vocab=0, lora=False, frozen_base=False,
        )


@dataclass
class LayerTrace:
    """Q, K, V of one attention layer, concatenated over heads: each [..., n, D]."""

    q: Tensor
    k: Tensor
    v: Tensor

    def window(self, size: int) -> "LayerTrace":
        return LayerTrace(self.q[..., -size:, :], self.k[..., -size:, :], self.v[..., -size:, :])


def lora_apply(base_weight, lora_a, lora_b, alpha: float, r: int) -> Tensor:
    """Merged weight ``W + (alpha / r) * A @ B`` for weights stored as [in x out].

    ``lora_a`` is [in x r] and ``lora_b`` is [r x out] (zero-initialized), i.e. the
    transpose of the usual ``B @ A`` written for [out x in] weights.
    """
    if r > min(nx.as_tensor(base_weight).shape):
        raise ConfigError(f"LoRA rank {r} exceeds weight dims {nx.as_tensor(base_weight).shape}")
    return nx.as_tensor(base_weight) + (nx.as_tensor(lora_a) @ nx.as_tensor(lora_b)) * (alpha / r)


class LoRALinear(Linear):
    def __init__(self, n_in: int, n_out: int, rng, rank: int = 0, alpha: float = 1.0):
        super().__init__(n_in, n_out, rng)
        self.rank = rank
        self.scale = alpha / rank if rank else 0.0
        self.alpha = alpha
        if rank:
            self.lora_a = nx.normal(rng, (n_in, rank), std=1.0 / np.sqrt(n_in))
            self.lora_b = nx.zeros((rank, n_out))

    def forward(self, x):
        y = x @ self.weight + self.bias
        if self.rank:
            y = y + (x @ self.lora_a) @ self.lora_b * self.scale
        return y

    def effective_weight(self) -> Tensor:
        if not self.rank:
            return self.weight
        return lora_apply(self.weight, self.lora_a, self.lora_b, self.alpha, self.rank)


def attention_weights(q: Tensor, k: Tensor, heads: int, causal: bool = False) -> Tensor:
    """Per-head softmax(q k^T / sqrt(d_head)) from concatenated [..., n, D] projections."""
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    d_head = q.shape[-1] // heads
    scores = qh @ kh.swapaxes(-1, -2) * (1.0 / np.sqrt(d_head))
    if causal:
        n = q.shape[-2]
        scores = scores + Tensor._wrap(np.triu(np.full((n, n), NEG_INF, dtype=q.dtype), 1))
    return nx.softmax(scores, axis=-1)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, lora_rank: int = 0, lora_alpha: float = 1.0):
        super().__init__()
        self.heads = heads
        self.q_proj = LoRALinear(dim, dim, rng, lora_rank, lora_alpha)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = LoRALinear(dim, dim, rng, lora_rank, lora_alpha)
        self.o_proj = Linear(dim, dim, rng)

    def forward(self, x, causal: bool = False, traces: list | None = None, weights: list | None = None):
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        if traces is not None:
            traces.append(LayerTrace(q, k, v))
        att = attention_weights(q, k, self.heads, causal)
        if weights is not None:
            weights.append(att)
        return self.o_proj(merge_heads(att @ split_heads(v, self.heads)))


class Block(Module):
    def __init__(self, cfg: BackboneConfig, rng, lora_rank: int = 0):
        super().__init__()
        d = cfg.hidden
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng, lora_rank, cfg.lora_alpha)
        self.ln2 = LayerNorm(d)
        self.fc = Linear(d, cfg.ffn_mult * d, rng)
        self.proj = Linear(cfg.ffn_mult * d, d, rng)

    def forward(self, x, causal=True, traces=None, weights=None):
        x = x + self.attn(self.ln1(x), causal, traces, weights)
        return x + self.proj(nx.gelu(self.fc(self.ln2(x))))


class Backbone(Module):
    """Pre-norm decoder stack with learned positions.

    ``forward`` returns the raw residual stream; the final layer norm only feeds
    the tied language-model head used for surrogate pretraining.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, with_lora: bool = False):
        super().__init__()
        self.cfg = cfg
        self.wte = nx.normal(rng, (cfg.vocab, cfg.hidden)) if cfg.vocab else None
        self.wpe = nx.normal(rng, (cfg.max_positions, cfg.hidden))
        rank = cfg.lora_rank if (with_lora and cfg.lora) else 0
        self.blocks = [Block(cfg, rng, rank) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.hidden) if cfg.vocab else None

    def forward(self, z, trace: bool = False, weights: list | None = None):
        z = nx.as_tensor(z)
        n = z.shape[-2]
        if n > self.cfg.max_positions:
            raise LengthError(f"sequence length {n} exceeds max positions {self.cfg.max_positions}")
        traces = [] if trace else None
        h = z + self.wpe[:n]
        for block in self.blocks:
            h = block(h, self.cfg.causal, traces, weights)
        return h, (traces or [])

    def lm_logits(self, tokens: np.ndarray) -> Tensor:
        h, _ = self.forward(self.wte[tokens])
        return self.ln_f(h) @ self.wte.T

    def lora_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if ".lora_" in name]

    def freeze_base(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad = ".lora_" in name

    @property
    def dictionary(self) -> np.ndarray:
        return self.wte.data


@dataclass(frozen=True)
class CorpusConfig:
    zipf_s: float = 1.1
    bigram_prob: float = 0.6
    skip_prob: float = 0.0
    seq_len: int = 32
    batch: int = 16
    lr: float = 1e-3


def surrogate_corpus(vocab: int, cfg: CorpusConfig, rng: np.random.Generator):
    """Infinite stream of [batch x seq_len] token arrays: Zipf unigrams with planted successor bigrams.

    With ``skip_prob > 0`` a second successor table is planted at lag 2, so that
    predicting the next token needs attention to the previous position.
    """
    if cfg.bigram_prob + cfg.skip_prob > 1:
        raise ConfigError("bigram_prob + skip_prob must not exceed 1")
    probs = 1.0 / np.arange(1, vocab + 1) ** cfg.zipf_s
    probs /= probs.sum()
    successor = rng.permutation(vocab)
    skip_successor = rng.permutation(vocab)
    while True:
        draws = rng.choice(vocab, size=(cfg.batch, cfg.seq_len), p=probs)
        u = rng.random((cfg.batch, cfg.seq_len))
        tokens = draws.copy()
        for i in range(1, cfg.seq_len):
            nxt = np.where(u[:, i] < cfg.bigram_prob, successor[tokens[:, i - 1]], draws[:, i])
            if i >= 2 and cfg.skip_prob:
                skip = (u[:, i] >= cfg.bigram_prob) & (u[:, i] < cfg.bigram_prob + cfg.skip_prob)
                nxt = np.where(skip, skip_successor[tokens[:, i - 2]], nxt)
            tokens[:, i] = nxt
        yield tokens


@dataclass
class PretrainResult:
    weights: dict
    dictionary: np.ndarray
    losses: list = field(default_factory=list)


def surrogate_pretrain(cfg: BackboneConfig, corpus: CorpusConfig | None = None, steps: int = 500,
                       seed: int = 0) -> PretrainResult:
    """Next-token training on a synthetic corpus; returns weights and the learned token table."""
    if cfg.vocab < 64:
        raise ConfigError(f"surrogate vocabulary must be >= 64, got {cfg.vocab}")
    corpus = corpus or CorpusConfig()
    rng = np.random.default_rng([seed, 7])
    model = Backbone(dataclasses.replace(cfg, lora=False), rng)
    opt = nx.Adam(model.parameters(), lr=corpus.lr)
    stream = surrogate_corpus(cfg.vocab, corpus, rng)
    losses = []
    for _ in range(steps):
        tokens = next(stream)
        opt.zero_grad()
        loss = nx.cross_entropy(model.lm_logits(tokens[:, :-1]), tokens[:, 1:])
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return PretrainResult(model.state_dict(), model.dictionary.copy(), losses)


def load_pretrained(backbone: Backbone, weights: dict) -> None:
    """Copy pretrained base weights into ``backbone``; LoRA adapters keep their init."""
    own = dict(backbone.named_parameters())
    for name, p in own.items():
        if ".lora_" in name:
            continue
        if name not in weights:
            raise KeyError(f"pretrained weights missing {name}")
        p.data = np.asarray(weights[name], dtype=p.dtype).copy()


class OutputHead(Module):
    def __init__(self, hidden: int, n_out: int, rng):
        super().__init__()
        self.linear = Linear(hidden, n_out, rng)

    def forward(self, hidden, n_prompts: int = 0) -> Tensor:
        hidden = nx.as_tensor(hidden)
        if hidden.shape[-2] <= n_prompts:
            raise ContractError(f"sequence of {hidden.shape[-2]} tokens holds only prompts ({n_prompts})")
        return self.linear(hidden[..., -1, :])


def project_out(hidden, head: OutputHead, n_prompts: int = 0) -> Tensor:
    return head(hidden, n_prompts)


class StudentModel(Module):
    """Lightweight predictor: per-step embedding, soft prompts, causal transformer, last-token readout."""

    def __init__(self, n_subcarriers: int, cfg: StudentConfig | None = None, rng=None, seed: int = 0):
        super().__init__()
        cfg = cfg or StudentConfig()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.n_features = 2 * n_subcarriers
        self.normalizer = Normalizer()
        self.embed = Linear(self.n_features, cfg.hidden, rng)
        self.soft_prompts = nx.normal(rng, (cfg.prompt_len, cfg.hidden)) if cfg.prompt_len else None
        self.transformer = Backbone(cfg.transformer_config(), rng)
        self.head = OutputHead(cfg.hidden, self.n_features, rng)

    @property
    def n_prefix(self) -> int:
        return self.cfg.prompt_len

    def forward(self, x, trace: bool = False, stats=None):
        """``x`` is real [B, 2F, T]; returns (denormalized prediction [B, 2F], traces)."""
        xn, (mu, sigma) = self.normalizer(nx.as_tensor(x), stats)
        y = self.embed(xn.swapaxes(-1, -2))
        if self.soft_prompts is not None:
            batch = y.shape[0]
            prompts = self.soft_prompts.reshape(1, *self.soft_prompts.shape) + Tensor._wrap(
                np.zeros((batch, 1, 1), dtype=y.dtype)
            )
            y = nx.concat([prompts, y], axis=1)
        hidden, traces = self.transformer(y, trace=trace)
        out = self.head(hidden, self.n_prefix)
        return out * sigma + mu, traces


def student_forward(h_hist: np.ndarray, model: StudentModel, trace: bool = False):
    """Predict the next CSI vector [2F] from a complex [F x T] history (or a batch of them)."""
    x = to_real(h_hist)
    single = x.ndim == 2
    if single:
        x = x[None]
    pred, traces = model(nx.as_tensor(x.astype(nx.get_default_dtype())), trace)
    return (pred[0] if single else pred), traces


__all__ = [
    "Backbone", "BackboneConfig", "Block", "CorpusConfig", "LayerTrace", "LoRALinear",
    "MultiHeadAttention", "OutputHead", "PretrainResult", "StudentConfig", "StudentModel",
    "attention_weights", "load_pretrained", "lora_apply", "merge_heads", "project_out",
    "split_heads", "student_forward", "surrogate_corpus", "surrogate_pretrain",
]
