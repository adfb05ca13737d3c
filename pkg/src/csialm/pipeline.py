"""The aligned teacher predictor and its ablated variants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import align
from . import numerics as nx
from .backbone import Backbone, BackboneConfig, OutputHead, load_pretrained
from .errors import ConfigError
from .numerics import Linear, Module, Tensor
from .preprocess import CSSA, Normalizer, patch


@dataclass(frozen=True)
class AlignConfig:
    patch_size: int = 4
    cssa_dim: int = 8
    dict_size: int = 32
    anchors: int = 16
    prompts: int = 4
    use_cssa: bool = True
    use_cross_modal: bool = True
    use_prompts: bool = True
    use_alignment: bool = True

    def __post_init__(self):
        if self.use_prompts and self.prompts > self.anchors:
            raise ConfigError(f"prompts={self.prompts} exceeds anchors={self.anchors}")

    @property
    def n_prompts(self) -> int:
        return self.prompts if (self.use_alignment and self.use_prompts) else 0


@dataclass
class ForwardInfo:
    y_text: Tensor | None = None
    prompts: Tensor | None = None
    prompt_index: np.ndarray | None = None
    scores: np.ndarray | None = None
    traces: list = dataclasses.field(default_factory=list)


class CSIALM(Module):
    """Normalize -> patch + channel gating -> embed -> align -> prompt prefix -> backbone -> readout.

    With ``use_alignment=False`` this degenerates to embed -> backbone -> readout.
    ``dictionary`` is the backbone's token table; it is taken from
    ``pretrained`` when given.
    """

    def __init__(self, n_subcarriers: int, backbone_cfg: BackboneConfig | None = None,
                 align_cfg: AlignConfig | None = None, pretrained: dict | None = None, seed: int = 0):
        super().__init__()
        bcfg = backbone_cfg or BackboneConfig()
        acfg = align_cfg or AlignConfig()
        rng = np.random.default_rng([seed, 1])
        self.backbone_cfg = bcfg
        self.align_cfg = acfg
        n_feat = 2 * n_subcarriers
        d = bcfg.hidden
        self.n_features = n_feat
        self.normalizer = Normalizer()
        aligned = acfg.use_alignment
        self.cssa = CSSA(n_feat, rng, acfg.cssa_dim) if (aligned and acfg.use_cssa) else None
        self.embed = Linear(n_feat, d, rng)
        self.temporal = align.TemporalMHSA(d, bcfg.heads, rng) if aligned else None
        self.cross = align.CrossModalAttention(d, rng) if (aligned and acfg.use_cross_modal) else None
        self.gate = align.GatedFusion(d, rng) if self.cross is not None else None
        self.backbone = Backbone(bcfg, rng, with_lora=True)
        if pretrained is not None:
            load_pretrained(self.backbone, pretrained)
        if bcfg.frozen_base:
            self.backbone.freeze_base()
        needs_dict = aligned and (acfg.use_cross_modal or acfg.use_prompts)
        self.vocab = (
            align.VocabDictionary(self.backbone.dictionary, acfg.dict_size, acfg.anchors, rng)
            if needs_dict else None
        )
        self.head = OutputHead(d, n_feat, rng)

    @property
    def n_prefix(self) -> int:
        return self.align_cfg.n_prompts

    def align_tokens(self, xn: Tensor) -> tuple[Tensor, ForwardInfo]:
        acfg = self.align_cfg
        y_bar = self.cssa(patch(xn, acfg.patch_size)) if self.cssa is not None else xn
        y_hat = align.embed_csi(y_bar, self.embed)
        info = ForwardInfo()
        if not acfg.use_alignment:
            return y_hat, info
        y_time = self.temporal(y_hat)
        if self.cross is not None:
            y_cross, _ = align.cross_modal_attend(y_time, self.vocab.d_hat, self.cross)
            y_text = align.gated_fuse(y_cross, y_time, self.gate)
        else:
            y_text = y_time
        info.y_text = y_text
        if not acfg.use_prompts:
            return y_text, info
        prompts, scores, idx = align.retrieve_prompts(y_text, self.vocab.anchors(), acfg.prompts)
        info.prompts, info.scores, info.prompt_index = prompts, scores, idx
        return align.prefix_prompts(prompts, y_text), info

    def forward(self, x, trace: bool = False, stats=None):
        """``x`` is real [B, 2F, T]; returns (denormalized prediction [B, 2F], ForwardInfo)."""
        xn, (mu, sigma) = self.normalizer(nx.as_tensor(x), stats)
        z, info = self.align_tokens(xn)
        hidden, info.traces = self.backbone(z, trace=trace)
        return self.head(hidden, self.n_prefix) * sigma + mu, info

    def embeddings(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Time-pooled aligned CSI embeddings [B, D] and the anchor table [m, D]."""
        with nx.no_grad():
            xn, _ = self.normalizer(nx.as_tensor(x), self.normalizer.running_stats())
            z, info = self.align_tokens(xn)
            seq = info.y_text if info.y_text is not None else z
            anchors = self.vocab.anchors().data if self.vocab is not None else np.zeros((0, z.shape[-1]))
        return seq.data.mean(axis=-2), anchors
