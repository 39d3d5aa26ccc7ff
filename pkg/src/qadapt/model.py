"""The assembled adapter: per-expert query encoders, gated fusion and the text pathway."""
from dataclasses import dataclass
from typing import List

import torch
from torch import nn

from .backbones import FrozenTokens, TextEncoder, VisionBackbone
from .errors import ConfigError
from .moe import GateNetwork, fuse, reduce_gate_input
from .objective import LossValue, multilabel_bce, report_auxiliary_loss, similarity_logits
from .query_encoder import MixConfig, QEncoder, mix
from .text import TextPathway

GATE_SOURCES = ("pooled", "aggregated")


@dataclass
class FrozenParts:
    """Held by the adapter but deliberately outside its module tree."""

    backbones: List[VisionBackbone]
    text_encoder: TextEncoder


@dataclass
class AdapterOutput:
    embedding: torch.Tensor  # (B, f_fuse)
    gate_weights: torch.Tensor  # (B, K)
    class_tokens: torch.Tensor  # (B, K, f_fuse)


class AdapterModel(nn.Module):
    """Every parameter reachable from ``self.parameters()`` is trainable."""

    def __init__(self, backbones, text_encoder, num_queries=16, alpha=0.7, fusion_dim=64, heads=4,
                 inner_dim_ratio=0.25, frozen_reduction="cls", query_reduction="mean", gate_source="pooled",
                 logit_scale=1.0, seed=0):
        super().__init__()
        if gate_source not in GATE_SOURCES:
            raise ConfigError(f"gate_source must be one of {GATE_SOURCES}")
        self.frozen = FrozenParts(list(backbones), text_encoder)
        self.mix_config = MixConfig(alpha)
        self.gate_source = gate_source
        self.logit_scale = logit_scale
        gen = torch.Generator().manual_seed(seed)
        qencoders, projections = [], []
        for b in self.frozen.backbones:
            f = b.spec.embed_dim
            inner = max(heads, int(round(f * inner_dim_ratio / heads)) * heads)
            qencoders.append(QEncoder(b.spec, num_queries, heads, inner, frozen_reduction, query_reduction, gen))
            projections.append(_seeded_linear(f, fusion_dim, gen))
        self.qencoders = nn.ModuleList(qencoders)
        self.projections = nn.ModuleList(projections)
        self.gate = GateNetwork(len(qencoders), fusion_dim)
        self.text = TextPathway(text_encoder.spec.embed_dim, fusion_dim)
        with torch.no_grad():
            self.text.projection.weight.copy_(_seeded_linear(text_encoder.spec.embed_dim, fusion_dim, gen).weight)
            self.text.projection.bias.zero_()

    @property
    def backbones(self):
        return self.frozen.backbones

    @property
    def text_encoder(self):
        return self.frozen.text_encoder

    def frozen_modules(self):
        return [*self.frozen.backbones, self.frozen.text_encoder]

    def to_dtype(self, dtype):
        for m in [self, *self.frozen_modules()]:
            m.to(dtype)
        self.text.clear_cache()
        return self

    def forward(self, prefix_tokens) -> AdapterOutput:
        """``prefix_tokens[k]`` is (B, N, M_k, f_k) at expert k's split layer."""
        class_tokens, gate_parts = [], []
        for backbone, qenc, proj, tokens in zip(self.backbones, self.qencoders, self.projections, prefix_tokens):
            m_bar, q_bar, queries = qenc(backbone, FrozenTokens(tokens, backbone.spec.split))
            class_tokens.append(mix(proj(m_bar), proj(q_bar), self.mix_config))
            gate_parts.append(queries if self.gate_source == "pooled" else q_bar[:, None, None, :])
        gate_input = reduce_gate_input(gate_parts, self.projections)
        weights = self.gate(gate_input)
        tokens = torch.stack(class_tokens, dim=1)
        return AdapterOutput(fuse(weights, tokens), weights, tokens)

    def label_features(self, class_names):
        return self.text.encode_labels(class_names, self.text_encoder)

    def logits(self, prefix_tokens, class_names):
        out = self(prefix_tokens)
        return similarity_logits(out.embedding, self.label_features(class_names), self.logit_scale)

    def loss(self, prefix_tokens, targets, class_names, reports=None, lambda_report=1.0) -> LossValue:
        out = self(prefix_tokens)
        z = self.label_features(class_names)
        targets = torch.as_tensor(targets, dtype=z.dtype)
        image_loss = multilabel_bce(similarity_logits(out.embedding, z, self.logit_scale), targets)
        report_loss = torch.zeros((), dtype=z.dtype)
        if reports is not None and lambda_report > 0:
            emb, mask = self.text.encode_reports(reports, self.text_encoder)
            report_loss = report_auxiliary_loss(emb, z, targets, mask, self.logit_scale)
        return LossValue(image_loss, report_loss, lambda_report)


def _seeded_linear(fan_in, fan_out, generator):
    layer = nn.Linear(fan_in, fan_out)
    bound = 1.0 / fan_in ** 0.5
    with torch.no_grad():
        layer.weight.copy_((torch.rand(fan_out, fan_in, generator=generator) * 2 - 1) * bound)
        layer.bias.zero_()
    return layer
