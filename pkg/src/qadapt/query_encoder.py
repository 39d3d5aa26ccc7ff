"""Learnable query injection after the frozen prefix, cross-view aggregation and mixing."""
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbones import FrozenTokens, VisionBackbone
from .errors import ConfigError, PreconditionError, ShapeError

FROZEN, QUERY = "frozen", "query"
FROZEN_REDUCTIONS = ("cls", "max")
QUERY_REDUCTIONS = ("mean", "max")


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


class QueryBank(nn.Module):
    """Q trainable query vectors shared by every view of one expert."""

    def __init__(self, expert_id, num_queries, dim, generator=None, std=0.02):
        super().__init__()
        if num_queries < 1:
            raise PreconditionError("num_queries must be >= 1")
        self.expert_id = expert_id
        self.queries = nn.Parameter(torch.randn(num_queries, dim, generator=generator) * std)

    @property
    def num_queries(self):
        return self.queries.shape[0]


class CrossViewAttention(nn.Module):
    """Pre-norm self-attention over the N view vectors of one expert and path.

    ``inner_dim`` sets the width of the query/key/value space. The output
    projection starts at zero, so the block is the identity at initialization.
    """

    def __init__(self, dim, num_heads=4, inner_dim=None, generator=None):
        super().__init__()
        inner_dim = inner_dim or dim
        if inner_dim % num_heads:
            raise ConfigError(f"attention inner width {inner_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * inner_dim)
        self.out = nn.Linear(inner_dim, dim)
        with torch.no_grad():
            self.qkv.weight.copy_(torch.randn(self.qkv.weight.shape, generator=generator) / math.sqrt(dim))
            self.qkv.bias.zero_()
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, x):
        # x: (B, N, f)
        b, n, _ = x.shape
        h = self.num_heads
        inner = self.out.in_features
        q, k, v = self.qkv(self.norm(x)).reshape(b, n, 3, h, inner // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(inner // h)).softmax(dim=-1)
        return x + self.out((attn @ v).transpose(1, 2).reshape(b, n, inner))


def inject_and_encode(backbone: VisionBackbone, prefix: FrozenTokens, bank: QueryBank):
    """Run the frozen suffix over [frozen tokens; queries] for every view.

    ``prefix.tokens`` is (..., N, M, f); the same bank is replicated to each
    view. Returns the final frozen-path tokens and the final query tokens.
    """
    if bank.expert_id != backbone.spec.expert_id:
        raise PreconditionError(f"query bank for {bank.expert_id!r} used with expert {backbone.spec.expert_id!r}")
    frozen, queries = backbone.run_suffix(prefix, bank.queries)
    return frozen.tokens, queries


def view_representation(tokens, path, reduction=None):
    """One vector per view: class token (frozen path) or mean query (query path)."""
    if path == FROZEN:
        reduction = reduction or "cls"
        if reduction == "cls":
            return tokens[..., 0, :]
        if reduction == "max":
            return tokens.amax(dim=-2)
        raise ConfigError(f"unknown frozen reduction {reduction!r}")
    if path == QUERY:
        reduction = reduction or "mean"
        if reduction == "mean":
            return tokens.mean(dim=-2)
        if reduction == "max":
            return tokens.amax(dim=-2)
        raise ConfigError(f"unknown query reduction {reduction!r}")
    raise ConfigError(f"path must be {FROZEN!r} or {QUERY!r}, got {path!r}")


def aggregate_views(view_vectors, attention: Optional[CrossViewAttention]):
    """Cross-view self-attention, then elementwise max over the N views."""
    x = torch.as_tensor(view_vectors)
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-2] < 1:
        raise PreconditionError("need at least one view")
    if attention is not None:
        x = attention(x)
    out = x.amax(dim=-2)
    return out[0] if squeeze else out


def mix(frozen_candidate, query_candidate, config):
    alpha = config.alpha if isinstance(config, MixConfig) else MixConfig(float(config)).alpha
    if frozen_candidate.shape != query_candidate.shape:
        raise ShapeError(f"cannot mix shapes {tuple(frozen_candidate.shape)} and {tuple(query_candidate.shape)}")
    return alpha * frozen_candidate + (1.0 - alpha) * query_candidate


class QEncoder(nn.Module):
    """Trainable state for one expert: its query bank and two cross-view blocks.

    The frozen backbone is passed to ``forward`` rather than stored, which
    keeps it out of this module's parameters.
    """

    def __init__(self, spec, num_queries=16, heads=4, inner_dim=None, frozen_reduction="cls",
                 query_reduction="mean", generator=None):
        super().__init__()
        if frozen_reduction not in FROZEN_REDUCTIONS:
            raise ConfigError(f"frozen reduction must be one of {FROZEN_REDUCTIONS}")
        if query_reduction not in QUERY_REDUCTIONS:
            raise ConfigError(f"query reduction must be one of {QUERY_REDUCTIONS}")
        f = spec.embed_dim
        self.expert_id = spec.expert_id
        self.bank = QueryBank(spec.expert_id, num_queries, f, generator=generator)
        self.frozen_attn = CrossViewAttention(f, heads, inner_dim, generator=generator)
        self.query_attn = CrossViewAttention(f, heads, inner_dim, generator=generator)
        self.frozen_reduction = frozen_reduction
        self.query_reduction = query_reduction

    def forward(self, backbone: VisionBackbone, prefix: FrozenTokens):
        """Returns ``(frozen candidate, query candidate, final query tokens)``.

        Candidates are (B, f); query tokens are (B, N, Q, f) after the
        backbone's output norm.
        """
        frozen, queries = inject_and_encode(backbone, prefix, self.bank)
        frozen = backbone.final_norm(frozen)
        queries = backbone.final_norm(queries)
        m = view_representation(frozen, FROZEN, self.frozen_reduction)
        q = view_representation(queries, QUERY, self.query_reduction)
        return aggregate_views(m, self.frozen_attn), aggregate_views(q, self.query_attn), queries
