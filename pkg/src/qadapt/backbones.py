"""Frozen ViT-style vision encoders and a frozen causal text encoder.

Backbones are built from a seed (synthetic weights) or loaded from a weight
archive. All their parameters have ``requires_grad=False`` and the adapter
model keeps them outside its own module tree, so they never reach an
optimizer.
"""
import hashlib
import json
import math
import os
import re
import zlib
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, PreconditionError, ShapeError, StateError, TokenizationError

PAD_ID = 0
SOT_ID = 1
HEADER_KEY = "__header__"


@dataclass(frozen=True)
class BackboneSpec:
    expert_id: str
    depth: int
    split: int
    embed_dim: int
    num_heads: int
    patch_size: int
    input_resolution: int = 224
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 2 or not 0 < self.split < self.depth:
            raise ConfigError(f"{self.expert_id}: need 0 < split < depth, got split={self.split}, depth={self.depth}")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"{self.expert_id}: embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.patch_size < 1 or self.input_resolution % self.patch_size:
            raise ConfigError(f"{self.expert_id}: input_resolution must be a multiple of patch_size")

    @property
    def token_count(self):
        return (self.input_resolution // self.patch_size) ** 2 + 1

    @property
    def suffix_depth(self):
        return self.depth - self.split

    def dims(self):
        d = asdict(self)
        d.pop("expert_id")
        d.pop("split")
        return d


@dataclass(frozen=True)
class TextEncoderSpec:
    vocab_size: int = 512
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    max_sequence_length: int = 32
    eot_token_id: int = 511
    mlp_ratio: int = 4

    def __post_init__(self):
        if not 2 <= self.eot_token_id < self.vocab_size:
            raise ConfigError("eot_token_id must lie in [2, vocab_size)")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size too small")
        if self.embed_dim % self.num_heads:
            raise ConfigError("text embed_dim must be divisible by num_heads")
        if self.max_sequence_length < 3:
            raise ConfigError("max_sequence_length must allow at least one word")

    def dims(self):
        return asdict(self)


@dataclass
class FrozenTokens:
    tokens: torch.Tensor  # (..., M, f)
    layer_index: int


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def attention(self, x, mask=None):
        b, n, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if mask is not None:
            scores = scores + mask
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))

    def forward(self, x, mask=None):
        z = x + self.attention(self.norm1(x), mask)
        return z + self.fc2(nn.functional.gelu(self.fc1(self.norm2(z))))


_BLOCK_NAMES = {
    "attn.norm_weight": "norm1.weight",
    "attn.norm_bias": "norm1.bias",
    "attn.qkv_weight": "qkv.weight",
    "attn.qkv_bias": "qkv.bias",
    "attn.out_weight": "proj.weight",
    "attn.out_bias": "proj.bias",
    "ffn.norm_weight": "norm2.weight",
    "ffn.norm_bias": "norm2.bias",
    "ffn.fc1_weight": "fc1.weight",
    "ffn.fc1_bias": "fc1.bias",
    "ffn.fc2_weight": "fc2.weight",
    "ffn.fc2_bias": "fc2.bias",
}


def _seeded_init(module, generator):
    """LeCun-normal linear weights, zero biases, unit LayerNorms."""
    for name, p in sorted(module.named_parameters()):
        with torch.no_grad():
            if p.dim() == 2 and name.endswith("weight"):
                p.copy_(torch.randn(p.shape, generator=generator) / math.sqrt(p.shape[1]))
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator) * 0.02)


# Synthetic vision experts. Plain random weights hide local texture from every
# readout we probed, so seeded experts get a structured early-vision stack
# instead: quadrature Gabor patch filters, first-block FFN units that write
# rectified pair energies, positions kept out of the content channels, damped
# residual branches, and later attention that keys on the energy channels.
GABOR_PERIODS = (3.2, 4.6)
GABOR_FRACTION = 0.5
POSITION_STD = 1.0
RESIDUAL_SCALE = 0.25
ENERGY_KEY_GAIN = 3.0


def _ramp_basis(p):
    yy, xx = torch.meshgrid(torch.arange(p, dtype=torch.float64), torch.arange(p, dtype=torch.float64), indexing="ij")
    return torch.linalg.qr(torch.stack([torch.ones_like(xx), xx, yy]).reshape(3, -1).T).Q.T


def gabor_bank(num_orientations, patch_size, generator, periods=GABOR_PERIODS):
    """(2 * num_orientations * len(periods), p * p) unit filters in (cos, sin) pairs.

    Filters are orthogonal to constant and linear intensity ramps, so smooth
    backgrounds barely excite them.
    """
    p = patch_size
    c = torch.arange(p, dtype=torch.float64) - (p - 1) / 2
    yy, xx = torch.meshgrid(c, c, indexing="ij")
    basis = _ramp_basis(p)
    envelope = torch.exp(-(xx ** 2 + yy ** 2) / (2 * (p / 5.0) ** 2))
    jitter = torch.rand(num_orientations * len(periods), 2, generator=generator, dtype=torch.float64)
    rows = []
    for o in range(num_orientations):
        for j, period in enumerate(periods):
            u, v = jitter[o * len(periods) + j].tolist()
            theta = math.pi * (o + u - 0.5) / num_orientations
            period = period * (0.9 + 0.2 * v)
            arg = 2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period
            for phase in (0.0, math.pi / 2):
                g = (envelope * torch.cos(arg + phase)).reshape(-1)
                g = g - basis.T @ (basis @ g)
                rows.append(g / g.norm())
    return torch.stack(rows)


def _vision_init(backbone, generator):
    _seeded_init(backbone, generator)
    f, p = backbone.spec.embed_dim, backbone.spec.patch_size
    n_or = int(f * GABOR_FRACTION) // (2 * len(GABOR_PERIODS))
    with torch.no_grad():
        backbone.pos_embed.mul_(POSITION_STD / 0.02)
        backbone.cls_token.mul_(POSITION_STD / 0.02)
        for block in backbone.blocks:
            block.proj.weight.mul_(RESIDUAL_SCALE)
            block.fc2.weight.mul_(RESIDUAL_SCALE)
        if n_or == 0:
            return
        bank = gabor_bank(n_or, p, generator)
        ng = bank.shape[0]
        ne = ng // 2
        noise = torch.randn(f, p * p, generator=generator, dtype=torch.float64)
        basis = _ramp_basis(p)
        noise = noise - (noise @ basis.T) @ basis
        w = 0.3 * noise / noise.norm(dim=1, keepdim=True)
        w[:ng] = bank
        w[ng : ng + ne] = 0.0
        # grayscale filters split evenly over RGB; scaled so a unit grating gives O(p) response
        w = (w * p)[:, :, None].expand(f, p * p, 3) / 3.0
        backbone.patch_embed.copy_(w.reshape(f, -1).to(backbone.patch_embed.dtype))
        backbone.pos_embed[:, : ng + ne] = 0.0
        backbone.cls_token[: ng + ne] = 0.0
        first = backbone.blocks[0]
        for j in range(ne):
            for t, (channel, sign) in enumerate([(2 * j, 1), (2 * j, -1), (2 * j + 1, 1), (2 * j + 1, -1)]):
                unit = 4 * j + t
                first.fc1.weight[unit].zero_()
                first.fc1.weight[unit, channel] = 3.0 * sign
                first.fc1.bias[unit] = -1.0
                first.fc2.weight[:, unit].zero_()
                first.fc2.weight[ng + j, unit] = 1.0
        for block in backbone.blocks[1:]:
            block.qkv.weight[f : 3 * f, ng : ng + ne] *= ENERGY_KEY_GAIN


def _freeze(module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def parameter_hash(module):
    """SHA-256 over canonical parameter names and raw bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.canonical_state().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class VisionBackbone(nn.Module):
    prefix = "vision"

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        f, p = spec.embed_dim, spec.patch_size
        self.patch_embed = nn.Parameter(torch.empty(f, 3 * p * p))
        self.cls_token = nn.Parameter(torch.empty(f))
        self.pos_embed = nn.Parameter(torch.empty(spec.token_count, f))
        self.blocks = nn.ModuleList(TransformerBlock(f, spec.num_heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.final_norm = nn.LayerNorm(f)

    @property
    def token_count(self):
        return self.spec.token_count

    def canonical_state(self):
        out = {
            "vision.patch_embed": self.patch_embed,
            "vision.cls_token": self.cls_token,
            "vision.pos_embed": self.pos_embed,
            "vision.final_norm.weight": self.final_norm.weight,
            "vision.final_norm.bias": self.final_norm.bias,
        }
        for i, block in enumerate(self.blocks):
            params = dict(block.named_parameters())
            for canon, local in _BLOCK_NAMES.items():
                out[f"vision.layer{i}.{canon}"] = params[local]
        return out

    def identity_hash(self):
        return parameter_hash(self)

    def embed(self, views):
        """Patch + class token + positions for ``(..., R, R, 3)`` views in [0, 1]."""
        views = torch.as_tensor(views, dtype=self.patch_embed.dtype)
        res, p = self.spec.input_resolution, self.spec.patch_size
        if views.dim() < 3 or tuple(views.shape[-3:]) != (res, res, 3):
            raise ShapeError(f"{self.spec.expert_id}: expected views of shape (..., {res}, {res}, 3), got {tuple(views.shape)}")
        lead = views.shape[:-3]
        x = views.reshape(-1, res, res, 3)
        g = res // p
        x = x.reshape(-1, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(-1, g * g, p * p * 3)
        x = (x - 0.5) / 0.5
        x = x @ self.patch_embed.t()
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        return x.reshape(*lead, *x.shape[1:])

    def _run_blocks(self, x, start, stop):
        lead = x.shape[:-2]
        x = x.reshape(-1, *x.shape[-2:])
        for block in self.blocks[start:stop]:
            x = block(x)
        return x.reshape(*lead, *x.shape[-2:])

    def run_prefix(self, views) -> FrozenTokens:
        """Layers 1..split; accepts a single view or a batch of views."""
        x = self.embed(views)
        return FrozenTokens(self._run_blocks(x, 0, self.spec.split), self.spec.split)

    def run_layers(self, views, n_layers):
        """The unmodified backbone's first ``n_layers`` layers (reference path)."""
        x = self.embed(views)
        for block in self.blocks[:n_layers]:
            x = block(x.reshape(-1, *x.shape[-2:])).reshape(x.shape)
        return x

    def run_suffix(self, frozen: FrozenTokens, queries: torch.Tensor):
        """Layers split+1..depth over the joint sequence [frozen tokens; queries].

        ``frozen.tokens`` has shape (..., M, f) and ``queries`` (Q, f) or
        (..., Q, f). Returns ``(FrozenTokens at layer depth, final queries)``.
        """
        if frozen.layer_index != self.spec.split:
            raise StateError(f"{self.spec.expert_id}: suffix needs tokens at layer {self.spec.split}, got {frozen.layer_index}")
        tokens = frozen.tokens
        m = tokens.shape[-2]
        if m != self.token_count:
            raise ShapeError(f"expected {self.token_count} frozen tokens, got {m}")
        if queries.dim() < 2 or queries.shape[-2] < 1:
            raise PreconditionError("at least one query token is required")
        if queries.dim() == 2:
            queries = queries.expand(*tokens.shape[:-2], *queries.shape)
        joint = torch.cat([tokens, queries.to(tokens.dtype)], dim=-2)
        joint = self._run_blocks(joint, self.spec.split, self.spec.depth)
        return FrozenTokens(joint[..., :m, :], self.spec.depth), joint[..., m:, :]


def init_backbone(spec: BackboneSpec, source: Union[int, str, os.PathLike] = 0) -> VisionBackbone:
    """Build a frozen vision backbone from a seed or a weight archive path."""
    backbone = VisionBackbone(spec)
    if isinstance(source, (int, np.integer)):
        gen = torch.Generator().manual_seed(int(source))
        _vision_init(backbone, gen)
    else:
        _load_into(backbone, source, "vision", spec.dims())
    return _freeze(backbone)


# ---------------------------------------------------------------- text


_WORD = re.compile(r"[^\s,.;:]+")


class Tokenizer:
    """Lowercase whitespace tokenizer; words hash into a fixed small vocabulary.

    Id 0 is padding, 1 start-of-text, ``eot_token_id`` end-of-text. Every other
    id is a word bucket, so unseen class names still tokenize deterministically.
    """

    def __init__(self, spec: TextEncoderSpec):
        self.spec = spec
        self._buckets = [i for i in range(2, spec.vocab_size) if i != spec.eot_token_id]

    def word_id(self, word):
        return self._buckets[zlib.crc32(word.encode("utf-8")) % len(self._buckets)]

    def __call__(self, text, truncate=False):
        words = _WORD.findall(text.lower())
        room = self.spec.max_sequence_length - 2
        if len(words) > room:
            if not truncate:
                raise TokenizationError(f"{len(words)} words exceed the {room}-word limit: {text[:60]!r}")
            words = words[:room]
        return [SOT_ID] + [self.word_id(w) for w in words] + [self.spec.eot_token_id]


class TextEncoder(nn.Module):
    prefix = "text"

    def __init__(self, spec: TextEncoderSpec):
        super().__init__()
        self.spec = spec
        f = spec.embed_dim
        self.token_embed = nn.Parameter(torch.empty(spec.vocab_size, f))
        self.pos_embed = nn.Parameter(torch.empty(spec.max_sequence_length, f))
        self.blocks = nn.ModuleList(TransformerBlock(f, spec.num_heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.final_norm = nn.LayerNorm(f)
        self.tokenizer = Tokenizer(spec)

    def canonical_state(self):
        out = {
            "text.token_embed": self.token_embed,
            "text.pos_embed": self.pos_embed,
            "text.final_norm.weight": self.final_norm.weight,
            "text.final_norm.bias": self.final_norm.bias,
        }
        for i, block in enumerate(self.blocks):
            params = dict(block.named_parameters())
            for canon, local in _BLOCK_NAMES.items():
                out[f"text.layer{i}.{canon}"] = params[local]
        return out

    def identity_hash(self):
        return parameter_hash(self)

    def _check_ids(self, ids):
        ids = [int(i) for i in ids]
        if len(ids) > self.spec.max_sequence_length:
            raise TokenizationError(f"sequence of {len(ids)} ids exceeds max length {self.spec.max_sequence_length}")
        if ids.count(self.spec.eot_token_id) != 1:
            raise TokenizationError("sequence must contain exactly one end-of-text token")
        if min(ids) < 0 or max(ids) >= self.spec.vocab_size:
            raise TokenizationError("token id out of vocabulary range")
        return ids

    @torch.no_grad()
    def encode_batch(self, sequences):
        """Final-layer hidden state at each sequence's end-of-text position."""
        sequences = [self._check_ids(s) for s in sequences]
        if not sequences:
            return torch.zeros(0, self.spec.embed_dim, dtype=self.token_embed.dtype)
        n = max(len(s) for s in sequences)
        ids = torch.full((len(sequences), n), PAD_ID, dtype=torch.long)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = torch.tensor(s)
        eot = torch.tensor([s.index(self.spec.eot_token_id) for s in sequences])
        x = self.token_embed[ids] + self.pos_embed[:n]
        mask = torch.full((n, n), float("-inf"), dtype=x.dtype).triu(1)
        for block in self.blocks:
            x = block(x, mask)
        x = self.final_norm(x)
        return x[torch.arange(len(sequences)), eot]

    def encode(self, token_ids):
        return self.encode_batch([token_ids])[0]


def encode_text(text_encoder: TextEncoder, token_ids):
    return text_encoder.encode(token_ids)


def init_text_encoder(spec: TextEncoderSpec, source: Union[int, str, os.PathLike] = 0) -> TextEncoder:
    encoder = TextEncoder(spec)
    if isinstance(source, (int, np.integer)):
        gen = torch.Generator().manual_seed(int(source))
        _seeded_init(encoder, gen)
    else:
        _load_into(encoder, source, "text", spec.dims())
    return _freeze(encoder)


# ---------------------------------------------------------------- weight archive


def save_weights(path, vision: Optional[VisionBackbone] = None, text: Optional[TextEncoder] = None):
    """Write a weight archive: little-endian float32 arrays plus a dimension header."""
    header, arrays = {}, {}
    for part in (vision, text):
        if part is None:
            continue
        header[part.prefix] = part.spec.dims()
        for name, tensor in part.canonical_state().items():
            arrays[name] = tensor.detach().cpu().numpy().astype("<f4")
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_archive(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError as exc:
        raise DataError(f"weight file not found: {path}") from exc
    except Exception as exc:
        raise DataError(f"malformed weight file {path}: {exc}") from exc
    if HEADER_KEY not in arrays:
        raise DataError(f"weight file {path} has no dimension header")
    try:
        header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode())
    except ValueError as exc:
        raise DataError(f"weight file {path} has an unreadable header") from exc
    return header, arrays


def _load_into(module, path, part, dims):
    header, arrays = read_archive(path)
    if part not in header:
        raise ConfigError(f"weight file {path} holds no {part} weights")
    declared = header[part]
    mismatched = {k: (declared.get(k), v) for k, v in dims.items() if declared.get(k) != v}
    if mismatched:
        raise ConfigError(f"weight file {path} dimensions disagree with spec: {mismatched}")
    state = module.canonical_state()
    for name, param in state.items():
        if name not in arrays:
            raise DataError(f"weight file {path} is missing {name}")
        value = arrays[name]
        if tuple(value.shape) != tuple(param.shape) or value.dtype != np.dtype("<f4"):
            raise DataError(f"{name}: expected float32 {tuple(param.shape)}, got {value.dtype} {value.shape}")
        with torch.no_grad():
            param.copy_(torch.from_numpy(value.astype(np.float32)))
