"""Label prompts and reports through the frozen text encoder and a trainable projection."""
from typing import Dict, List, Optional, Sequence

import torch
from torch import nn

from .backbones import TextEncoder
from .errors import ConfigError, TokenizationError

PROMPT_TEMPLATE = "a radiology image with {}"


class LabelSpace:
    def __init__(self, class_names: Sequence[str]):
        names = [str(n) for n in class_names]
        if any(not n.strip() for n in names):
            raise ConfigError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names in {names}")
        self.class_names = names

    def __len__(self):
        return len(self.class_names)

    def __iter__(self):
        return iter(self.class_names)

    def __eq__(self, other):
        return isinstance(other, LabelSpace) and other.class_names == self.class_names

    def __repr__(self):
        return f"LabelSpace({self.class_names})"


def build_prompts(labels) -> List[str]:
    return [PROMPT_TEMPLATE.format(name) for name in labels]


class TextPathway(nn.Module):
    """Trainable projection on top of cached frozen end-of-text embeddings."""

    def __init__(self, text_dim, fusion_dim):
        super().__init__()
        self.projection = nn.Linear(text_dim, fusion_dim)
        self._cache: Dict[tuple, torch.Tensor] = {}

    def frozen_embeddings(self, texts, encoder: TextEncoder, truncate=False):
        """Encoder outputs for ``texts``, computed once per distinct string."""
        missing = [t for t in dict.fromkeys(texts) if (t, truncate) not in self._cache]
        if missing:
            ids = []
            for t in missing:
                try:
                    ids.append(encoder.tokenizer(t, truncate=truncate))
                except TokenizationError as exc:
                    raise TokenizationError(f"{exc} (text: {t!r})") from exc
            for t, emb in zip(missing, encoder.encode_batch(ids)):
                self._cache[(t, truncate)] = emb
        if not texts:
            return torch.zeros(0, encoder.spec.embed_dim)
        return torch.stack([self._cache[(t, truncate)] for t in texts])

    def clear_cache(self):
        self._cache.clear()

    def encode_labels(self, labels, encoder: TextEncoder):
        """Projected label features, one row per class in label order."""
        prompts = build_prompts(labels)
        try:
            raw = self.frozen_embeddings(prompts, encoder)
        except TokenizationError as exc:
            raise TokenizationError(f"class prompt failed to tokenize: {exc}") from exc
        return self.projection(raw.to(self.projection.weight.dtype))

    def encode_reports(self, reports: Sequence[Optional[str]], encoder: TextEncoder):
        """Projected report embeddings and a mask of records that carry a report.

        Reports are head-truncated to the encoder's maximum length.
        """
        present = [bool(r and r.strip()) for r in reports]
        texts = [r for r, p in zip(reports, present) if p]
        mask = torch.tensor(present, dtype=torch.bool)
        if not texts:
            return None, mask
        raw = self.frozen_embeddings(texts, encoder, truncate=True)
        return self.projection(raw.to(self.projection.weight.dtype)), mask


def encode_labels(prompts, encoder: TextEncoder, projection: nn.Module):
    """Functional form: project the encoder's end-of-text embedding of each prompt."""
    ids = [encoder.tokenizer(p) for p in prompts]
    return projection(encoder.encode_batch(ids).to(projection.weight.dtype))


def encode_report(report, encoder: TextEncoder, projection: nn.Module):
    """Projected report embedding, or ``None`` for a missing or empty report."""
    if not report or not report.strip():
        return None
    ids = encoder.tokenizer(report, truncate=True)
    return projection(encoder.encode(ids).to(projection.weight.dtype))
