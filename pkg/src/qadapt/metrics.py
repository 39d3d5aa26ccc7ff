"""Macro AUC, F1-optimal thresholds and the serialized metrics report."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import MetricsError
from .kernels import f1_sweep, midranks


def auc_score(scores, labels):
    """Mann-Whitney AUC with ties counted one half; ``None`` for a one-sided class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = midranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _columns(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape or scores.shape[0] < 1:
        raise MetricsError(f"scores {scores.shape} and labels {labels.shape} must match and be non-empty")
    return scores, labels


def macro_auc(scores, labels, class_names=None):
    """Per-class AUC (fractions) and their unweighted mean over evaluable classes."""
    scores, labels = _columns(scores, labels)
    names = class_names or [str(i) for i in range(scores.shape[1])]
    per_class, skipped = {}, []
    for j, name in enumerate(names):
        value = auc_score(scores[:, j], labels[:, j])
        if value is None:
            skipped.append(name)
        else:
            per_class[name] = value
    if not per_class:
        raise MetricsError("no evaluable class")
    return per_class, float(np.mean(list(per_class.values()))), skipped


def f1_threshold_search(scores, labels, class_names=None):
    """Per-class (threshold, F1, ACC) at the F1-maximizing threshold, plus macro F1 and ACC."""
    scores, labels = _columns(scores, labels)
    names = class_names or [str(i) for i in range(scores.shape[1])]
    per_class = {}
    for j, name in enumerate(names):
        col = labels[:, j] > 0.5
        if col.all() or not col.any():
            continue
        per_class[name] = f1_sweep(scores[:, j], col.astype(np.float64))
    if not per_class:
        raise MetricsError("no evaluable class")
    f1 = float(np.mean([v[1] for v in per_class.values()]))
    acc = float(np.mean([v[2] for v in per_class.values()]))
    return per_class, f1, acc


@dataclass
class ClassMetrics:
    auc: float
    f1: float
    acc: float
    threshold: float


@dataclass
class MetricsReport:
    """Macro metrics in percent; per-class values in percent as well."""

    macro_auc: float
    macro_f1: float
    macro_acc: float
    per_class: Dict[str, ClassMetrics]
    skipped_classes: List[str] = field(default_factory=list)
    extra: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, class_names, extra=None):
        aucs, m_auc, skipped = macro_auc(scores, labels, class_names)
        f1s, m_f1, m_acc = f1_threshold_search(scores, labels, class_names)
        per_class = {
            name: ClassMetrics(100 * aucs[name], 100 * f1s[name][1], 100 * f1s[name][2], f1s[name][0])
            for name in class_names
            if name in aucs
        }
        return cls(100 * m_auc, 100 * m_f1, 100 * m_acc, per_class, skipped, dict(extra or {}))

    def to_text(self):
        lines = [
            "[macro]",
            f"auc = {self.macro_auc!r}",
            f"f1 = {self.macro_f1!r}",
            f"acc = {self.macro_acc!r}",
            f"skipped = {','.join(self.skipped_classes)}",
        ]
        for key, value in sorted(self.extra.items()):
            lines.append(f"{key} = {value}")
        for name, m in self.per_class.items():
            lines += [
                "",
                f"[class {name}]",
                f"auc = {m.auc!r}",
                f"f1 = {m.f1!r}",
                f"acc = {m.acc!r}",
                f"threshold = {m.threshold!r}",
            ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        blocks, current = {}, None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                blocks[current] = {}
                continue
            if current is None or "=" not in line:
                raise MetricsError(f"malformed metrics line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            blocks[current][key] = value
        if "macro" not in blocks:
            raise MetricsError("metrics text has no [macro] block")
        macro = blocks.pop("macro")
        per_class = {}
        for block, kv in blocks.items():
            name = block[len("class "):]
            per_class[name] = ClassMetrics(*(float(kv[k]) for k in ("auc", "f1", "acc", "threshold")))
        skipped = [s for s in macro.pop("skipped", "").split(",") if s]
        core = {k: float(macro.pop(k)) for k in ("auc", "f1", "acc")}
        return cls(core["auc"], core["f1"], core["acc"], per_class, skipped, macro)

    def same_metrics(self, other: Optional["MetricsReport"]):
        return other is not None and self.to_text() == other.to_text()
