"""Training, evaluation, data-fraction sweeps and adapter-only checkpoints."""
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from PIL import Image

from .backbones import init_backbone, init_text_encoder, parameter_hash
from .config import AdaptationConfig
from .data import DatasetManifest, load_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .focal import FocalConfig, crop_and_resize, select_boxes
from .metrics import MetricsReport
from .model import AdapterModel
from .objective import similarity_logits

log = logging.getLogger(__name__)

META_KEY = "__meta__"
TRAINABLE_GROUPS = ("query_banks", "cross_view_attention", "fusion_projections", "gate", "text_projection")


# ---------------------------------------------------------------- model assembly


def build_frozen(config: AdaptationConfig):
    backbones = [init_backbone(e.spec(), e.source) for e in config.experts]
    text = init_text_encoder(config.text.spec(), config.text.source)
    return backbones, text


def build_model(config: AdaptationConfig, frozen=None) -> AdapterModel:
    backbones, text = frozen if frozen is not None else build_frozen(config)
    return AdapterModel(
        backbones, text,
        num_queries=config.num_queries,
        alpha=config.alpha,
        fusion_dim=config.fusion_dim,
        heads=config.attn_heads,
        inner_dim_ratio=config.attn_inner_ratio,
        frozen_reduction=config.frozen_reduction,
        query_reduction=config.query_reduction,
        gate_source=config.gate_source,
        logit_scale=config.logit_scale,
        seed=config.seed,
    )


def frozen_hashes(model: AdapterModel) -> Dict[str, str]:
    out = {b.spec.expert_id: parameter_hash(b) for b in model.backbones}
    out["text"] = parameter_hash(model.text_encoder)
    return out


def _group_of(name):
    if name.startswith("qencoders.") and ".bank." in name:
        return "query_banks"
    if name.startswith("qencoders."):
        return "cross_view_attention"
    if name.startswith("projections."):
        return "fusion_projections"
    if name.startswith("gate."):
        return "gate"
    if name.startswith("text.projection."):
        return "text_projection"
    raise KeyError(name)


@dataclass
class ParameterReport:
    named: List[tuple]
    group_counts: Dict[str, int]
    trainable: int
    frozen: int

    @property
    def total(self):
        return self.trainable + self.frozen

    @property
    def ratio(self):
        return self.trainable / self.total


def trainable_parameters(model: AdapterModel) -> ParameterReport:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    counts = dict.fromkeys(TRAINABLE_GROUPS, 0)
    for n, p in named:
        counts[_group_of(n)] += p.numel()
    frozen = sum(p.numel() for m in model.frozen_modules() for p in m.parameters())
    return ParameterReport(named, counts, sum(counts.values()), frozen)


def closed_form_counts(config: AdaptationConfig):
    """Trainable parameter count per group from the configuration dimensions alone."""
    counts = dict.fromkeys(TRAINABLE_GROUPS, 0)
    ff, h = config.fusion_dim, config.attn_heads
    k = len(config.experts)
    for e in config.experts:
        f = e.embed_dim
        inner = max(h, int(round(f * config.attn_inner_ratio / h)) * h)
        counts["query_banks"] += config.num_queries * f
        # LayerNorm (2f) + qkv (3*inner*f + 3*inner) + out (inner*f + f), for two paths
        counts["cross_view_attention"] += 2 * (2 * f + 4 * inner * f + 3 * inner + f)
        counts["fusion_projections"] += f * ff + ff
    counts["gate"] = k * ff * k + k
    counts["text_projection"] = config.text.embed_dim * ff + ff
    return counts


def closed_form_frozen(config: AdaptationConfig):
    def block(f, ratio=4):
        return 2 * f + (3 * f * f + 3 * f) + (f * f + f) + 2 * f + (ratio * f * f + ratio * f) + (ratio * f * f + f)

    total = 0
    for e in config.experts:
        f, p = e.embed_dim, e.patch_size
        m = (e.input_resolution // p) ** 2 + 1
        total += f * 3 * p * p + f + m * f + e.depth * block(f) + 2 * f
    t = config.text
    total += t.vocab_size * t.embed_dim + t.max_sequence_length * t.embed_dim + t.depth * block(t.embed_dim)
    total += 2 * t.embed_dim
    return total


# ---------------------------------------------------------------- frozen prefix features


def record_key(record_id):
    return zlib.crc32(str(record_id).encode())


class PrefixStore:
    """Frozen-prefix tokens per (expert weights, image, crop box), computed once.

    Backbones are frozen and views are deterministic, so these tokens never
    change during adaptation.
    """

    def __init__(self):
        self._data = {}

    def __len__(self):
        return len(self._data)

    def clear(self):
        self._data.clear()

    def features(self, backbones, hashes, records, focal: FocalConfig):
        per_record = [[] for _ in backbones]
        for record in records:
            boxes = self._boxes(record, focal)
            keys = [(str(record.image_path), b, focal.target_resolution) for b in [None, *boxes]]
            missing = [k for k in keys if any((h, *k) not in self._data for h in hashes)]
            if missing:
                image = record.load_image()
                views = np.stack([crop_and_resize(image, k[1], focal.target_resolution) for k in missing])
                with torch.no_grad():
                    for backbone, h in zip(backbones, hashes):
                        tokens = backbone.run_prefix(torch.from_numpy(views)).tokens
                        for k, t in zip(missing, tokens):
                            self._data[(h, *k)] = t.clone()
            for i, h in enumerate(hashes):
                per_record[i].append(torch.stack([self._data[(h, *k)] for k in keys]))
        return [_stack_padded(items) for items in per_record]

    @staticmethod
    def _boxes(record, focal):
        if focal.num_views == 1:
            return []
        try:
            with Image.open(record.image_path) as im:
                width, height = im.size
        except OSError as exc:
            raise DataError(f"cannot read {record.image_path}: {exc}") from exc
        return select_boxes(height, width, focal, key=record_key(record.record_id))


def _stack_padded(items):
    """Stack (N_i, M, f) tensors; records with fewer views repeat their global view."""
    n = max(t.shape[0] for t in items)
    padded = [t if t.shape[0] == n else torch.cat([t, t[:1].expand(n - t.shape[0], -1, -1)]) for t in items]
    return torch.stack(padded)


DEFAULT_STORE = PrefixStore()


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    state: Dict[str, torch.Tensor]
    config: dict
    expert_hashes: Dict[str, str]
    class_names: List[str] = field(default_factory=list)

    def save(self, path):
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state.items()}
        meta = {"config": self.config, "expert_hashes": self.expert_hashes, "class_names": self.class_names}
        arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return Path(path)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as data:
                arrays = {k: data[k] for k in data.files}
            meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
            state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
            return cls(state, meta["config"], meta["expert_hashes"], meta.get("class_names", []))
        except FileNotFoundError as exc:
            raise CheckpointError(f"checkpoint not found: {path}") from exc
        except Exception as exc:
            raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc

    @property
    def adaptation_config(self):
        return AdaptationConfig.from_dict(self.config)


def restore_model(checkpoint: Checkpoint, config: Optional[AdaptationConfig] = None) -> AdapterModel:
    """Rebuild frozen parts from the config, verify their identity, load the adapter."""
    config = config or checkpoint.adaptation_config
    model = build_model(config)
    hashes = frozen_hashes(model)
    if hashes != checkpoint.expert_hashes:
        bad = sorted(k for k in set(hashes) | set(checkpoint.expert_hashes)
                     if hashes.get(k) != checkpoint.expert_hashes.get(k))
        raise CheckpointError(f"frozen weights differ from the checkpoint's for: {', '.join(bad)}")
    own = model.state_dict()
    if set(own) != set(checkpoint.state):
        raise CheckpointError("checkpoint parameters do not match the adapter layout")
    for name, value in checkpoint.state.items():
        if own[name].shape != value.shape:
            raise CheckpointError(f"{name}: shape {tuple(value.shape)} != {tuple(own[name].shape)}")
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in checkpoint.state.items()})
    return model


def trainable_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def state_hash(state):
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- train / evaluate


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[dict]
    val_reports: List[MetricsReport]
    best_epoch: int
    train_ids: List[str]
    model: AdapterModel

    @property
    def best_report(self):
        return self.val_reports[self.best_epoch]

    def epoch_losses(self):
        out = {}
        for row in self.log:
            out.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(out[e])) for e in sorted(out)]


def subsample(records, fraction, seed):
    """Nested uniform subset: the records kept at a smaller fraction are kept at every larger one."""
    n = len(records)
    keep = max(1, int(math.floor(fraction * n + 1e-9)))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return [records[i] for i in sorted(order[:keep])]


def _as_manifest(m):
    return m if isinstance(m, DatasetManifest) else load_manifest(m)


@torch.no_grad()
def predict(model: AdapterModel, features, class_names, batch_size=64):
    """Similarity logits (n, L) and gate weights (n, K) for precomputed prefix features."""
    model.eval()
    z = model.label_features(class_names)
    logits, gates = [], []
    n = features[0].shape[0]
    for start in range(0, n, batch_size):
        batch = [f[start : start + batch_size].to(z.dtype) for f in features]
        out = model(batch)
        gates.append(out.gate_weights)
        logits.append(similarity_logits(out.embedding, z, model.logit_scale))
    return torch.cat(logits).numpy(), torch.cat(gates).numpy()


def _report(model, features, manifest: DatasetManifest):
    names = list(manifest.labels)
    scores, gates = predict(model, features, names)
    extra = {f"gate_mean.{b.spec.expert_id}": repr(float(g)) for b, g in zip(model.backbones, gates.mean(axis=0))}
    return MetricsReport.from_scores(scores, manifest.label_matrix, names, extra)


def train(config: AdaptationConfig, train_manifest=None, val_manifest=None, init_checkpoint: Optional[Checkpoint] = None,
          store: Optional[PrefixStore] = None, log_path=None) -> TrainResult:
    train_manifest = _as_manifest(train_manifest or config.train_manifest)
    val_manifest = _as_manifest(val_manifest or config.val_manifest or train_manifest.path)
    if len(train_manifest) == 0:
        raise DataError("training manifest is empty")
    if train_manifest.labels != val_manifest.labels:
        raise ConfigError("training and validation label spaces differ")
    store = DEFAULT_STORE if store is None else store
    names = list(train_manifest.labels)

    if init_checkpoint is not None:
        model = restore_model(init_checkpoint, config)
    else:
        model = build_model(config)
    hashes = frozen_hashes(model)
    ordered = [hashes[b.spec.expert_id] for b in model.backbones]

    records = subsample(train_manifest.records, config.data_fraction, config.seed)
    train_feats = store.features(model.backbones, ordered, records, config.focal)
    val_feats = store.features(model.backbones, ordered, val_manifest.records, config.focal)
    targets = np.stack([r.labels for r in records]).astype(np.float32)
    reports = [r.report for r in records]

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    log_rows, val_reports, best, best_state = [], [], -1, None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
            for b, start in enumerate(range(0, len(records), config.batch_size)):
                idx = order[start : start + config.batch_size]
                batch = [f[idx] for f in train_feats]
                loss = model.loss(batch, targets[idx], names, [reports[i] for i in idx], config.lambda_report)
                total = loss.total
                if not torch.isfinite(total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (records {[records[i].record_id for i in idx[:4]]}...)")
                optimizer.zero_grad()
                total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                row = {"step": step, "epoch": epoch, "batch": b, **loss.as_floats(), "lr": config.lr}
                log_rows.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
                step += 1
            report = _report(model, val_feats, val_manifest)
            val_reports.append(report)
            log.info("epoch %d: val macro AUC %.2f", epoch, report.macro_auc)
            if best < 0 or report.macro_auc > val_reports[best].macro_auc:
                best, best_state = epoch, trainable_state(model)
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best_state)
    ckpt = Checkpoint(best_state, config.to_dict(), hashes, names)
    return TrainResult(ckpt, log_rows, val_reports, best, [r.record_id for r in records], model)


def evaluate(checkpoint: Checkpoint, manifest, store: Optional[PrefixStore] = None,
             model: Optional[AdapterModel] = None) -> MetricsReport:
    """Score a manifest without any gradient computation.

    The manifest may use a different label space than training: prompts are
    rebuilt from its class names.
    """
    manifest = _as_manifest(manifest)
    store = DEFAULT_STORE if store is None else store
    config = checkpoint.adaptation_config
    model = model if model is not None else restore_model(checkpoint, config)
    hashes = [checkpoint.expert_hashes[b.spec.expert_id] for b in model.backbones]
    with torch.no_grad():
        feats = store.features(model.backbones, hashes, manifest.records, config.focal)
        return _report(model, feats, manifest)


@dataclass
class SweepRow:
    fraction: float
    report: MetricsReport
    train_ids: List[str]


def sweep(config: AdaptationConfig, fractions, train_manifest=None, val_manifest=None,
          store: Optional[PrefixStore] = None) -> List[SweepRow]:
    rows = []
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ConfigError(f"fraction {frac} outside (0, 1]")
        result = train(config.replace(data_fraction=frac), train_manifest, val_manifest, store=store)
        rows.append(SweepRow(frac, result.best_report, result.train_ids))
    return rows


ABLATION_AXES = ("views", "alpha", "queries", "experts")


@dataclass
class AblationRow:
    axis: str
    setting: str
    report: MetricsReport


def parse_grid(axis, grid):
    """``views``/``queries`` take ints, ``alpha`` floats, ``experts`` id lists ("A;A,B")."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")
    if isinstance(grid, str):
        sep = ";" if axis == "experts" else ","
        items = [g.strip() for g in grid.split(sep) if g.strip()]
    else:
        items = list(grid)
    if not items:
        raise ConfigError("empty ablation grid")
    try:
        if axis in ("views", "queries"):
            return [int(g) for g in items]
        if axis == "alpha":
            return [float(g) for g in items]
    except ValueError as exc:
        raise ConfigError(f"bad {axis} grid value: {exc}") from exc
    return [[e.strip() for e in g.split(",")] if isinstance(g, str) else list(g) for g in items]


def ablation_config(config: AdaptationConfig, axis, value) -> AdaptationConfig:
    if axis == "views":
        return config.replace(focal={**config.to_dict()["focal"], "num_views": value})
    if axis == "alpha":
        return config.replace(alpha=value)
    if axis == "queries":
        return config.replace(num_queries=value)
    if axis == "experts":
        known = {e.expert_id: e for e in config.experts}
        missing = [e for e in value if e not in known]
        if missing:
            raise ConfigError(f"unknown expert ids {missing}; configured: {sorted(known)}")
        return config.replace(experts=[config.to_dict()["experts"][list(known).index(e)] for e in value])
    raise ConfigError(f"unknown ablation axis {axis!r}")


def ablate(config: AdaptationConfig, axis, grid, train_manifest=None, val_manifest=None,
           store: Optional[PrefixStore] = None) -> List[AblationRow]:
    """One training run per grid value with everything else fixed."""
    rows = []
    for value in parse_grid(axis, grid):
        result = train(ablation_config(config, axis, value), train_manifest, val_manifest, store=store)
        setting = ",".join(value) if axis == "experts" else str(value)
        rows.append(AblationRow(axis, setting, result.best_report))
    return rows
