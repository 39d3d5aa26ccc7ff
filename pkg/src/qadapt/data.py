"""Dataset manifests, image decoding and the synthetic small-lesion generator.

Manifest format (UTF-8 JSON lines)::

    {"classes": ["Atelectasis", "Edema"]}
    {"id": "r0", "image": "images/r0.png", "labels": [1, 0], "report": "..."}

Image paths are relative to the manifest's directory. ``report`` is optional.
"""
import json
import math
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .kernels import resize_image
from .text import LabelSpace

LOSSLESS_FORMATS = {"PNG", "TIFF", "BMP", "PPM"}

DEFAULT_CLASS_NAMES = [
    "Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Effusion", "Emphysema", "Fibrosis",
    "Hernia", "Infiltration", "Mass", "Nodule", "Pleural Thickening", "Pneumonia", "Pneumothorax",
]


@dataclass
class ImageRecord:
    record_id: str
    image_path: Path
    labels: np.ndarray
    report: Optional[str] = None

    def load_image(self):
        return decode_image(self.image_path)


@dataclass
class DatasetManifest:
    path: Path
    labels: LabelSpace
    records: List[ImageRecord]

    def __len__(self):
        return len(self.records)

    @property
    def label_matrix(self):
        return np.stack([r.labels for r in self.records]) if self.records else np.zeros((0, len(self.labels)))


# ---------------------------------------------------------------- manifests


def _iter_rows(path, num_classes, fh, root):
    for lineno, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rid, image, labels = str(row["id"]), row["image"], row["labels"]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if not isinstance(labels, list) or len(labels) != num_classes:
            got = len(labels) if isinstance(labels, list) else type(labels).__name__
            raise DataError(f"{path}:{lineno}: expected {num_classes} labels, got {got}")
        if any(v not in (0, 1) for v in labels):
            raise DataError(f"{path}:{lineno}: labels must be 0 or 1")
        image_path = (root / image).resolve()
        if not image_path.is_file():
            raise DataError(f"{path}:{lineno}: image not found: {image}")
        report = row.get("report")
        yield ImageRecord(rid, image_path, np.asarray(labels, dtype=np.int8), report if report else None)


def read_manifest(path) -> Tuple[LabelSpace, Iterator[ImageRecord]]:
    """Header label space and a lazy iterator over the manifest rows."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    try:
        header = json.loads(fh.readline())
        labels = LabelSpace(header["classes"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        fh.close()
        raise DataError(f"{path}:1: malformed header ({exc})") from exc

    def rows():
        with fh:
            yield from _iter_rows(path, len(labels), fh, path.parent)

    return labels, rows()


def load_manifest(path) -> DatasetManifest:
    labels, rows = read_manifest(path)
    records = list(rows)
    return DatasetManifest(Path(path), labels, records)


def write_manifest(path, labels: LabelSpace, records):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": list(labels)}) + "\n")
        for r in records:
            row = {
                "id": r.record_id,
                "image": os.path.relpath(r.image_path, path.parent),
                "labels": [int(v) for v in r.labels],
            }
            if r.report:
                row["report"] = r.report
            fh.write(json.dumps(row) + "\n")
    return path


def decode_image(path):
    """H x W x 3 float32 array in [0, 1]; grayscale is replicated to three channels."""
    try:
        with Image.open(path) as im:
            if im.format not in LOSSLESS_FORMATS:
                raise DataError(f"{path}: unsupported image format {im.format}")
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except DataError:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if mode in ("L", "RGB"):
        scale = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    else:
        raise DataError(f"{path}: unsupported pixel mode {mode}")
    arr = np.clip(arr.astype(np.float32) / scale, 0.0, 1.0)
    if arr.ndim == 2:
        # read-only broadcast view; the resize path detects it and works on one channel
        arr = np.broadcast_to(arr[:, :, None], arr.shape + (3,))
    return arr


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 1024
    num_classes: int = 4
    lesion_size: int = 32
    prevalence: float = 0.3
    shift_knob: float = 0.0
    seed: int = 0
    amplitude: float = 0.25
    with_reports: bool = True

    def __post_init__(self):
        if not 0 < self.prevalence < 1:
            raise ConfigError("prevalence must lie in (0, 1)")
        if not 0 <= self.shift_knob <= 1:
            raise ConfigError("shift_knob must lie in [0, 1]")
        if self.lesion_size * 4 > self.image_size:
            raise ConfigError("lesion_size must be much smaller than image_size")
        if self.num_classes < 1:
            raise ConfigError("need at least one class")

    @property
    def class_names(self):
        if self.num_classes <= len(DEFAULT_CLASS_NAMES):
            return DEFAULT_CLASS_NAMES[: self.num_classes]
        return [f"Finding {i}" for i in range(self.num_classes)]


def lesion_pattern(spec: SyntheticSpec, class_index):
    """Hann-windowed oriented grating for one class, zero mean up to windowing.

    Periods of 9-14 px keep most of their contrast through a 512->224 crop
    resize but sit near the Nyquist limit of the 1024->224 global resize.
    """
    s = spec.lesion_size
    theta = math.pi * class_index / spec.num_classes + math.pi / 8
    period = 9.0 + 2.5 * (class_index % 3)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) - (s - 1) / 2.0
    phase = 2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period
    window = np.outer(np.hanning(s), np.hanning(s))
    contrast = spec.amplitude * (1.0 - 0.5 * spec.shift_knob)
    return contrast * window * np.cos(phase)


def _record_rng(spec, split, index):
    return np.random.default_rng([spec.seed, zlib.crc32(split.encode()), index])


def render_record(spec: SyntheticSpec, split, index):
    """Image (H x W float in [0, 1]), labels, report and lesion top-left corners."""
    rng = _record_rng(spec, split, index)
    size = spec.image_size
    coarse = rng.standard_normal((9, 9, 1))
    background = resize_image(coarse, size, size)[:, :, 0].astype(np.float64)
    background /= max(background.std(), 1e-6)
    image = 0.45 + 0.2 * spec.shift_knob + 0.08 * background
    labels = (rng.random(spec.num_classes) < spec.prevalence).astype(np.int8)
    corners = []
    for c in np.flatnonzero(labels):
        y, x = rng.integers(0, size - spec.lesion_size + 1, size=2)
        image[y : y + spec.lesion_size, x : x + spec.lesion_size] += lesion_pattern(spec, int(c))
        corners.append((int(c), int(y), int(x)))
    image = np.clip(image, 0.0, 1.0)
    names = [spec.class_names[c] for c in np.flatnonzero(labels)]
    report = None
    if spec.with_reports:
        report = f"findings consistent with {' and '.join(names).lower()}" if names else "no acute findings"
    return image, labels, report, corners


def generate_synthetic(spec: SyntheticSpec, count, split, out_dir) -> DatasetManifest:
    """Write ``count`` records as 8-bit PNGs plus ``<split>.jsonl``; fully reproducible."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images" / split
    image_dir.mkdir(parents=True, exist_ok=True)
    labels = LabelSpace(spec.class_names)
    records = []
    for i in range(count):
        image, y, report, _ = render_record(spec, split, i)
        rid = f"{split}-{i:06d}"
        path = image_dir / f"{rid}.png"
        Image.fromarray(np.round(image * 255).astype(np.uint8)).save(path, optimize=False)
        records.append(ImageRecord(rid, path.resolve(), y, report))
    manifest_path = write_manifest(out_dir / f"{split}.jsonl", labels, records)
    return DatasetManifest(manifest_path, labels, records)
