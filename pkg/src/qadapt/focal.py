"""Focal sampling: a resized global view plus native-resolution local crops."""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, GeometryError
from .kernels import resize_image

MODES = ("sliding", "random")


@dataclass(frozen=True)
class FocalConfig:
    num_views: int = 5
    crop_size: int = 512
    stride: int = 384
    mode: str = "sliding"
    target_resolution: int = 224
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_views < 1:
            raise ConfigError(f"num_views must be >= 1, got {self.num_views}")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        if not 0 < self.stride <= self.crop_size:
            raise ConfigError(f"stride must lie in (0, crop_size], got {self.stride}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target_resolution < 1:
            raise ConfigError("target_resolution must be positive")


class CropBox(NamedTuple):
    x: int
    y: int
    width: int
    height: int


@dataclass
class ViewSet:
    views: np.ndarray  # (N, R, R, 3), index 0 is the global view
    boxes: List[CropBox] = field(default_factory=list)

    def __len__(self):
        return self.views.shape[0]


def axis_positions(dim, crop_size, stride):
    """Window offsets along one axis; the last window is clamped to the edge."""
    if crop_size > dim:
        raise GeometryError(f"crop size {crop_size} exceeds image dimension {dim}")
    if stride <= 0:
        raise GeometryError(f"stride must be positive, got {stride}")
    positions = list(range(0, dim - crop_size + 1, stride))
    if positions[-1] + crop_size < dim:
        positions.append(dim - crop_size)
    return positions


def grid_positions(height, width, crop_size, stride):
    """Sliding-window boxes in row-major order covering the whole image."""
    if crop_size > min(height, width):
        raise GeometryError(f"crop size {crop_size} exceeds image {height}x{width}")
    ys = axis_positions(height, crop_size, stride)
    xs = axis_positions(width, crop_size, stride)
    return [CropBox(x, y, crop_size, crop_size) for y in ys for x in xs]


def select_boxes(height, width, config: FocalConfig, key: Optional[int] = None):
    """The N-1 crop boxes for one image.

    ``key`` distinguishes records so that subset selection and random
    placement differ between images while staying reproducible.
    """
    if config.num_views == 1:
        return []
    if config.crop_size > min(height, width):
        raise GeometryError(f"image {height}x{width} is smaller than crop size {config.crop_size}")
    seed = [config.rng_seed] if key is None else [config.rng_seed, int(key)]
    rng = np.random.default_rng(seed)
    want = config.num_views - 1
    if config.mode == "sliding":
        grid = grid_positions(height, width, config.crop_size, config.stride)
        if want >= len(grid):
            return grid
        picked = np.sort(rng.choice(len(grid), size=want, replace=False))
        return [grid[i] for i in picked]
    ys = rng.integers(0, height - config.crop_size + 1, size=want)
    xs = rng.integers(0, width - config.crop_size + 1, size=want)
    return [CropBox(int(x), int(y), config.crop_size, config.crop_size) for x, y in zip(xs, ys)]


def crop_and_resize(image, box: Optional[CropBox], resolution):
    if box is not None:
        image = image[box.y : box.y + box.height, box.x : box.x + box.width]
    if image.strides[2] == 0:
        # channel-broadcast grayscale
        one = resize_image(image[:, :, :1], resolution, resolution)
        return np.repeat(one, 3, axis=2)
    return resize_image(image, resolution, resolution)


def sample_views(image, config: FocalConfig, key: Optional[int] = None) -> ViewSet:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise GeometryError(f"expected an H x W x 3 image, got shape {image.shape}")
    boxes = select_boxes(image.shape[0], image.shape[1], config, key)
    res = config.target_resolution
    views = np.empty((len(boxes) + 1, res, res, 3), dtype=np.float32)
    views[0] = crop_and_resize(image, None, res)
    for i, box in enumerate(boxes, start=1):
        views[i] = crop_and_resize(image, box, res)
    return ViewSet(views, boxes)
