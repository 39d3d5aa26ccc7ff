"""Parameter-efficient adaptation of frozen vision-language encoders for multi-label diagnosis."""
from .backbones import BackboneSpec, TextEncoderSpec, init_backbone, init_text_encoder
from .config import AdaptationConfig, ExpertConfig, TextConfig, load_config
from .focal import FocalConfig, grid_positions, sample_views
from .metrics import MetricsReport
from .pipeline import Checkpoint, ablate, evaluate, sweep, train, trainable_parameters

__all__ = [
    "AdaptationConfig", "BackboneSpec", "Checkpoint", "ExpertConfig", "FocalConfig", "MetricsReport",
    "TextConfig", "TextEncoderSpec", "ablate", "evaluate", "grid_positions", "init_backbone",
    "init_text_encoder", "load_config", "sample_views", "sweep", "train", "trainable_parameters",
]
__version__ = "0.1.0"
