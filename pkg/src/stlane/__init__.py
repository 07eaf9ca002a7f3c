"""Multi-frame lane segmentation: UNet backbone with spatial-temporal attention and an LSTM/GRU extractor, in numpy."""

from .attention import AttentionVariant, Extractor
from .checkpoint import load_checkpoint, save_checkpoint
from .complexity import count_macs, count_params
from .data import ImageSequence, generate_sequence, random_scene
from .metrics import LossConfig, mean_average_precision, metrics, weighted_bce_logits
from .model import LaneNet, ModelConfig, backward, forward, init_parameters, predict_mask
from .train import TrainConfig, train

__all__ = [
    "AttentionVariant", "Extractor", "ImageSequence", "LaneNet", "LossConfig", "ModelConfig", "TrainConfig",
    "backward", "count_macs", "count_params", "forward", "generate_sequence", "init_parameters",
    "load_checkpoint", "mean_average_precision", "metrics", "predict_mask", "random_scene", "save_checkpoint",
    "train", "weighted_bce_logits",
]

__version__ = "0.1.0"
