"""Video face parsing: shuffle-transformer backbone, feature-alignment decoder,
training pipeline, test-time augmentation and DAVIS-style video metrics."""

from .backbone import BackboneConfig, FeaturePyramid, ShuffleBackbone
from .decoder import AlignDecoder, DecoderConfig
from .metrics import EvalConfig, EvalReport, evaluate_dataset
from .model import FaceParser, ModelConfig
from .tensor import Tensor
from .train import TrainConfig, train
from .tta import TTAConfig, predict_tta

__version__ = "0.1.0"

__all__ = [
    "AlignDecoder",
    "BackboneConfig",
    "DecoderConfig",
    "EvalConfig",
    "EvalReport",
    "FaceParser",
    "FeaturePyramid",
    "ModelConfig",
    "ShuffleBackbone",
    "TTAConfig",
    "Tensor",
    "TrainConfig",
    "evaluate_dataset",
    "predict_tta",
    "train",
]
