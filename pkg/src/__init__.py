from .config import RunConfig, setup_logging
from .runner import PipelineRunner
from .feature import FeatureSet, MollifierConfig
from .nnet import MlpArch, MlpModel

__all__ = [
    "RunConfig",
    "setup_logging",
    "PipelineRunner",
    "FeatureSet",
    "MollifierConfig",
    "MlpArch",
    "MlpModel",
]
