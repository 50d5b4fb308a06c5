"""Toy-scale unsupervised domain adaptation for semantic segmentation.

Two cooperating pieces: a target-guided restyling GAN that augments the
labeled source domain toward the target style without cycle losses, and
a mean-teacher self-ensembling trainer that consumes source, restyled
and unlabeled target batches.
"""

from . import autodiff, ensemble, metrics, nnet, pipeline, segmodels, styleaug, toydata
from .nnet import ModelWeights, StageSchedule, load_checkpoint, save_checkpoint, weights_hash
from .pipeline import PipelineConfig

__all__ = [
    "autodiff", "ensemble", "metrics", "nnet", "pipeline", "segmodels",
    "styleaug", "toydata", "ModelWeights", "StageSchedule",
    "load_checkpoint", "save_checkpoint", "weights_hash", "PipelineConfig",
]

__version__ = "0.1.0"
