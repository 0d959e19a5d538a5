"""Semi-supervised incremental few-shot learning with cosine classifiers and prototype refinement."""
from .config import ExperimentConfig
from .model import IncrementalCosineModel, compute_prototypes, cosine_classify
from .refinement import RefinementConfig, refine_loop
from .sampler import SamplerConfig, sample_test_episode
from .synthetic import SyntheticSpec, synthesize_dataset
from .types import DatasetBundle, Episode, EpisodeSpec, Mode, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "IncrementalCosineModel",
    "compute_prototypes",
    "cosine_classify",
    "RefinementConfig",
    "refine_loop",
    "SamplerConfig",
    "sample_test_episode",
    "SyntheticSpec",
    "synthesize_dataset",
    "DatasetBundle",
    "Episode",
    "EpisodeSpec",
    "Mode",
    "ValidationError",
]
