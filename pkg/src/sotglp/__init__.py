"""Few-shot prompt learning with saliency-guided sparse optimal transport.

Toy frozen encoders, a numpy reverse-mode tape, a log-domain Sinkhorn
solver, and a synthetic planted-part data generator, wired into a
global + local prompt classifier with MCM / GL-MCM OOD scoring.
"""

from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    FormatError,
    GenerationError,
    NonFiniteError,
    SizeError,
    SotGlpError,
    VersionError,
)
from .metrics import MetricsReport, auroc, fpr_at_tpr95, prompt_overlap, top1_accuracy
from .model import Model, build_encoders, forward, init_model, predict
from .otcore import SinkhornConfig, TransportPlan, exact_matching_oracle, sinkhorn_plan
from .synthdata import Episode, gen_episode, gen_ood_pool
from .train import train_episode

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateInputError", "DimensionError", "DivergenceError", "Episode",
    "FormatError", "GenerationError", "MetricsReport", "Model", "NonFiniteError", "RunConfig", "SinkhornConfig",
    "SizeError", "SotGlpError", "TransportPlan", "VersionError", "auroc", "build_encoders",
    "exact_matching_oracle", "forward", "fpr_at_tpr95", "gen_episode", "gen_ood_pool", "init_model",
    "predict", "prompt_overlap", "sinkhorn_plan", "top1_accuracy", "train_episode",
]
