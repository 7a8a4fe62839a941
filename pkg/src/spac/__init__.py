"""Step-wise deformable image registration driven by a planner/actor/critic agent."""

from .agent import SPACAgent, TrainConfig, Trainer
from .config import RunConfig
from .data import DatasetSpec, gen_synthetic_pair, make_pairs
from .env import dice, env_reset, env_step, kmeans_segment
from .estimator import SPACRegistration
from .warp import compose_fields, grid_sample_bilinear, ncc_local, tv_penalty

__all__ = [
    "DatasetSpec",
    "RunConfig",
    "SPACAgent",
    "SPACRegistration",
    "TrainConfig",
    "Trainer",
    "compose_fields",
    "dice",
    "env_reset",
    "env_step",
    "gen_synthetic_pair",
    "grid_sample_bilinear",
    "kmeans_segment",
    "make_pairs",
    "ncc_local",
    "tv_penalty",
]

__version__ = "0.1.0"
