"""trajcast: desk-scale multimodal trajectory prediction toolkit.

Two-stage prediction (goals -> completion -> refinement) trained with
winner-takes-all supervision, temporal and spatial consistency losses, and
optional pseudo targets clustered from a model ensemble. Pure numpy with
hand-written gradients; deterministic end to end.
"""

from .core import (AgentTrack, AugmentSpec, Frame, IDENTITY_FRAME, PredictionSet,
                   Scenario, TargetSet, Trajectory, TrajcastError, Waypoint, Window,
                   agent_frame, augment, from_frame, to_frame)
from .data import SyntheticSpec, generate, load_csv, make_shift_pair, make_window, save_csv
from .ensemble import EnsembleBank, build_target_set, kmeans_trajectories, pool
from .harness import Adam, TrainConfig, evaluate, jitter_score, run_grid, train
from .losses import LossBreakdown, huber, softmin_scores, temporal_consistency, total_loss
from .matching import match, similarity
from .metrics import MetricReport, ade, fde, min_metrics, report
from .predictor import ModelConfig, ParamStore, backward, forward, init_params, predict

__version__ = "0.1.0"

__all__ = [
    "AgentTrack", "AugmentSpec", "Frame", "IDENTITY_FRAME", "PredictionSet",
    "Scenario", "TargetSet", "Trajectory", "TrajcastError", "Waypoint", "Window",
    "agent_frame", "augment", "from_frame", "to_frame",
    "SyntheticSpec", "generate", "load_csv", "make_shift_pair", "make_window", "save_csv",
    "EnsembleBank", "build_target_set", "kmeans_trajectories", "pool",
    "Adam", "TrainConfig", "evaluate", "jitter_score", "run_grid", "train",
    "LossBreakdown", "huber", "softmin_scores", "temporal_consistency", "total_loss",
    "match", "similarity",
    "MetricReport", "ade", "fde", "min_metrics", "report",
    "ModelConfig", "ParamStore", "backward", "forward", "init_params", "predict",
    "__version__",
]
