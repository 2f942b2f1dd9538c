"""Short-to-long-term trajectory forecasting with goal heatmaps and
online interactive teacher-student distillation."""

from .core import (
    HeatmapStack,
    LossBundle,
    SceneMap,
    TimeConfig,
    TrajectoryWindow,
    bce,
    mse_trajectory,
    patchify,
    render_gaussian_heatmap,
    render_trajectory_heatmaps,
    unpatchify,
)
from .distillation import DistillConfig, ModelBundle, total_loss
from .goalnet import GoalNet, GoalNetConfig, build_augmented_teacher_input, sample_goals
from .metrics import EvalReport, evaluate, horizon_sweep, min_ade_fde
from .temporalnet import AgentAwareAttention, TemporalNet, TemporalNetConfig
from .trainer import AblationFlags, RunConfig, build_models, resume, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AgentAwareAttention",
    "DistillConfig",
    "EvalReport",
    "GoalNet",
    "GoalNetConfig",
    "HeatmapStack",
    "LossBundle",
    "ModelBundle",
    "RunConfig",
    "SceneMap",
    "TemporalNet",
    "TemporalNetConfig",
    "TimeConfig",
    "TrajectoryWindow",
    "bce",
    "build_augmented_teacher_input",
    "build_models",
    "evaluate",
    "horizon_sweep",
    "min_ade_fde",
    "mse_trajectory",
    "patchify",
    "render_gaussian_heatmap",
    "render_trajectory_heatmaps",
    "resume",
    "sample_goals",
    "total_loss",
    "train",
    "unpatchify",
]
