"""Online interactive teacher-student training step.

One logical step runs four forward passes: the student goal net on the
plain observation, the teacher goal net twice (once on a ground-truth
extended observation, once on the observation augmented with the student's
own predicted heatmaps), and both temporal nets teacher-forced.  The six
resulting loss terms are combined into a :class:`LossBundle`.

Gradient-flow policy: the distillation terms always back-propagate into
the student (that is what makes the scheme interactive); whether they also
reach the teacher is controlled by ``teacher_gradient_from_distill``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .core import (
    HeatmapStack,
    LossBundle,
    SceneMap,
    TimeConfig,
    TrajectoryWindow,
    bce,
    mse_trajectory,
    render_trajectory_heatmaps,
)
from .errors import InvalidArgumentError, NumericalError
from .goalnet import GoalNet, build_augmented_teacher_input, goal_forward
from .temporalnet import TemporalNet


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    enable_gm_distill: bool = True
    enable_tm_distill: bool = True
    teacher_gradient_from_distill: bool = True
    teacher_extra_steps: int | None = None  # None -> t_wp

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if self.teacher_extra_steps is not None and self.teacher_extra_steps < 0:
            raise InvalidArgumentError("teacher_extra_steps must be >= 0")

    def extra_steps(self, cfg: TimeConfig) -> int:
        e = self.teacher_extra_steps if self.teacher_extra_steps is not None else cfg.t_wp
        if not 0 <= e < cfg.t_f:
            raise InvalidArgumentError(
                f"teacher_extra_steps must lie in [0, t_f), got {e} with t_f={cfg.t_f}"
            )
        return e

    @property
    def any_distill(self) -> bool:
        return self.enable_gm_distill or self.enable_tm_distill


@dataclass
class ModelBundle:
    """The four trainable networks of one run."""

    student_goal: GoalNet
    teacher_goal: GoalNet
    student_traj: TemporalNet
    teacher_traj: TemporalNet

    def train(self):
        for m in (self.student_goal, self.teacher_goal, self.student_traj, self.teacher_traj):
            m.train()
        return self

    def eval(self):
        for m in (self.student_goal, self.teacher_goal, self.student_traj, self.teacher_traj):
            m.eval()
        return self


@dataclass
class WindowBatch:
    """Pre-rendered tensors for all co-present agents of one scene window."""

    scene: SceneMap
    windows: list
    obs_pos: torch.Tensor  # (A, t_h, 2)
    fut_pos: torch.Tensor  # (A, t_f, 2)
    obs_hm: torch.Tensor  # (A, t_h, H, W)
    fut_hm: torch.Tensor  # (A, t_f, H, W)
    goal_hm: torch.Tensor  # (A, H, W), ground-truth goal
    wp_hm: torch.Tensor  # (A, H, W), ground-truth waypoint

    @property
    def agents(self) -> int:
        return self.obs_pos.shape[0]

    @classmethod
    def build(cls, scene: SceneMap, windows, cfg: TimeConfig, sigma: float) -> "WindowBatch":
        if not windows:
            raise InvalidArgumentError("a window batch needs at least one agent")
        h, w = scene.height, scene.width
        obs_pos = torch.stack([win.observed for win in windows]).float()
        fut_pos = torch.stack([win.future for win in windows]).float()
        if obs_pos.shape[1] != cfg.t_h or fut_pos.shape[1] != cfg.t_f:
            raise InvalidArgumentError("window lengths do not match the time config")
        obs_hm = torch.stack(
            [render_trajectory_heatmaps(p, sigma, h, w).grid for p in obs_pos]
        )
        fut_hm = torch.stack(
            [render_trajectory_heatmaps(p, sigma, h, w).grid for p in fut_pos]
        )
        return cls(
            scene=scene,
            windows=list(windows),
            obs_pos=obs_pos,
            fut_pos=fut_pos,
            obs_hm=obs_hm,
            fut_hm=fut_hm,
            goal_hm=fut_hm[:, cfg.t_f - 1],
            wp_hm=fut_hm[:, cfg.t_wp],
        )


@dataclass
class TrainingBatch:
    """Several window batches with equal agent counts, merged for one step.

    Group axis B first, agents A second; goal-net inputs flatten to B*A.
    """

    scene_grids: torch.Tensor  # (B, C_s, H, W)
    obs_pos: torch.Tensor  # (B, A, t_h, 2)
    fut_pos: torch.Tensor  # (B, A, t_f, 2)
    obs_hm: torch.Tensor  # (B, A, t_h, H, W)
    fut_hm: torch.Tensor  # (B, A, t_f, H, W)
    goal_hm: torch.Tensor  # (B, A, H, W)
    wp_hm: torch.Tensor  # (B, A, H, W)

    @classmethod
    def merge(cls, batches: list[WindowBatch]) -> "TrainingBatch":
        if not batches:
            raise InvalidArgumentError("cannot merge zero window batches")
        agents = {b.agents for b in batches}
        if len(agents) != 1:
            raise InvalidArgumentError("merged window batches must share the agent count")
        return cls(
            scene_grids=torch.stack([b.scene.grid for b in batches]),
            obs_pos=torch.stack([b.obs_pos for b in batches]),
            fut_pos=torch.stack([b.fut_pos for b in batches]),
            obs_hm=torch.stack([b.obs_hm for b in batches]),
            fut_hm=torch.stack([b.fut_hm for b in batches]),
            goal_hm=torch.stack([b.goal_hm for b in batches]),
            wp_hm=torch.stack([b.wp_hm for b in batches]),
        )

    @property
    def groups(self) -> int:
        return self.obs_pos.shape[0]

    @property
    def agents(self) -> int:
        return self.obs_pos.shape[1]

    def _flat_scene(self, heatmaps: torch.Tensor) -> torch.Tensor:
        """(B, A, steps, H, W) -> (B*A, C_s + steps, H, W) goal-net input."""
        b, a = heatmaps.shape[:2]
        scene = self.scene_grids[:, None].expand(-1, a, -1, -1, -1)
        flat = torch.cat([scene, heatmaps], dim=2)
        return flat.reshape(b * a, -1, *heatmaps.shape[-2:])


def goal_distill_merged(
    student: GoalNet,
    teacher: GoalNet | None,
    batch: TrainingBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Goal losses over a merged batch (means over all windows)."""
    b, a = batch.groups, batch.agents
    targets = batch.fut_hm.reshape(b * a, cfg.t_f, *batch.fut_hm.shape[-2:])
    student_out = student(batch._flat_scene(batch.obs_hm))
    goal_student = bce(student_out, targets)
    if not distill.enable_gm_distill or teacher is None:
        return goal_student, _zero(), _zero()

    e = distill.extra_steps(cfg)
    fut_hm_flat = batch.fut_hm
    gt_extended = torch.cat([batch.obs_hm, fut_hm_flat[:, :, :e]], dim=2)
    teacher_out = teacher(batch._flat_scene(gt_extended))
    goal_teacher = bce(teacher_out, targets[:, e:])

    student_slice = student_out.reshape(b, a, cfg.t_f, *student_out.shape[-2:])[:, :, :e]
    augmented = torch.cat([batch.obs_hm, student_slice], dim=2)
    if distill.teacher_gradient_from_distill:
        aug_out = teacher(batch._flat_scene(augmented))
    else:
        with frozen_parameters(teacher):
            aug_out = teacher(batch._flat_scene(augmented))
    goal_distill = bce(aug_out, targets[:, e:])
    return goal_student, goal_teacher, goal_distill


def _merged_condition_tokens(net: TemporalNet, batch: TrainingBatch) -> torch.Tensor | None:
    if not net.cfg.use_map_cross_attention:
        return None
    b, a = batch.groups, batch.agents
    scene = batch.scene_grids[:, None].expand(-1, a, -1, -1, -1).reshape(
        b * a, -1, *batch.scene_grids.shape[-2:]
    )
    wp = batch.wp_hm if net.cfg.use_waypoint else torch.zeros_like(batch.wp_hm)
    toks = net.tokenizer.forward_batch(
        scene,
        batch.goal_hm.reshape(b * a, *batch.goal_hm.shape[-2:]),
        wp.reshape(b * a, *wp.shape[-2:]),
    )
    return toks.reshape(b, a, toks.shape[-2], toks.shape[-1])


def traj_distill_merged(
    student: TemporalNet,
    teacher: TemporalNet | None,
    batch: TrainingBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Temporal losses over a merged batch (teacher-forced passes)."""
    goal = batch.fut_pos[:, :, cfg.t_f - 1]
    waypoint = batch.fut_pos[:, :, cfg.t_wp]
    positions = torch.cat([batch.obs_pos, batch.fut_pos], dim=2)

    cond_s = _merged_condition_tokens(student, batch)
    pred_s = student.predict_teacher_forced(positions, cfg.t_h, cond_s, goal, waypoint)
    traj_student = ((pred_s - batch.fut_pos) ** 2).sum(dim=-1).mean()
    if not distill.enable_tm_distill or teacher is None:
        return traj_student, _zero(), _zero()

    e = distill.extra_steps(cfg)
    cond_t = _merged_condition_tokens(teacher, batch)
    pred_t = teacher.predict_teacher_forced(positions, cfg.t_h + e, cond_t, goal, waypoint)
    traj_teacher = ((pred_t - batch.fut_pos[:, :, e:]) ** 2).sum(dim=-1).mean()

    teacher_side = pred_t if distill.teacher_gradient_from_distill else pred_t.detach()
    traj_distill = ((teacher_side - pred_s[:, :, e:]) ** 2).sum(dim=-1).mean()
    return traj_student, traj_teacher, traj_distill


def distill_training_step_merged(
    models: "ModelBundle",
    batch: TrainingBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> LossBundle:
    gs, gt, gd = goal_distill_merged(models.student_goal, models.teacher_goal, batch, cfg, distill)
    ts, tt, td = traj_distill_merged(models.student_traj, models.teacher_traj, batch, cfg, distill)
    return total_loss(gs, gt, gd, ts, tt, td, distill)


@contextmanager
def frozen_parameters(module: torch.nn.Module):
    """Temporarily stop gradients from reaching ``module``'s parameters.

    Gradients still flow through the module to its *inputs*.
    """
    states = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in states:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, state in states:
            p.requires_grad_(state)


def _zero() -> torch.Tensor:
    return torch.zeros(())


def _scene_input(scene: SceneMap, heatmaps: torch.Tensor) -> torch.Tensor:
    """(A, steps, H, W) heatmaps -> (A, C_s + steps, H, W) network input."""
    a = heatmaps.shape[0]
    scene_grid = scene.grid.to(heatmaps.dtype).unsqueeze(0).expand(a, -1, -1, -1)
    return torch.cat([scene_grid, heatmaps], dim=1)


def goal_distill_batch(
    student: GoalNet,
    teacher: GoalNet | None,
    batch: WindowBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Goal-module losses for one batch.

    Returns (goal_student, goal_teacher, goal_distill, student_prediction).
    With gm distillation disabled the teacher terms are exactly 0 and the
    teacher never runs.
    """
    targets = batch.fut_hm
    student_out = student(_scene_input(batch.scene, batch.obs_hm))
    goal_student = bce(student_out, targets)
    if not distill.enable_gm_distill or teacher is None:
        return goal_student, _zero(), _zero(), student_out

    e = distill.extra_steps(cfg)
    gt_extended = torch.cat([batch.obs_hm, targets[:, :e]], dim=1)
    teacher_out = teacher(_scene_input(batch.scene, gt_extended))
    goal_teacher = bce(teacher_out, targets[:, e:])

    augmented = torch.cat([batch.obs_hm, student_out[:, :e]], dim=1)
    if distill.teacher_gradient_from_distill:
        aug_out = teacher(_scene_input(batch.scene, augmented))
    else:
        with frozen_parameters(teacher):
            aug_out = teacher(_scene_input(batch.scene, augmented))
    goal_distill = bce(aug_out, targets[:, e:])
    return goal_student, goal_teacher, goal_distill, student_out


def goal_distill_step(
    student: GoalNet,
    teacher: GoalNet | None,
    scene: SceneMap,
    window: TrajectoryWindow,
    cfg: TimeConfig,
    distill: DistillConfig,
    sigma: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-window goal distillation (see :func:`goal_distill_batch`)."""
    sigma = sigma if sigma is not None else student.cfg.sigma
    batch = WindowBatch.build(scene, [window], cfg, sigma)
    gs, gt, gd, _ = goal_distill_batch(student, teacher, batch, cfg, distill)
    return gs, gt, gd


def _condition_tokens(net: TemporalNet, batch: WindowBatch) -> torch.Tensor | None:
    """(1, A, N, d) condition tokens for teacher-forced training.

    Training conditions on the ground-truth goal/waypoint; the waypoint
    channel is zeroed when the waypoint pathway is ablated.
    """
    if not net.cfg.use_map_cross_attention:
        return None
    toks = []
    for a in range(batch.agents):
        wp = batch.wp_hm[a] if net.cfg.use_waypoint else torch.zeros_like(batch.wp_hm[a])
        toks.append(net.tokenizer(batch.scene.grid, batch.goal_hm[a], wp))
    return torch.stack(toks).unsqueeze(0)


def traj_distill_batch(
    student: TemporalNet,
    teacher: TemporalNet | None,
    batch: WindowBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Temporal-module losses for one batch (teacher-forced passes).

    The teacher observes ground-truth positions for the extended window
    (t_h + extra steps) and predicts the remaining horizon.
    """
    goal = batch.fut_pos[:, cfg.t_f - 1].unsqueeze(0)
    waypoint = batch.fut_pos[:, cfg.t_wp].unsqueeze(0)
    positions = torch.cat([batch.obs_pos, batch.fut_pos], dim=1).unsqueeze(0)

    cond_s = _condition_tokens(student, batch)
    pred_s = student.predict_teacher_forced(positions, cfg.t_h, cond_s, goal, waypoint)
    traj_student = ((pred_s - batch.fut_pos.unsqueeze(0)) ** 2).sum(dim=-1).mean()
    if not distill.enable_tm_distill or teacher is None:
        return traj_student, _zero(), _zero()

    e = distill.extra_steps(cfg)
    cond_t = _condition_tokens(teacher, batch)
    pred_t = teacher.predict_teacher_forced(positions, cfg.t_h + e, cond_t, goal, waypoint)
    tail = batch.fut_pos[:, e:].unsqueeze(0)
    traj_teacher = ((pred_t - tail) ** 2).sum(dim=-1).mean()

    teacher_side = pred_t if distill.teacher_gradient_from_distill else pred_t.detach()
    traj_distill = ((teacher_side - pred_s[:, :, e:]) ** 2).sum(dim=-1).mean()
    return traj_student, traj_teacher, traj_distill


def traj_distill_step(
    student: TemporalNet,
    teacher: TemporalNet | None,
    scene: SceneMap,
    window: TrajectoryWindow,
    cfg: TimeConfig,
    distill: DistillConfig,
    sigma: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-window temporal distillation (see :func:`traj_distill_batch`)."""
    sigma = sigma if sigma is not None else student.cfg.sigma
    batch = WindowBatch.build(scene, [window], cfg, sigma)
    return traj_distill_batch(student, teacher, batch, cfg, distill)


def total_loss(
    goal_student,
    goal_teacher,
    goal_distill,
    traj_student,
    traj_teacher,
    traj_distill,
    distill: DistillConfig,
) -> LossBundle:
    """Combine the six terms into the weighted training objective."""
    terms = {
        "goal_student": goal_student,
        "goal_teacher": goal_teacher,
        "goal_distill": goal_distill,
        "traj_student": traj_student,
        "traj_teacher": traj_teacher,
        "traj_distill": traj_distill,
    }
    for name, value in terms.items():
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericalError(f"loss component {name} is non-finite: {scalar}")
    return LossBundle(lam=distill.lam, **terms)


def distill_training_step(
    models: ModelBundle,
    batch: WindowBatch,
    cfg: TimeConfig,
    distill: DistillConfig,
) -> LossBundle:
    """All forward passes and the Loss assembly for one batch."""
    gs, gt, gd, _ = goal_distill_batch(
        models.student_goal, models.teacher_goal, batch, cfg, distill
    )
    ts, tt, td = traj_distill_batch(
        models.student_traj, models.teacher_traj, batch, cfg, distill
    )
    return total_loss(gs, gt, gd, ts, tt, td, distill)
