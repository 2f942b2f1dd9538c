"""Encoder-decoder heatmap network for goal/waypoint prediction.

The network consumes the scene raster channel-stacked with per-step
observation heatmaps and emits one sigmoid heatmap per future step.  The
same class serves as student (short observation, full-horizon output) and
teacher (extended observation, tail-horizon output); the two instances
never share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import (
    STUDENT,
    TEACHER_AUGMENTED,
    TEACHER_GT_FED,
    HeatmapStack,
    SceneMap,
    TimeConfig,
    render_gaussian_heatmap,
)
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class GoalNetConfig:
    in_steps: int
    out_steps: int
    scene_channels: int = 6
    depth: int = 4
    base_width: int = 32
    sigma: float = 4.0

    def __post_init__(self):
        if self.in_steps < 1 or self.out_steps < 1:
            raise InvalidArgumentError("in_steps and out_steps must be >= 1")
        if self.depth < 1:
            raise InvalidArgumentError("depth must be >= 1")
        if self.base_width < 1:
            raise InvalidArgumentError("base_width must be >= 1")
        if self.sigma <= 0:
            raise InvalidArgumentError("sigma must be positive")


@dataclass
class GoalSampleSet:
    """K sampled goals with their conditioned waypoints and log-scores."""

    goals: torch.Tensor  # (k, 2)
    waypoints: torch.Tensor  # (k, 2)
    per_sample_log_score: torch.Tensor  # (k,)

    @property
    def k(self) -> int:
        return self.goals.shape[0]


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.net(x)


class GoalNet(nn.Module):
    """Symmetric encoder-decoder with skip connections and a sigmoid head.

    Channel widths double per level from ``base_width``; input is
    (B, scene_channels + in_steps, H, W) with H, W divisible by 2**depth.
    """

    def __init__(self, cfg: GoalNetConfig, role: str = "student"):
        super().__init__()
        if role not in ("student", "teacher"):
            raise InvalidArgumentError(f"goal net role must be student or teacher, got {role!r}")
        self.cfg = cfg
        self.role = role
        widths = [cfg.base_width * (2 ** i) for i in range(cfg.depth + 1)]

        self.inc = _ConvBlock(cfg.scene_channels + cfg.in_steps, widths[0])
        self.downs = nn.ModuleList(
            _ConvBlock(widths[i], widths[i + 1]) for i in range(cfg.depth)
        )
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2)
            for i in reversed(range(cfg.depth))
        )
        self.dec = nn.ModuleList(
            _ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(widths[0], cfg.out_steps, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise InvalidArgumentError("goal net input must be (B, C, H, W)")
        if x.shape[1] != self.cfg.scene_channels + self.cfg.in_steps:
            raise InvalidArgumentError(
                f"expected {self.cfg.scene_channels + self.cfg.in_steps} input channels, "
                f"got {x.shape[1]}"
            )
        div = 2 ** self.cfg.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise InvalidArgumentError(
                f"H and W must be divisible by 2**depth={div}, got {tuple(x.shape[2:])}"
            )
        skips = []
        h = self.inc(x)
        for down in self.downs:
            skips.append(h)
            h = down(self.pool(h))
        for up, dec, skip in zip(self.ups, self.dec, reversed(skips)):
            h = dec(torch.cat([up(h), skip], dim=1))
        return torch.sigmoid(self.head(h))


def goal_forward(net: GoalNet, scene: SceneMap, observed_heatmaps: HeatmapStack) -> HeatmapStack:
    """Predict per-future-step heatmaps for one agent.

    Output cells are strictly in (0, 1) and differentiable w.r.t. both the
    network parameters and the observation heatmaps.
    """
    cfg = net.cfg
    if observed_heatmaps.steps != cfg.in_steps:
        raise InvalidArgumentError(
            f"expected {cfg.in_steps} observation steps, got {observed_heatmaps.steps}"
        )
    if scene.channels != cfg.scene_channels:
        raise InvalidArgumentError(
            f"expected {cfg.scene_channels} scene channels, got {scene.channels}"
        )
    if scene.grid.shape[1:] != observed_heatmaps.grid.shape[1:]:
        raise InvalidArgumentError("scene and observation heatmaps must share H x W")
    x = torch.cat([scene.grid.to(observed_heatmaps.grid.dtype), observed_heatmaps.grid])
    out = net(x.unsqueeze(0)).squeeze(0)
    if net.role == "student":
        provenance = STUDENT
    elif observed_heatmaps.provenance == TEACHER_AUGMENTED:
        provenance = TEACHER_AUGMENTED
    else:
        provenance = TEACHER_GT_FED
    return HeatmapStack(grid=out, provenance=provenance)


def build_augmented_teacher_input(
    gt_observation: HeatmapStack,
    student_output: HeatmapStack,
    cfg: TimeConfig,
    extra_steps: int | None = None,
) -> HeatmapStack:
    """Concatenate the ground-truth observation with the student's first
    ``extra_steps`` predicted heatmaps (default: t_wp, the half split).

    The student slice keeps its autograd history, so the teacher loss on
    this input back-propagates into the student.
    """
    if extra_steps is None:
        if not cfg.is_symmetric_split:
            raise InvalidArgumentError(
                f"augmented input requires t_f == 2*t_wp, got t_f={cfg.t_f} t_wp={cfg.t_wp}"
            )
        extra_steps = cfg.t_wp
    if not 1 <= extra_steps <= student_output.steps:
        raise InvalidArgumentError(
            f"extra_steps must lie in [1, {student_output.steps}], got {extra_steps}"
        )
    if student_output.steps != cfg.t_f:
        raise InvalidArgumentError(
            f"student output must have t_f={cfg.t_f} steps, got {student_output.steps}"
        )
    if gt_observation.steps != cfg.t_h:
        raise InvalidArgumentError(
            f"ground-truth observation must have t_h={cfg.t_h} steps, got {gt_observation.steps}"
        )
    grid = torch.cat([gt_observation.grid, student_output.grid[:extra_steps]])
    return HeatmapStack(grid=grid, provenance=TEACHER_AUGMENTED)


def sample_goals(
    pred: HeatmapStack,
    k: int,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    step: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw k goal positions from the softmax over the final-step heatmap.

    Returns ((k, 2) positions, (k,) log-probabilities).  Deterministic under
    a seeded ``generator``.
    """
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if temperature <= 0:
        raise InvalidArgumentError("temperature must be positive")
    grid = pred.grid[pred.steps - 1 if step is None else step]
    h, w = grid.shape
    logits = grid.detach().double().flatten() / temperature
    log_probs = torch.log_softmax(logits, dim=0)
    probs = log_probs.exp()
    # one draw per sample: a seeded k-sample run extends the same seed's
    # (k-1)-sample run, which keeps best-of-k metrics monotone in k
    idx = torch.cat(
        [torch.multinomial(probs, 1, replacement=True, generator=generator) for _ in range(k)]
    )
    ys = (idx // w).to(torch.float32)
    xs = (idx % w).to(torch.float32)
    return torch.stack([xs, ys], dim=-1), log_probs[idx]


def condition_waypoint(
    pred: HeatmapStack,
    goal,
    last_observed,
    cfg: TimeConfig,
    prior_sigma: float = 8.0,
) -> torch.Tensor:
    """Pick the waypoint cell maximizing heatmap[t_wp] * Gaussian prior.

    The prior is centered on the midpoint of the straight segment from the
    last observed position to the sampled goal.
    """
    if cfg.t_wp >= pred.steps:
        raise InvalidArgumentError(
            f"waypoint step {cfg.t_wp} out of range for a {pred.steps}-step stack"
        )
    if prior_sigma <= 0:
        raise InvalidArgumentError("prior_sigma must be positive")
    grid = pred.grid[cfg.t_wp].detach()
    h, w = grid.shape
    mid = (
        0.5 * (float(last_observed[0]) + float(goal[0])),
        0.5 * (float(last_observed[1]) + float(goal[1])),
    )
    prior = render_gaussian_heatmap(mid, prior_sigma, h, w, dtype=grid.dtype)
    flat = int((grid * prior).argmax())
    iy, ix = divmod(flat, w)
    return torch.tensor([float(ix), float(iy)], dtype=torch.float32)


def sample_goal_set(
    pred: HeatmapStack,
    k: int,
    last_observed,
    cfg: TimeConfig,
    temperature: float = 1.0,
    prior_sigma: float = 8.0,
    generator: torch.Generator | None = None,
    goal_step: int | None = None,
    waypoint_from_goal: bool = False,
) -> GoalSampleSet:
    """Sample k goals and condition one waypoint on each.

    ``waypoint_from_goal`` short-circuits conditioning (waypoint := goal),
    used when the waypoint pathway is ablated.
    """
    goals, log_scores = sample_goals(pred, k, temperature, generator=generator, step=goal_step)
    if waypoint_from_goal or cfg.t_wp >= pred.steps:
        waypoints = goals.clone()
    else:
        waypoints = torch.stack(
            [condition_waypoint(pred, g, last_observed, cfg, prior_sigma) for g in goals]
        )
    return GoalSampleSet(goals=goals, waypoints=waypoints, per_sample_log_score=log_scores)
