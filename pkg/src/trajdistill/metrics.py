"""Best-of-K displacement metrics and horizon/teacher-length sweeps.

ADE/FDE minima over the K samples are taken independently (the best-ADE
sample and the best-FDE sample may differ).  Metrics are computed in
working-resolution pixels; ``pixel_scale`` converts reports back to
source-dataset pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .core import (
    STUDENT,
    HeatmapStack,
    TimeConfig,
    render_gaussian_heatmap,
    render_trajectory_heatmaps,
)
from .distillation import ModelBundle
from .errors import EmptySplitError, InvalidArgumentError
from .goalnet import condition_waypoint, sample_goals

KD_DEFAULT_SAMPLES = 20


@dataclass
class EvalReport:
    min_ade: float
    min_fde: float
    k: int
    n_windows: int
    per_horizon: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be >= 1")
        if self.min_ade < 0 or self.min_fde < 0:
            raise InvalidArgumentError("displacement errors cannot be negative")

    def to_kv(self, path):
        lines = [
            f"min_ade={self.min_ade!r}",
            f"min_fde={self.min_fde!r}",
            f"k={self.k}",
            f"n_windows={self.n_windows}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    def to_csv(self, path):
        lines = ["horizon,ade,fde"]
        rows = self.per_horizon or [(-1, self.min_ade, self.min_fde)]
        for horizon, ade, fde in rows:
            lines.append(f"{horizon},{ade!r},{fde!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def min_ade_fde(samples, gt) -> tuple[float, float]:
    """Best-of-K average and final displacement errors, minimized independently.

    samples: (K, T, 2); gt: (T, 2).
    """
    samples = torch.as_tensor(samples, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise InvalidArgumentError("samples must be (K >= 1, T, 2)")
    if samples.shape[1:] != gt.shape:
        raise InvalidArgumentError(
            f"sample length {tuple(samples.shape[1:])} does not match gt {tuple(gt.shape)}"
        )
    dists = ((samples - gt[None]) ** 2).sum(dim=-1).sqrt()  # (K, T)
    ade = dists.mean(dim=1)
    fde = dists[:, -1]
    return float(ade.min()), float(fde.min())


class ConstantVelocityPredictor:
    """Extrapolates the last observed displacement; all K samples identical."""

    def predict(self, scene, windows, cfg, k, horizon, generator=None):
        obs = torch.stack([w.observed for w in windows]).float()  # (A, t_h, 2)
        if obs.shape[1] >= 2:
            vel = obs[:, -1] - obs[:, -2]
        else:
            vel = torch.zeros(obs.shape[0], 2)
        steps = torch.arange(1, horizon + 1, dtype=obs.dtype)
        pred = obs[:, -1][:, None, :] + steps[None, :, None] * vel[:, None, :]
        return pred[None].expand(k, -1, -1, -1)  # (k, A, horizon, 2)


class StudentPredictor:
    """Samples goals from the student goal net, conditions waypoints, and
    rolls out the student temporal net; the evaluation pathway."""

    def __init__(
        self,
        models: ModelBundle,
        sigma: float = 4.0,
        temperature: float = 1.0,
        prior_sigma: float = 8.0,
        use_waypoint: bool = True,
    ):
        self.models = models
        self.sigma = sigma
        self.temperature = temperature
        self.prior_sigma = prior_sigma
        self.use_waypoint = use_waypoint

    @torch.no_grad()
    def predict(self, scene, windows, cfg: TimeConfig, k, horizon, generator=None):
        goal_net = self.models.student_goal
        traj_net = self.models.student_traj
        goal_net.eval()
        traj_net.eval()
        h, w = scene.height, scene.width
        agents = len(windows)
        obs_pos = torch.stack([win.observed for win in windows]).float()
        obs_hm = torch.stack(
            [render_trajectory_heatmaps(p, self.sigma, h, w).grid for p in obs_pos]
        )
        scene_in = scene.grid.unsqueeze(0).expand(agents, -1, -1, -1)
        heat = goal_net(torch.cat([scene_in, obs_hm], dim=1))  # (A, t_f, H, W)

        goal_step = min(horizon, heat.shape[1]) - 1
        wp_step = cfg.t_wp if cfg.t_wp < horizon else max(1, horizon // 2)
        wp_step = min(wp_step, heat.shape[1] - 1)

        goals = torch.zeros(k, agents, 2)
        waypoints = torch.zeros(k, agents, 2)
        for a in range(agents):
            stack = HeatmapStack(grid=heat[a], provenance=STUDENT)
            g, _ = sample_goals(stack, k, self.temperature, generator=generator, step=goal_step)
            goals[:, a] = g
            if self.use_waypoint:
                wp_cfg = TimeConfig(t_h=cfg.t_h, t_wp=wp_step, t_f=heat.shape[1])
                for s in range(k):
                    waypoints[s, a] = condition_waypoint(
                        stack, g[s], obs_pos[a, -1], wp_cfg, self.prior_sigma
                    )
            else:
                waypoints[:, a] = g

        cond = None
        if traj_net.cfg.use_map_cross_attention:
            toks = []
            for s in range(k):
                for a in range(agents):
                    goal_hm = render_gaussian_heatmap(goals[s, a], self.sigma, h, w)
                    if traj_net.cfg.use_waypoint:
                        wp_hm = render_gaussian_heatmap(waypoints[s, a], self.sigma, h, w)
                    else:
                        wp_hm = torch.zeros(h, w)
                    toks.append(traj_net.tokenizer(scene.grid, goal_hm, wp_hm))
            cond = torch.stack(toks).reshape(k, agents, -1, traj_net.cfg.d_model)

        observed = obs_pos.unsqueeze(0).expand(k, -1, -1, -1)
        wp = waypoints if self.use_waypoint else None
        return traj_net.rollout(observed, cond, goals, wp, horizon)


def evaluate(
    predictor,
    groups,
    scenes,
    cfg: TimeConfig,
    k: int = KD_DEFAULT_SAMPLES,
    seed: int = 0,
    horizon: int | None = None,
    pixel_scale: float = 1.0,
) -> EvalReport:
    """Best-of-K metrics over all windows of a split; seed-deterministic."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not groups:
        raise EmptySplitError("evaluation split contains no windows")
    horizon = horizon or cfg.t_f
    generator = torch.Generator().manual_seed(seed)
    ades, fdes = [], []
    for group in groups:
        scene = scenes[group.scene_id]
        pred = predictor.predict(scene, group.windows, cfg, k, horizon, generator=generator)
        for a, window in enumerate(group.windows):
            gt = window.future[:horizon].double()
            ade, fde = min_ade_fde(pred[:, a].double(), gt)
            ades.append(ade)
            fdes.append(fde)
    n = len(ades)
    return EvalReport(
        min_ade=pixel_scale * sum(ades) / n,
        min_fde=pixel_scale * sum(fdes) / n,
        k=k,
        n_windows=n,
    )


def horizon_sweep(
    predictor,
    recordings,
    scenes,
    base_cfg: TimeConfig,
    horizons,
    k: int = KD_DEFAULT_SAMPLES,
    seed: int = 0,
    stride_frames: int = 1,
    window_stride: int | None = None,
) -> tuple[list[tuple[int, float, float]], list[str]]:
    """Evaluate at each horizon with windows re-cut for that horizon.

    Returns (sorted table rows, warnings for skipped horizons).
    """
    from .dataio import cut_windows, group_windows

    rows = []
    warnings = []
    for h in sorted(set(int(h) for h in horizons)):
        if h < 2:
            warnings.append(f"horizon {h} skipped: needs at least 2 steps")
            continue
        cfg_h = TimeConfig(
            t_h=base_cfg.t_h,
            t_wp=min(base_cfg.t_wp, max(1, h // 2)),
            t_f=h,
            stride_seconds=base_cfg.stride_seconds,
        )
        groups = []
        for rec in recordings:
            windows = cut_windows(rec, cfg_h, stride_frames=stride_frames, window_stride=window_stride)
            groups.extend(group_windows(windows))
        if not groups:
            warnings.append(f"horizon {h} skipped: no window spans it")
            continue
        report = evaluate(predictor, groups, scenes, cfg_h, k=k, seed=seed, horizon=h)
        rows.append((h, report.min_ade, report.min_fde))
    return rows, warnings


def write_horizon_table(rows, path):
    lines = ["horizon,ade,fde"]
    for h, ade, fde in rows:
        lines.append(f"{h},{ade!r},{fde!r}")
    Path(path).write_text("\n".join(lines) + "\n")
