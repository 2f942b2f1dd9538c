"""Shared domain types, Gaussian-heatmap primitives, patchification, and loss kernels.

Conventions used everywhere in the package:
  - positions are (x, y) pixel coordinates, float valued;
  - 2-D grids are indexed grid[y, x] (row-major, H x W);
  - stacks of grids are (T, H, W), scene rasters are (C, H, W).
All operations here are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import InvalidArgumentError

BCE_EPS = 1e-6

# provenance tags for heatmap stacks
GROUND_TRUTH = "ground-truth"
STUDENT = "student"
TEACHER_GT_FED = "teacher-gt-fed"
TEACHER_AUGMENTED = "teacher-augmented"

PROVENANCES = (GROUND_TRUTH, STUDENT, TEACHER_GT_FED, TEACHER_AUGMENTED)


@dataclass(frozen=True)
class TimeConfig:
    """Horizon layout: observed steps, waypoint index, predicted steps.

    ``t_wp`` indexes into the prediction range [0, t_f); the long-term
    default splits the prediction exactly in half (t_f == 2 * t_wp).
    """

    t_h: int = 5
    t_wp: int = 15
    t_f: int = 30
    stride_seconds: float = 1.0

    def __post_init__(self):
        if self.t_h < 1:
            raise InvalidArgumentError(f"t_h must be >= 1, got {self.t_h}")
        if self.t_f < 2:
            raise InvalidArgumentError(f"t_f must be >= 2, got {self.t_f}")
        if not 1 <= self.t_wp < self.t_f:
            raise InvalidArgumentError(
                f"t_wp must satisfy 1 <= t_wp < t_f, got t_wp={self.t_wp} t_f={self.t_f}"
            )
        if self.stride_seconds <= 0:
            raise InvalidArgumentError("stride_seconds must be positive")

    @property
    def window_steps(self) -> int:
        return self.t_h + self.t_f

    @property
    def is_symmetric_split(self) -> bool:
        """True when the prediction halves exactly at the waypoint."""
        return self.t_f == 2 * self.t_wp


@dataclass
class TrajectoryWindow:
    """One agent's observed + future ground-truth positions.

    ``observed`` is (t_h, 2) and ``future`` is (t_f, 2), both (x, y) pixel
    coordinates at the working resolution of the owning scene map.
    """

    scene_id: str
    agent_id: str
    observed: torch.Tensor
    future: torch.Tensor
    frame_start: int = 0

    def __post_init__(self):
        # coordinates stay in the source precision; the cast to model dtype
        # happens at batch assembly
        self.observed = torch.as_tensor(self.observed)
        self.future = torch.as_tensor(self.future)
        if not self.observed.is_floating_point():
            self.observed = self.observed.float()
        if not self.future.is_floating_point():
            self.future = self.future.float()
        if self.observed.ndim != 2 or self.observed.shape[-1] != 2:
            raise InvalidArgumentError("observed must have shape (t_h, 2)")
        if self.future.ndim != 2 or self.future.shape[-1] != 2:
            raise InvalidArgumentError("future must have shape (t_f, 2)")

    def matches(self, cfg: TimeConfig) -> bool:
        return len(self.observed) == cfg.t_h and len(self.future) == cfg.t_f

    def scaled(self, sx: float, sy: float) -> "TrajectoryWindow":
        scale = torch.tensor([sx, sy], dtype=self.observed.dtype)
        return TrajectoryWindow(
            scene_id=self.scene_id,
            agent_id=self.agent_id,
            observed=self.observed * scale,
            future=self.future * scale,
            frame_start=self.frame_start,
        )


@dataclass
class SceneMap:
    """Multi-channel semantic raster for one scene.

    ``grid`` is (channels, H, W) with every cell in [0, 1].  ``coord_scale``
    is the (sx, sy) factor that maps source-pixel coordinates onto this
    raster's working resolution (1.0 when no resize happened).
    """

    scene_id: str
    grid: torch.Tensor
    pixels_per_meter: float = 1.0
    coord_scale: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.grid = torch.as_tensor(self.grid, dtype=torch.float32)
        if self.grid.ndim != 3:
            raise InvalidArgumentError("scene grid must be (channels, H, W)")
        if self.grid.numel() and (self.grid.min() < 0 or self.grid.max() > 1):
            raise InvalidArgumentError("scene grid cells must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    @property
    def width(self) -> int:
        return self.grid.shape[2]


@dataclass
class HeatmapStack:
    """Per-timestep 2-D grids in [0, 1] with a provenance tag.

    ``grid`` is (T, H, W).  Model-produced stacks keep their autograd
    history; ground-truth stacks are plain rendered tensors whose per-step
    maximum is exactly 1 at the rendered center pixel.
    """

    grid: torch.Tensor
    provenance: str = GROUND_TRUTH

    def __post_init__(self):
        if not isinstance(self.grid, torch.Tensor):
            self.grid = torch.as_tensor(self.grid, dtype=torch.float32)
        if self.grid.ndim != 3:
            raise InvalidArgumentError("heatmap stack grid must be (T, H, W)")
        if self.grid.shape[0] < 1:
            raise InvalidArgumentError("heatmap stack needs at least one step")
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")

    @property
    def steps(self) -> int:
        return self.grid.shape[0]

    @property
    def height(self) -> int:
        return self.grid.shape[1]

    @property
    def width(self) -> int:
        return self.grid.shape[2]


@dataclass
class LossBundle:
    """The six named loss terms plus their weighted total.

    total = (goal_student + goal_teacher + goal_distill)
            + lam * (traj_student + traj_teacher + traj_distill)
    """

    goal_student: torch.Tensor
    goal_teacher: torch.Tensor
    goal_distill: torch.Tensor
    traj_student: torch.Tensor
    traj_teacher: torch.Tensor
    traj_distill: torch.Tensor
    lam: float = 1.0
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.goal_total + self.lam * self.traj_total

    @property
    def goal_total(self) -> torch.Tensor:
        return self.goal_student + self.goal_teacher + self.goal_distill

    @property
    def traj_total(self) -> torch.Tensor:
        return self.traj_student + self.traj_teacher + self.traj_distill

    COMPONENTS = (
        "goal_student",
        "goal_teacher",
        "goal_distill",
        "traj_student",
        "traj_teacher",
        "traj_distill",
    )

    def as_dict(self) -> dict[str, float]:
        def scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        out = {name: scalar(getattr(self, name)) for name in self.COMPONENTS}
        out["total"] = scalar(self.total)
        return out


def render_gaussian_heatmap(
    center,
    sigma: float,
    height: int,
    width: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Render an unnormalized Gaussian bump centered at ``center`` = (x, y).

    grid[i, j] = exp(-((i - cy)^2 + (j - cx)^2) / (2 sigma^2)); peak value is
    1 when the center sits on a pixel.  The center may be fractional and may
    lie outside the grid (only the clipped tail is rendered).
    """
    if sigma <= 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    if height < 1 or width < 1:
        raise InvalidArgumentError("height and width must be >= 1")
    cx, cy = float(center[0]), float(center[1])
    ys = torch.arange(height, dtype=dtype)
    xs = torch.arange(width, dtype=dtype)
    dy2 = (ys - cy) ** 2
    dx2 = (xs - cx) ** 2
    return torch.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma))


def render_trajectory_heatmaps(
    positions,
    sigma: float,
    height: int,
    width: int,
    dtype: torch.dtype = torch.float32,
) -> HeatmapStack:
    """Render one Gaussian grid per position; provenance is ground-truth."""
    positions = torch.as_tensor(positions, dtype=torch.get_default_dtype())
    if positions.ndim != 2 or positions.shape[-1] != 2 or positions.shape[0] == 0:
        raise InvalidArgumentError("positions must be a non-empty (T, 2) sequence")
    grids = torch.stack(
        [render_gaussian_heatmap(p, sigma, height, width, dtype=dtype) for p in positions]
    )
    return HeatmapStack(grid=grids, provenance=GROUND_TRUTH)


def patchify(grid: torch.Tensor, patch: int) -> torch.Tensor:
    """Split a (C, H, W) raster into row-major flat patch vectors.

    Returns (H/patch * W/patch, C * patch**2); each vector is its patch's
    cells in (channel, row, col) order.  Lossless: see ``unpatchify``.
    """
    if grid.ndim != 3:
        raise InvalidArgumentError("grid must be (C, H, W)")
    c, h, w = grid.shape
    if patch < 1 or h % patch or w % patch:
        raise InvalidArgumentError(
            f"patch size {patch} must divide H={h} and W={w}"
        )
    gh, gw = h // patch, w // patch
    # (C, gh, p, gw, p) -> (gh, gw, C, p, p) -> (gh*gw, C*p*p)
    tiles = grid.reshape(c, gh, patch, gw, patch).permute(1, 3, 0, 2, 4)
    return tiles.reshape(gh * gw, c * patch * patch)


def unpatchify(tokens: torch.Tensor, channels: int, height: int, width: int, patch: int) -> torch.Tensor:
    """Inverse of ``patchify``: reassemble (C, H, W) from flat patch vectors."""
    gh, gw = height // patch, width // patch
    if tokens.shape != (gh * gw, channels * patch * patch):
        raise InvalidArgumentError("token shape does not match the target raster")
    tiles = tokens.reshape(gh, gw, channels, patch, patch).permute(2, 0, 3, 1, 4)
    return tiles.reshape(channels, height, width)


def bce(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over cells.

    Predictions are clamped to [eps, 1-eps] (eps = 1e-6) before the log.
    """
    if prediction.shape != target.shape:
        raise InvalidArgumentError(
            f"shape mismatch: prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}"
        )
    p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def mse_trajectory(pred, gt) -> torch.Tensor:
    """Mean over steps of the squared Euclidean displacement."""
    pred = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(pred)
    gt = gt if isinstance(gt, torch.Tensor) else torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[-1] != 2 or pred.shape[0] < 1:
        raise InvalidArgumentError(
            f"pred and gt must be equal-length (T, 2) sequences, got {tuple(pred.shape)} vs {tuple(gt.shape)}"
        )
    return ((pred - gt) ** 2).sum(dim=-1).mean()
