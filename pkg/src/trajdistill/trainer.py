"""Joint student/teacher optimization with checkpointing and run configs.

One optimizer covers every *trainable* parameter group: the student nets
always train; each teacher net trains only while its distillation loss is
enabled, which keeps teacher parameters bit-identical under the
no-distillation ablation.  Seeding covers parameter init, data shuffling,
goal sampling, and validation, so identical configs reproduce identical
loss curves.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .core import TimeConfig
from .dataio import SceneDataset
from .distillation import (
    DistillConfig,
    ModelBundle,
    TrainingBatch,
    WindowBatch,
    distill_training_step_merged,
)
from .errors import ConfigMismatchError, InvalidArgumentError
from .goalnet import GoalNet, GoalNetConfig
from .metrics import StudentPredictor, evaluate
from .temporalnet import TemporalNet, TemporalNetConfig

LOG_COLUMNS = (
    "epoch",
    "goal_student",
    "goal_teacher",
    "goal_distill",
    "traj_student",
    "traj_teacher",
    "traj_distill",
    "total",
    "val_min_ade",
    "val_min_fde",
)


@dataclass(frozen=True)
class AblationFlags:
    """The six component toggles of the ablation grid."""

    map: bool = True
    waypoint: bool = True
    social: bool = True
    gw_hm: bool = True
    gm_distill: bool = True
    tm_distill: bool = True

    NAMES = ("map", "waypoint", "social", "gw_hm", "gm_distill", "tm_distill")

    @classmethod
    def from_enabled(cls, enabled) -> "AblationFlags":
        enabled = set(enabled)
        unknown = enabled - set(cls.NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown ablation toggles: {sorted(unknown)}")
        return cls(**{name: name in enabled for name in cls.NAMES})

    def enabled_names(self) -> list[str]:
        return [name for name in self.NAMES if getattr(self, name)]


@dataclass
class RunConfig:
    time: TimeConfig = field(default_factory=TimeConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    # distillation
    lam: float = 1.0
    teacher_gradient_from_distill: bool = True
    teacher_extra_steps: int | None = None
    # goal net
    goal_depth: int = 2
    goal_base_width: int = 16
    sigma: float = 2.0
    # temporal net
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    patch: int = 8
    dropout: float = 0.0
    # data / raster
    scene_channels: int = 6
    working_size: int = 48
    window_stride: int | None = None
    # optimization
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    # evaluation
    prior_sigma: float = 6.0
    temperature: float = 1.0
    val_k: int = 3
    test_k: int = 20
    val_every: int = 1
    pixel_scale: float = 1.0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and epochs >= 0")
        if self.working_size % self.patch:
            raise InvalidArgumentError("working_size must be divisible by patch")
        if self.working_size % (2 ** self.goal_depth):
            raise InvalidArgumentError("working_size must be divisible by 2**goal_depth")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")

    # -- derived configs ---------------------------------------------------
    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            lam=self.lam,
            enable_gm_distill=self.ablation.gm_distill,
            enable_tm_distill=self.ablation.tm_distill,
            teacher_gradient_from_distill=self.teacher_gradient_from_distill,
            teacher_extra_steps=self.teacher_extra_steps,
        )

    def extra_steps(self) -> int:
        return self.distill_config().extra_steps(self.time)

    def goal_config(self, role: str) -> GoalNetConfig:
        e = self.extra_steps()
        if role == "student":
            in_steps, out_steps = self.time.t_h, self.time.t_f
        else:
            in_steps, out_steps = self.time.t_h + e, self.time.t_f - e
        return GoalNetConfig(
            in_steps=in_steps,
            out_steps=out_steps,
            scene_channels=self.scene_channels,
            depth=self.goal_depth,
            base_width=self.goal_base_width,
            sigma=self.sigma,
        )

    def temporal_config(self) -> TemporalNetConfig:
        return TemporalNetConfig(
            d_model=self.d_model,
            heads=self.heads,
            layers=self.layers,
            patch=self.patch,
            dropout=self.dropout,
            scene_channels=self.scene_channels,
            use_social=self.ablation.social,
            use_map_cross_attention=self.ablation.map,
            use_gw_heatmap=self.ablation.gw_hm,
            use_waypoint=self.ablation.waypoint,
            sigma=self.sigma,
        )

    # -- (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["time"] = dataclasses.asdict(self.time)
        d["ablation"] = dataclasses.asdict(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        time = TimeConfig(**d.pop("time", {}))
        ablation = AblationFlags(**d.pop("ablation", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown run-config fields: {sorted(unknown)}")
        return cls(time=time, ablation=ablation, **d)

    def to_yaml(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def build_models(cfg: RunConfig) -> ModelBundle:
    """Construct the four networks with seeded initialization."""
    seed_everything(cfg.seed)
    return ModelBundle(
        student_goal=GoalNet(cfg.goal_config("student"), role="student"),
        teacher_goal=GoalNet(cfg.goal_config("teacher"), role="teacher"),
        student_traj=TemporalNet(cfg.temporal_config(), role="student"),
        teacher_traj=TemporalNet(cfg.temporal_config(), role="teacher"),
    )


def trainable_parameters(models: ModelBundle, cfg: RunConfig):
    params = list(models.student_goal.parameters()) + list(models.student_traj.parameters())
    if cfg.ablation.gm_distill:
        params += list(models.teacher_goal.parameters())
    if cfg.ablation.tm_distill:
        params += list(models.teacher_traj.parameters())
    return params


def build_optimizer(models: ModelBundle, cfg: RunConfig):
    params = trainable_parameters(models, cfg)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def make_predictor(models: ModelBundle, cfg: RunConfig) -> StudentPredictor:
    return StudentPredictor(
        models,
        sigma=cfg.sigma,
        temperature=cfg.temperature,
        prior_sigma=cfg.prior_sigma,
        use_waypoint=cfg.ablation.waypoint,
    )


@dataclass
class TrainResult:
    models: ModelBundle
    history: list[dict]
    checkpoint_path: Path | None
    best_val_fde: float | None

    @property
    def final_loss(self) -> float | None:
        return self.history[-1]["total"] if self.history else None


def save_checkpoint(path, models: ModelBundle, optimizer, epoch, cfg: RunConfig, history, best_val_fde=None):
    payload = {
        "student_goal": models.student_goal.state_dict(),
        "teacher_goal": models.teacher_goal.state_dict(),
        "student_traj": models.student_traj.state_dict(),
        "teacher_traj": models.teacher_traj.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "history": list(history),
        "best_val_fde": best_val_fde,
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def config_diff(stored: dict, requested: dict, ignore=("epochs", "output_dir")) -> list[str]:
    """Field-by-field diff of two run-config dicts (nested keys dotted)."""

    def flatten(d, prefix=""):
        out = {}
        for key, value in d.items():
            name = f"{prefix}{key}"
            if isinstance(value, dict):
                out.update(flatten(value, name + "."))
            else:
                out[name] = value
        return out

    a, b = flatten(stored), flatten(requested)
    diffs = []
    for key in sorted(set(a) | set(b)):
        if key.split(".")[0] in ignore:
            continue
        if a.get(key) != b.get(key):
            diffs.append(f"{key}: checkpoint={a.get(key)!r} requested={b.get(key)!r}")
    return diffs


def restore_models(models: ModelBundle, payload: dict):
    models.student_goal.load_state_dict(payload["student_goal"])
    models.teacher_goal.load_state_dict(payload["teacher_goal"])
    models.student_traj.load_state_dict(payload["student_traj"])
    models.teacher_traj.load_state_dict(payload["teacher_traj"])


def write_log(history, path):
    lines = [",".join(LOG_COLUMNS)]
    for row in history:
        lines.append(
            ",".join(
                ("" if row.get(col) is None else repr(row[col])) if col != "epoch" else str(row[col])
                for col in LOG_COLUMNS
            )
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _epoch_batches(items, batch_size, rng):
    order = np.arange(len(items))
    rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [items[j] for j in order[i : i + batch_size]]


def train(
    cfg: RunConfig,
    dataset: SceneDataset,
    models: ModelBundle | None = None,
    optimizer=None,
    start_epoch: int = 0,
    history: list | None = None,
    best_val_fde: float | None = None,
) -> TrainResult:
    """Optimize all trainable parameter groups on the train split.

    Logs every loss component per epoch and keeps the checkpoint with the
    best validation min-FDE (falling back to the final epoch when there is
    no validation split).
    """
    train_groups = dataset.split("train")
    if not train_groups and cfg.epochs > start_epoch:
        raise InvalidArgumentError("training needs a non-empty train split")

    if models is None:
        models = build_models(cfg)
    if optimizer is None:
        optimizer = build_optimizer(models, cfg)
    distill = cfg.distill_config()
    history = list(history) if history else []

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"

    batches = [
        (g, WindowBatch.build(dataset.scenes[g.scene_id], g.windows, cfg.time, cfg.sigma))
        for g in train_groups
    ]
    val_groups = dataset.split("val")

    models.train()
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        sums = {name: 0.0 for name in LOG_COLUMNS[1:7]}
        n_steps = 0
        for batch_groups in _epoch_batches(batches, cfg.batch_size, rng):
            optimizer.zero_grad()
            # merge groups with equal agent counts into single forward passes
            buckets: dict[int, list[WindowBatch]] = {}
            for _, wb in batch_groups:
                buckets.setdefault(wb.agents, []).append(wb)
            bundles, weights = [], []
            for agents in sorted(buckets):
                merged = TrainingBatch.merge(buckets[agents])
                bundles.append(distill_training_step_merged(models, merged, cfg.time, distill))
                weights.append(merged.groups * merged.agents)
            wsum = sum(weights)
            total = sum(b.total * (w / wsum) for b, w in zip(bundles, weights))
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(trainable_parameters(models, cfg), cfg.grad_clip)
            optimizer.step()
            n_steps += 1
            # accumulate in float64 so the logged components recombine into
            # the logged total exactly
            dicts = [b.as_dict() for b in bundles]
            for name in sums:
                sums[name] += sum(d[name] * w for d, w in zip(dicts, weights)) / wsum

        row = {"epoch": epoch, **{k: v / max(n_steps, 1) for k, v in sums.items()}}
        row["total"] = (
            row["goal_student"] + row["goal_teacher"] + row["goal_distill"]
            + cfg.lam * (row["traj_student"] + row["traj_teacher"] + row["traj_distill"])
        )
        row["val_min_ade"] = row["val_min_fde"] = None
        if val_groups and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            models.eval()
            report = evaluate(
                make_predictor(models, cfg), val_groups, dataset.scenes, cfg.time,
                k=cfg.val_k, seed=cfg.seed * 7919 + epoch,
            )
            models.train()
            row["val_min_ade"], row["val_min_fde"] = report.min_ade, report.min_fde
            if best_val_fde is None or report.min_fde < best_val_fde:
                best_val_fde = report.min_fde
                save_checkpoint(best_path, models, optimizer, epoch + 1, cfg, history + [row], best_val_fde)
        history.append(row)
        save_checkpoint(last_path, models, optimizer, epoch + 1, cfg, history, best_val_fde)
        write_log(history, out_dir / "train_log.csv")

    models.eval()
    if cfg.epochs == start_epoch or not history:
        # nothing trained: still materialize the initial state
        save_checkpoint(last_path, models, optimizer, start_epoch, cfg, history, best_val_fde)
    if not best_path.exists():
        best_src = load_checkpoint(last_path)
        torch.save(best_src, best_path)
    return TrainResult(
        models=models,
        history=history,
        checkpoint_path=last_path,
        best_val_fde=best_val_fde,
    )


def resume(
    checkpoint_path,
    dataset: SceneDataset,
    epochs: int | None = None,
    requested: RunConfig | None = None,
) -> TrainResult:
    """Continue a run from its checkpoint.

    Refuses to resume when ``requested`` differs from the stored config
    (every mismatched field is listed); only the epoch target and output
    directory may change.  Resuming a finished run is a no-op returning
    the stored state.
    """
    payload = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(payload["config"])
    if requested is not None:
        diffs = config_diff(payload["config"], requested.to_dict())
        if diffs:
            raise ConfigMismatchError(
                "checkpoint config does not match the requested run:\n  " + "\n  ".join(diffs)
            )
        cfg = cfg.replace(epochs=requested.epochs, output_dir=requested.output_dir)
    if epochs is not None:
        cfg = cfg.replace(epochs=epochs)
    models = build_models(cfg)
    restore_models(models, payload)
    optimizer = build_optimizer(models, cfg)
    if payload.get("optimizer"):
        optimizer.load_state_dict(payload["optimizer"])
    start_epoch = payload["epoch"]
    if start_epoch >= cfg.epochs:
        return TrainResult(
            models=models,
            history=payload.get("history", []),
            checkpoint_path=Path(checkpoint_path),
            best_val_fde=payload.get("best_val_fde"),
        )
    if payload.get("torch_rng") is not None:
        torch.set_rng_state(payload["torch_rng"])
    return train(
        cfg,
        dataset,
        models=models,
        optimizer=optimizer,
        start_epoch=start_epoch,
        history=payload.get("history", []),
        best_val_fde=payload.get("best_val_fde"),
    )
