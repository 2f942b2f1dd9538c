"""Trajectory/scene ingestion, windowing, and synthetic data generation.

File formats (all delimiter-separated text with a header row, UTF-8):
  - sdd-like trajectories:  agent_id, frame, x, y, class
  - ind-like trajectories:  recordingId, trackId, frame, xCenter, yCenter, class
  - semantic maps: .npy rasters, either (C, H, W) float planes in [0, 1] or a
    (H, W) integer index plane with an optional JSON legend (name -> index);
    .png grayscale images are read as index planes.
  - split specs: plain-text scene-id lists, one per line.

Windowing drops any agent with a missing frame inside a candidate window
instead of splitting or imputing its trajectory, so every emitted
coordinate exists verbatim in the raw recording.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import SceneMap, TimeConfig, TrajectoryWindow
from .errors import InvalidArgumentError, ParseError

PEDESTRIAN_CLASSES = {"pedestrian"}

SDD_COLUMNS = ("agent_id", "frame", "x", "y", "class")
IND_COLUMNS = ("recordingId", "trackId", "frame", "xCenter", "yCenter", "class")


@dataclass
class RawRecording:
    """Pedestrian rows of one scene, sorted by (agent_id, frame)."""

    scene_id: str
    rows: list  # (agent_id, frame, x, y) tuples
    frame_rate: float = 1.0

    def by_agent(self) -> dict[str, dict[int, tuple[float, float]]]:
        agents: dict[str, dict[int, tuple[float, float]]] = {}
        for agent_id, frame, x, y in self.rows:
            agents.setdefault(agent_id, {})[frame] = (x, y)
        return agents

    @property
    def frame_range(self) -> tuple[int, int]:
        frames = [r[1] for r in self.rows]
        return (min(frames), max(frames)) if frames else (0, -1)


@dataclass
class SplitSpec:
    """Disjoint train/val/test scene-id lists."""

    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise InvalidArgumentError("split scene-id lists must be disjoint")

    def split_of(self, scene_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if scene_id in getattr(self, name):
                return name
        return None

    def covers(self, scene_ids) -> bool:
        return set(scene_ids) <= set(self.train) | set(self.val) | set(self.test)

    @classmethod
    def from_ratio(cls, scene_ids, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> "SplitSpec":
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise InvalidArgumentError("ratios must be a non-negative triple summing to 1")
        ids = sorted(scene_ids)
        rng = np.random.default_rng(seed)
        rng.shuffle(ids)
        n = len(ids)
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        return cls(train=ids[:n_train], val=ids[n_train : n_train + n_val], test=ids[n_train + n_val :])

    @classmethod
    def from_files(cls, train_path, val_path, test_path) -> "SplitSpec":
        def read(path):
            lines = Path(path).read_text().splitlines()
            return [ln.strip() for ln in lines if ln.strip()]

        return cls(train=read(train_path), val=read(val_path), test=read(test_path))


def _detect_delimiter(header: str) -> str | None:
    for delim in (",", "\t", ";"):
        if delim in header:
            return delim
    return None  # whitespace


def _split_line(line: str, delim: str | None) -> list[str]:
    parts = line.split(delim) if delim else line.split()
    return [p.strip() for p in parts]


def load_recording(
    path,
    format: str = "sdd-like",
    frame_rate: float = 1.0,
    scene_id: str | None = None,
) -> RawRecording:
    """Parse a trajectory file, keeping only pedestrian rows.

    Raises :class:`ParseError` (with the 1-based row number) on missing
    columns, non-numeric cells, or per-agent frame order violations.
    """
    if format == "sdd-like":
        columns = SDD_COLUMNS
        idx = dict(agent=0, frame=1, x=2, y=3, cls=4)
    elif format == "ind-like":
        columns = IND_COLUMNS
        idx = dict(agent=1, frame=2, x=3, y=4, cls=5)
    else:
        raise InvalidArgumentError(f"unknown trajectory format {format!r}")

    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file", row=1)
    delim = _detect_delimiter(lines[0])
    header = _split_line(lines[0], delim)
    if [h.lower() for h in header] != [c.lower() for c in columns]:
        raise ParseError(
            f"{path}: expected columns {list(columns)}, got {header}", row=1
        )

    rows = []
    last_frame: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = _split_line(line, delim)
        if len(cells) != len(columns):
            raise ParseError(f"{path}: expected {len(columns)} cells, got {len(cells)}", row=lineno)
        try:
            frame = int(float(cells[idx["frame"]]))
            x = float(cells[idx["x"]])
            y = float(cells[idx["y"]])
        except ValueError as exc:
            raise ParseError(f"{path}: non-numeric cell ({exc})", row=lineno) from None
        agent = cells[idx["agent"]]
        if cells[idx["cls"]].lower() not in PEDESTRIAN_CLASSES:
            continue
        if agent in last_frame and frame <= last_frame[agent]:
            raise ParseError(
                f"{path}: frames for agent {agent!r} not strictly increasing", row=lineno
            )
        last_frame[agent] = frame
        rows.append((agent, frame, x, y))

    rows.sort(key=lambda r: (r[0], r[1]))
    return RawRecording(scene_id=scene_id or path.stem, rows=rows, frame_rate=frame_rate)


def stride_frames_for(cfg: TimeConfig, frame_rate: float) -> int:
    """Frames to skip between model steps (1 step = stride_seconds)."""
    return max(1, int(round(frame_rate * cfg.stride_seconds)))


def cut_windows(
    rec: RawRecording,
    cfg: TimeConfig,
    stride_frames: int = 1,
    window_stride: int | None = None,
) -> list[TrajectoryWindow]:
    """Cut fixed (t_h + t_f)-step windows, dropping fragmented agents.

    An agent missing any subsampled frame inside a candidate window is
    dropped entirely for that window; no splitting or imputation.  Window
    starts slide by ``window_stride`` model steps (default t_f) on a global
    frame grid so co-present agents share windows.
    """
    if stride_frames < 1:
        raise InvalidArgumentError("stride_frames must be >= 1")
    steps = cfg.window_steps
    stride = cfg.t_f if window_stride is None else window_stride
    if stride < 1:
        raise InvalidArgumentError("window_stride must be >= 1")

    if not rec.rows:
        return []
    agents = rec.by_agent()
    first, last = rec.frame_range
    span = (steps - 1) * stride_frames
    windows = []
    start = first
    while start + span <= last:
        frames = [start + i * stride_frames for i in range(steps)]
        for agent_id in sorted(agents):
            track = agents[agent_id]
            if all(f in track for f in frames):
                positions = torch.tensor([track[f] for f in frames], dtype=torch.float64)
                windows.append(
                    TrajectoryWindow(
                        scene_id=rec.scene_id,
                        agent_id=agent_id,
                        observed=positions[: cfg.t_h],
                        future=positions[cfg.t_h :],
                        frame_start=start,
                    )
                )
        start += stride * stride_frames
    windows.sort(key=lambda w: (w.scene_id, w.agent_id, w.frame_start))
    return windows


@dataclass
class WindowGroup:
    """All co-present agents of one (scene, frame_start) window."""

    scene_id: str
    frame_start: int
    windows: list


def group_windows(windows) -> list[WindowGroup]:
    """Group windows by (scene_id, frame_start) for social batching."""
    buckets: dict[tuple, list] = {}
    for w in windows:
        buckets.setdefault((w.scene_id, w.frame_start), []).append(w)
    groups = []
    for (scene_id, frame_start) in sorted(buckets):
        members = sorted(buckets[(scene_id, frame_start)], key=lambda w: w.agent_id)
        groups.append(WindowGroup(scene_id=scene_id, frame_start=frame_start, windows=members))
    return groups


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    return np.minimum((np.floor((np.arange(dst) + 0.5) * src / dst)).astype(int), src - 1)


def _resize_nearest(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    ys = _nearest_indices(plane.shape[0], height)
    xs = _nearest_indices(plane.shape[1], width)
    return plane[np.ix_(ys, xs)]


def load_scene_map(
    path,
    scene_id: str | None = None,
    channels: int = 6,
    working_size: int | tuple[int, int] | None = None,
    legend_path=None,
    pixels_per_meter: float = 1.0,
) -> SceneMap:
    """Load a semantic raster and resize it to the working resolution.

    Index planes are expanded to one-hot channel planes; the coordinate
    scale from source pixels to the working raster is stored on the map.
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    elif path.suffix in (".png", ".bmp", ".tif", ".tiff"):
        from PIL import Image

        arr = np.array(Image.open(path).convert("L"))
    else:
        raise InvalidArgumentError(f"unsupported scene map file {path.name!r}")

    legend = None
    if legend_path is not None:
        legend = json.loads(Path(legend_path).read_text())
        if len(legend) != channels:
            raise InvalidArgumentError(
                f"legend lists {len(legend)} classes but config expects {channels}"
            )

    if arr.ndim == 2:  # index plane -> one-hot
        idx = arr.astype(int)
        n_classes = len(legend) if legend else int(idx.max()) + 1
        if n_classes != channels:
            raise InvalidArgumentError(
                f"index map holds {n_classes} classes but config expects {channels}"
            )
        if idx.min() < 0 or idx.max() >= n_classes:
            raise InvalidArgumentError("index map holds out-of-range class indices")
        src_h, src_w = idx.shape
        if working_size is not None:
            h, w = (working_size, working_size) if isinstance(working_size, int) else working_size
            idx = _resize_nearest(idx, h, w)
        grid = np.stack([(idx == c).astype(np.float32) for c in range(n_classes)])
    elif arr.ndim == 3:
        if arr.shape[0] != channels:
            raise InvalidArgumentError(
                f"raster has {arr.shape[0]} planes but config expects {channels}"
            )
        src_h, src_w = arr.shape[1:]
        grid = arr.astype(np.float32)
        if working_size is not None:
            h, w = (working_size, working_size) if isinstance(working_size, int) else working_size
            grid = np.stack([_resize_nearest(p, h, w) for p in grid])
        if grid.min() < 0 or grid.max() > 1:
            raise InvalidArgumentError("raster planes must lie in [0, 1]")
    else:
        raise InvalidArgumentError("scene raster must be (H, W) or (C, H, W)")

    out_h, out_w = grid.shape[1:]
    return SceneMap(
        scene_id=scene_id or path.stem,
        grid=torch.from_numpy(np.ascontiguousarray(grid)),
        pixels_per_meter=pixels_per_meter,
        coord_scale=(out_w / src_w, out_h / src_h),
    )


MOTIONS = ("straight", "turn", "stop-go")


def _dyadic(rng: np.random.Generator, low: float, high: float, q: int = 8) -> float:
    """Uniform draw snapped to the 1/q pixel grid (keeps fp arithmetic exact)."""
    return round(rng.uniform(low, high) * q) / q


def _dyadic_velocity(rng, moving_steps, size, margin):
    """Per-axis dyadic velocity whose total travel fits inside the margins."""
    vmax = max(1 / 8, min(1.25, np.floor((size - 2 * margin - 1) / max(moving_steps, 1) * 8) / 8))
    return _dyadic(rng, -vmax, vmax), _dyadic(rng, -vmax, vmax)


def _start_for_travel(rng, travel, size, margin):
    """Dyadic start so that both the start and start+travel stay in bounds."""
    lo = margin - min(0.0, travel)
    hi = size - margin - max(0.0, travel)
    return _dyadic(rng, lo, max(lo, hi))


def _synthetic_track(rng, motion, steps, size):
    """Noiseless closed-form trajectory, (steps, 2) float64.

    Straight and stop-go velocities/starts are snapped to the 1/8-pixel
    grid, so noiseless displacements are bit-exact constants.
    """
    margin = size * 0.12
    if motion == "straight":
        vx, vy = _dyadic_velocity(rng, steps - 1, size, margin)
        sx = _start_for_travel(rng, vx * (steps - 1), size, margin)
        sy = _start_for_travel(rng, vy * (steps - 1), size, margin)
        t = np.arange(steps, dtype=np.float64)
        return np.stack([sx + vx * t, sy + vy * t], axis=1)
    if motion == "turn":
        radius = rng.uniform(size / 6, size / 3.2)
        cx = rng.uniform(size / 2 - margin / 2, size / 2 + margin / 2)
        cy = rng.uniform(size / 2 - margin / 2, size / 2 + margin / 2)
        theta0 = rng.uniform(0, 2 * np.pi)
        omega = rng.choice([-1.0, 1.0]) * rng.uniform(0.06, 0.18)
        t = np.arange(steps, dtype=np.float64)
        ang = theta0 + omega * t
        return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    if motion == "stop-go":
        go1 = steps // 2
        halt = steps // 4
        moving = steps - halt
        vx, vy = _dyadic_velocity(rng, moving, size, margin)
        sx = _start_for_travel(rng, vx * moving, size, margin)
        sy = _start_for_travel(rng, vy * moving, size, margin)
        xs, ys = [sx], [sy]
        for t in range(1, steps):
            still = go1 <= t < go1 + halt
            xs.append(xs[-1] + (0.0 if still else vx))
            ys.append(ys[-1] + (0.0 if still else vy))
        return np.stack([np.array(xs), np.array(ys)], axis=1)
    raise InvalidArgumentError(f"unknown motion {motion!r}, pick one of {MOTIONS}")


def _corridor_map(tracks, size, channels, width=4.0):
    """Walkable-corridor raster: channel 0 marks cells near any track."""
    ys, xs = np.mgrid[0:size, 0:size]
    walk = np.zeros((size, size), dtype=np.float32)
    for track in tracks:
        for x, y in track:
            walk = np.maximum(
                walk, ((xs - x) ** 2 + (ys - y) ** 2 <= width * width).astype(np.float32)
            )
    grid = np.zeros((channels, size, size), dtype=np.float32)
    grid[0] = walk
    if channels > 1:
        grid[1] = 1.0 - walk
    return grid


def generate_synthetic(
    seed: int,
    n_scenes: int,
    agents_per_scene: int,
    motion: str = "turn",
    noise_sigma: float = 0.0,
    steps: int = 35,
    size: int = 64,
    channels: int = 6,
    frame_rate: float = 1.0,
) -> list[tuple[RawRecording, SceneMap]]:
    """Seed-deterministic synthetic scenes with closed-form motion."""
    if motion not in MOTIONS:
        raise InvalidArgumentError(f"unknown motion {motion!r}, pick one of {MOTIONS}")
    rng = np.random.default_rng(seed)
    pairs = []
    for s in range(n_scenes):
        scene_id = f"synth{s:03d}"
        tracks = []
        rows = []
        for a in range(agents_per_scene):
            clean = _synthetic_track(rng, motion, steps, size)
            noisy = clean + (rng.standard_normal(clean.shape) * noise_sigma if noise_sigma else 0.0)
            noisy = np.clip(noisy, 0.0, size - 1.0)
            tracks.append(clean)
            for t in range(steps):
                rows.append((f"agent{a}", t, float(noisy[t, 0]), float(noisy[t, 1])))
        rows.sort(key=lambda r: (r[0], r[1]))
        rec = RawRecording(scene_id=scene_id, rows=rows, frame_rate=frame_rate)
        scene = SceneMap(
            scene_id=scene_id,
            grid=torch.from_numpy(_corridor_map(tracks, size, channels)),
            pixels_per_meter=1.0,
        )
        pairs.append((rec, scene))
    return pairs


def write_recording_csv(rec: RawRecording, path):
    """Write a recording in the sdd-like column layout."""
    lines = ["agent_id,frame,x,y,class"]
    for agent, frame, x, y in rec.rows:
        lines.append(f"{agent},{frame},{x!r},{y!r},Pedestrian")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scene_map_npy(scene: SceneMap, path):
    np.save(Path(path), scene.grid.numpy())


def write_dataset(
    out_dir,
    pairs,
    split: SplitSpec | None = None,
    ratios=(0.7, 0.1, 0.2),
    seed: int = 0,
):
    """Materialize (recording, map) pairs under the dataset layout:

        out_dir/trajectories/<scene>.csv
        out_dir/maps/<scene>.npy
        out_dir/splits/{train,val,test}.txt
    """
    out = Path(out_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(parents=True, exist_ok=True)
    scene_ids = []
    for rec, scene in pairs:
        write_recording_csv(rec, out / "trajectories" / f"{rec.scene_id}.csv")
        write_scene_map_npy(scene, out / "maps" / f"{scene.scene_id}.npy")
        scene_ids.append(rec.scene_id)
    split = split or SplitSpec.from_ratio(scene_ids, ratios, seed=seed)
    for name in ("train", "val", "test"):
        ids = getattr(split, name)
        (out / "splits" / f"{name}.txt").write_text("\n".join(ids) + ("\n" if ids else ""))
    return split


def scale_recording(rec: RawRecording, sx: float, sy: float) -> RawRecording:
    if (sx, sy) == (1.0, 1.0):
        return rec
    rows = [(a, f, x * sx, y * sy) for a, f, x, y in rec.rows]
    return RawRecording(scene_id=rec.scene_id, rows=rows, frame_rate=rec.frame_rate)


def load_split_recordings(
    data_dir,
    split_name: str,
    channels: int = 6,
    working_size: int | None = None,
    format: str = "sdd-like",
) -> tuple[list[RawRecording], dict[str, SceneMap]]:
    """Recordings of one split, rescaled into working-map coordinates."""
    root = Path(data_dir)
    split = SplitSpec.from_files(
        root / "splits" / "train.txt",
        root / "splits" / "val.txt",
        root / "splits" / "test.txt",
    )
    recordings = []
    scenes = {}
    for path in sorted((root / "trajectories").glob("*.csv")):
        rec = load_recording(path, format=format)
        if split.split_of(rec.scene_id) != split_name:
            continue
        scene = load_scene_map(
            root / "maps" / f"{rec.scene_id}.npy",
            scene_id=rec.scene_id,
            channels=channels,
            working_size=working_size,
        )
        scenes[rec.scene_id] = scene
        recordings.append(scale_recording(rec, *scene.coord_scale))
    return recordings, scenes


@dataclass
class SceneDataset:
    """Windows grouped for social batching, plus their scene maps."""

    groups: dict[str, list[WindowGroup]]  # split name -> groups
    scenes: dict[str, SceneMap]
    cfg: TimeConfig

    def split(self, name: str) -> list[WindowGroup]:
        return self.groups.get(name, [])

    def n_windows(self, name: str) -> int:
        return sum(len(g.windows) for g in self.split(name))


def load_dataset(
    data_dir,
    cfg: TimeConfig,
    channels: int = 6,
    working_size: int | None = None,
    window_stride: int | None = None,
    format: str = "sdd-like",
) -> SceneDataset:
    """Read a dataset directory, cut windows, and rescale into map space."""
    root = Path(data_dir)
    traj_dir = root / "trajectories"
    if not traj_dir.is_dir():
        raise FileNotFoundError(f"{root} has no trajectories/ directory")
    split = SplitSpec.from_files(
        root / "splits" / "train.txt",
        root / "splits" / "val.txt",
        root / "splits" / "test.txt",
    )
    groups: dict[str, list[WindowGroup]] = {"train": [], "val": [], "test": []}
    scenes: dict[str, SceneMap] = {}
    for path in sorted(traj_dir.glob("*.csv")):
        rec = load_recording(path, format=format)
        split_name = split.split_of(rec.scene_id)
        if split_name is None:
            continue
        scene = load_scene_map(
            root / "maps" / f"{rec.scene_id}.npy",
            scene_id=rec.scene_id,
            channels=channels,
            working_size=working_size,
        )
        scenes[rec.scene_id] = scene
        sf = stride_frames_for(cfg, rec.frame_rate)
        windows = cut_windows(rec, cfg, stride_frames=sf, window_stride=window_stride)
        sx, sy = scene.coord_scale
        if (sx, sy) != (1.0, 1.0):
            windows = [w.scaled(sx, sy) for w in windows]
        groups[split_name].extend(group_windows(windows))
    return SceneDataset(groups=groups, scenes=scenes, cfg=cfg)
