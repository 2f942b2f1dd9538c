"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep-horizon, sweep-teacher,
plot.  Every command is headless, honors --seed, and exits with 0 on
success, 2 on usage errors, 3 on data errors, and 4 on numerical failures.
Sweep and ablation cells each write into an isolated subdirectory named by
their toggle/length signature.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .dataio import (
    generate_synthetic,
    load_dataset,
    load_split_recordings,
    write_dataset,
)
from .errors import (
    ConfigMismatchError,
    EmptySplitError,
    InvalidArgumentError,
    NumericalError,
    ParseError,
)
from .metrics import evaluate, horizon_sweep, write_horizon_table
from .trainer import (
    AblationFlags,
    RunConfig,
    build_models,
    load_checkpoint,
    make_predictor,
    restore_models,
    resume,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PNG_META = {"Software": "trajdistill"}
SCHEMES = ("gm", "tm", "total")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=str(args.out))
    return cfg


def _load_data(args, cfg: RunConfig):
    return load_dataset(
        args.data,
        cfg.time,
        channels=cfg.scene_channels,
        working_size=cfg.working_size,
        window_stride=cfg.window_stride,
    )


def _restore_bundle(checkpoint_path):
    payload = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(payload["config"])
    models = build_models(cfg)
    restore_models(models, payload)
    models.eval()
    return models, cfg


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    pairs = generate_synthetic(
        seed=args.seed if args.seed is not None else 0,
        n_scenes=args.scenes,
        agents_per_scene=args.agents,
        motion=args.motion,
        noise_sigma=args.noise,
        steps=args.steps,
        size=args.size,
        channels=args.channels,
    )
    ratios = tuple(float(r) for r in args.ratios.split(","))
    split = write_dataset(args.out, pairs, ratios=ratios, seed=args.seed or 0)
    print(
        f"wrote {len(pairs)} scenes to {args.out} "
        f"(train {len(split.train)} / val {len(split.val)} / test {len(split.test)})"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(args, cfg)
    if args.resume:
        result = resume(args.resume, dataset, epochs=cfg.epochs, requested=cfg)
    else:
        result = train(cfg, dataset)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last['epoch']}: total {last['total']:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    models, cfg = _restore_bundle(args.checkpoint)
    dataset = _load_data(args, cfg)
    groups = dataset.split(args.split)
    k = args.k or cfg.test_k
    seed = args.seed if args.seed is not None else cfg.seed
    report = evaluate(
        make_predictor(models, cfg), groups, dataset.scenes, cfg.time,
        k=k, seed=seed, pixel_scale=cfg.pixel_scale,
    )
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "eval_report.csv")
    report.to_kv(out / "eval_report.txt")
    print(
        f"{args.split}: min{k}ADE {report.min_ade:.4f}  min{k}FDE {report.min_fde:.4f} "
        f"({report.n_windows} windows)"
    )
    return EXIT_OK


def parse_toggle_rows(spec: str) -> list[AblationFlags]:
    """';'-separated rows of ','-separated enabled toggle names.

    'none' (or an empty row) enables nothing; duplicate rows are dropped
    with a warning.
    """
    if not spec.strip():
        return []
    rows = []
    seen = set()
    for chunk in spec.split(";"):
        names = [n.strip() for n in chunk.split(",") if n.strip() and n.strip() != "none"]
        flags = AblationFlags.from_enabled(names)
        key = tuple(sorted(flags.enabled_names()))
        if key in seen:
            print(f"warning: duplicate toggle row {chunk!r} dropped", file=sys.stderr)
            continue
        seen.add(key)
        rows.append(flags)
    return rows


def _row_signature(flags: AblationFlags) -> str:
    return "+".join(flags.enabled_names()) or "none"


def cmd_ablate(args) -> int:
    base = _load_config(args)
    rows = parse_toggle_rows(args.toggles)
    out = Path(args.out or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["map,waypoint,social,gw_hm,gm_distill,tm_distill,ade,fde"]
    dataset = _load_data(args, base) if rows else None
    for flags in rows:
        sig = _row_signature(flags)
        cfg = base.replace(ablation=flags, output_dir=str(out / sig))
        result = train(cfg, dataset)
        report = evaluate(
            make_predictor(result.models, cfg),
            dataset.split(args.split),
            dataset.scenes,
            cfg.time,
            k=args.k or cfg.test_k,
            seed=cfg.seed,
            pixel_scale=cfg.pixel_scale,
        )
        cells = ["on" if getattr(flags, n) else "off" for n in AblationFlags.NAMES]
        lines.append(",".join(cells + [repr(report.min_ade), repr(report.min_fde)]))
        print(f"{sig}: ADE {report.min_ade:.4f} FDE {report.min_fde:.4f}")
    table = out / "ablation.csv"
    table.write_text("\n".join(lines) + "\n")
    print(f"table: {table}")
    return EXIT_OK


def cmd_sweep_horizon(args) -> int:
    models, cfg = _restore_bundle(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    recordings, scenes = load_split_recordings(
        args.data, args.split, channels=cfg.scene_channels, working_size=cfg.working_size
    )
    horizons = [int(h) for h in args.horizons.split(",") if h.strip()]
    rows, warnings = horizon_sweep(
        make_predictor(models, cfg), recordings, scenes, cfg.time, horizons,
        k=args.k or cfg.test_k, seed=cfg.seed, window_stride=cfg.window_stride,
    )
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "horizon_sweep.csv"
    write_horizon_table(rows, table)
    plot_horizon_curves(rows, out / "horizon_sweep.png")
    print(f"table: {table}")
    return EXIT_OK


def cmd_sweep_teacher(args) -> int:
    base = _load_config(args)
    dataset = _load_data(args, base)
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    unknown = set(schemes) - set(SCHEMES)
    if unknown:
        raise InvalidArgumentError(f"unknown distillation schemes: {sorted(unknown)}")
    out = Path(args.out or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for length in sorted(set(lengths)):
        if length < base.time.t_h:
            print(
                f"warning: teacher length {length} < t_h={base.time.t_h}, skipped",
                file=sys.stderr,
            )
            continue
        extra = length - base.time.t_h
        if extra >= base.time.t_f:
            print(
                f"warning: teacher length {length} leaves no horizon to predict, skipped",
                file=sys.stderr,
            )
            continue
        for scheme in schemes:
            flags = dataclasses.replace(
                base.ablation,
                gm_distill=scheme in ("gm", "total"),
                tm_distill=scheme in ("tm", "total"),
            )
            cfg = base.replace(
                ablation=flags,
                teacher_extra_steps=extra,
                output_dir=str(out / f"{scheme}_len{length:02d}"),
            )
            result = train(cfg, dataset)
            report = evaluate(
                make_predictor(result.models, cfg),
                dataset.split(args.split),
                dataset.scenes,
                cfg.time,
                k=args.k or cfg.test_k,
                seed=cfg.seed,
                pixel_scale=cfg.pixel_scale,
            )
            rows.append((scheme, length, report.min_ade, report.min_fde))
            print(f"{scheme} len={length}: ADE {report.min_ade:.4f} FDE {report.min_fde:.4f}")
    table = out / "teacher_sweep.csv"
    lines = ["scheme,length,ade,fde"]
    for scheme, length, ade, fde in rows:
        lines.append(f"{scheme},{length},{ade!r},{fde!r}")
    table.write_text("\n".join(lines) + "\n")
    plot_teacher_sweep(rows, out / "teacher_sweep.png")
    print(f"table: {table}")
    return EXIT_OK


# -- plotting ----------------------------------------------------------------


def _read_table(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty table", row=1)
    header = [h.strip() for h in lines[0].split(",")]
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ParseError(f"{path}: expected {len(header)} cells", row=lineno)
        rows.append((lineno, cells))
    return header, rows


def _floats(rows, header, names, path):
    cols = {name: [] for name in names}
    for name in names:
        idx = header.index(name)
        for lineno, cells in rows:
            try:
                cols[name].append(float(cells[idx]))
            except ValueError:
                raise ParseError(f"{path}: non-numeric {name!r} cell", row=lineno) from None
    return cols


def _new_figure():
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, out_path):
    fig.tight_layout()
    fig.savefig(out_path, format="png", metadata=dict(PNG_META))
    plt.close(fig)


def plot_horizon_curves(rows, out_path):
    fig, ax = _new_figure()
    hs = [r[0] for r in rows]
    ax.plot(hs, [r[1] for r in rows], marker="o", label="ADE")
    ax.plot(hs, [r[2] for r in rows], marker="s", label="FDE")
    ax.set_xlabel("prediction horizon (steps)")
    ax.set_ylabel("error (px)")
    ax.legend()
    _save(fig, out_path)


def plot_teacher_sweep(rows, out_path):
    fig, ax = _new_figure()
    for scheme in SCHEMES:
        pts = [(length, ade, fde) for s, length, ade, fde in rows if s == scheme]
        if not pts:
            continue
        xs = [p[0] for p in pts]
        ax.plot(xs, [p[1] for p in pts], marker="o", label=f"{scheme} ADE")
        ax.plot(xs, [p[2] for p in pts], marker="s", linestyle="--", label=f"{scheme} FDE")
    ax.set_xlabel("teacher input length (steps)")
    ax.set_ylabel("error (px)")
    ax.legend()
    _save(fig, out_path)


def plot_loss_curves(header, rows, out_path, path):
    epoch_idx = header.index("epoch")
    fig, ax = _new_figure()
    for name in header:
        if name == "epoch":
            continue
        idx = header.index(name)
        xs, ys = [], []
        for lineno, cells in rows:
            if not cells[idx]:  # validation columns may be sparse
                continue
            try:
                xs.append(float(cells[epoch_idx]))
                ys.append(float(cells[idx]))
            except ValueError:
                raise ParseError(f"{path}: non-numeric {name!r} cell", row=lineno) from None
        if ys:
            style = "--" if name.startswith("val_") else "-"
            ax.plot(xs, ys, style, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss / error")
    ax.legend(fontsize=7)
    _save(fig, out_path)


def cmd_plot(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for table in args.tables:
        header, rows = _read_table(table)
        if not rows:
            raise ParseError(f"{table}: table has no data rows", row=2)
        name = Path(table).stem + ".png"
        if header[:3] == ["horizon", "ade", "fde"]:
            cols = _floats(rows, header, ("horizon", "ade", "fde"), table)
            plot_horizon_curves(
                list(zip(cols["horizon"], cols["ade"], cols["fde"])), out / name
            )
        elif header[:4] == ["scheme", "length", "ade", "fde"]:
            cols = _floats(rows, header, ("length", "ade", "fde"), table)
            schemes = [cells[0] for _, cells in rows]
            plot_teacher_sweep(
                list(zip(schemes, cols["length"], cols["ade"], cols["fde"])), out / name
            )
        elif header[0] == "epoch":
            plot_loss_curves(header, rows, out / name, table)
        else:
            raise ParseError(f"{table}: unrecognized table header {header}", row=1)
        print(f"plot: {out / name}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdistill",
        description="Train and evaluate the goal-conditioned trajectory forecaster",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        if data:
            p.add_argument("--data", type=str, required=True, help="dataset directory")
            p.add_argument("--config", type=str, default=None, help="run config YAML")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--motion", type=str, default="turn", choices=("straight", "turn", "stop-go"))
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--ratios", type=str, default="0.7,0.1,0.2")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train student and teacher networks")
    common(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a toggle matrix")
    common(p)
    p.add_argument("--toggles", type=str, required=True,
                   help="';'-separated rows of ','-separated enabled toggles")
    p.add_argument("--split", type=str, default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-horizon", help="evaluate across prediction horizons")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--horizons", type=str, required=True, help="comma-separated step counts")
    p.add_argument("--split", type=str, default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_sweep_horizon)

    p = sub.add_parser("sweep-teacher", help="sweep the teacher input length")
    common(p)
    p.add_argument("--lengths", type=str, required=True, help="comma-separated step counts")
    p.add_argument("--schemes", type=str, default="gm,tm,total")
    p.add_argument("--split", type=str, default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_sweep_teacher)

    p = sub.add_parser("plot", help="render static plots from result tables")
    p.add_argument("tables", nargs="+", help="table files to plot")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (InvalidArgumentError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, EmptySplitError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
