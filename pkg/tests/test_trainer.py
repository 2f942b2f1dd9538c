import math

import pytest
import torch

from trajdistill.core import TimeConfig
from trajdistill.dataio import generate_synthetic, load_dataset, write_dataset
from trajdistill.errors import ConfigMismatchError, InvalidArgumentError, NumericalError
from trajdistill.trainer import (
    AblationFlags,
    RunConfig,
    build_models,
    build_optimizer,
    config_diff,
    load_checkpoint,
    resume,
    save_checkpoint,
    train,
)

TIME = TimeConfig(t_h=2, t_wp=2, t_f=4)


def tiny_config(tmp_path, **kw):
    defaults = dict(
        time=TIME,
        goal_depth=1,
        goal_base_width=4,
        sigma=2.0,
        d_model=16,
        heads=2,
        layers=1,
        patch=4,
        scene_channels=2,
        working_size=16,
        epochs=3,
        batch_size=4,
        learning_rate=1e-3,
        val_k=2,
        val_every=1,
        seed=0,
        output_dir=str(tmp_path / "run"),
    )
    defaults.update(kw)
    return RunConfig(**defaults)


def tiny_dataset(tmp_path, n_scenes=6, seed=1):
    pairs = generate_synthetic(
        seed=seed, n_scenes=n_scenes, agents_per_scene=2, motion="turn",
        noise_sigma=0.1, steps=TIME.window_steps, size=16, channels=2,
    )
    write_dataset(tmp_path / "data", pairs, ratios=(0.7, 0.15, 0.15), seed=0)
    return load_dataset(tmp_path / "data", TIME, channels=2, working_size=16)


def state_vector(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class TestRunConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path, lam=0.5, ablation=AblationFlags(social=False))
        cfg.to_yaml(tmp_path / "cfg.yaml")
        back = RunConfig.from_yaml(tmp_path / "cfg.yaml")
        assert back == cfg

    def test_every_ablation_row_expressible(self, tmp_path):
        rows = [
            (),
            ("map",),
            ("waypoint",),
            ("map", "waypoint"),
            ("map", "waypoint", "social"),
            ("map", "waypoint", "social", "gw_hm"),
            ("map", "waypoint", "social", "gw_hm", "gm_distill"),
            ("map", "waypoint", "social", "gw_hm", "tm_distill"),
            ("map", "waypoint", "social", "gw_hm", "gm_distill", "tm_distill"),
        ]
        for row in rows:
            flags = AblationFlags.from_enabled(row)
            assert flags.enabled_names() == sorted(row, key=AblationFlags.NAMES.index)
            tiny_config(tmp_path, ablation=flags)  # constructible

    def test_unknown_toggle_rejected(self):
        with pytest.raises(InvalidArgumentError):
            AblationFlags.from_enabled(["map", "wormhole"])

    def test_shape_constraints(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            tiny_config(tmp_path, working_size=18)  # not divisible by patch

    def test_teacher_shapes_follow_extra_steps(self, tmp_path):
        cfg = tiny_config(tmp_path, teacher_extra_steps=1)
        assert cfg.goal_config("teacher").in_steps == TIME.t_h + 1
        assert cfg.goal_config("teacher").out_steps == TIME.t_f - 1


class TestTrain:
    def test_zero_epochs_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=0)
        ds = tiny_dataset(tmp_path)
        result = train(cfg, ds)
        assert result.history == []
        reference = build_models(cfg)
        assert torch.equal(state_vector(result.models.student_goal), state_vector(reference.student_goal))
        payload = load_checkpoint(tmp_path / "run" / "last.pt")
        assert payload["epoch"] == 0
        assert payload["history"] == []

    def test_seeded_determinism(self, tmp_path):
        ds = tiny_dataset(tmp_path)
        r1 = train(tiny_config(tmp_path, output_dir=str(tmp_path / "a")), ds)
        r2 = train(tiny_config(tmp_path, output_dir=str(tmp_path / "b")), ds)
        assert r1.final_loss == pytest.approx(r2.final_loss, rel=1e-6)
        assert torch.equal(state_vector(r1.models.student_goal), state_vector(r2.models.student_goal))

    def test_loss_decreases_on_tiny_overfit(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=12, val_every=0)
        ds = tiny_dataset(tmp_path, n_scenes=3)
        result = train(cfg, ds)
        assert result.history[-1]["total"] < result.history[0]["total"]

    def test_log_recombination_identity(self, tmp_path):
        cfg = tiny_config(tmp_path, lam=0.7, epochs=2)
        ds = tiny_dataset(tmp_path)
        result = train(cfg, ds)
        for row in result.history:
            goal = row["goal_student"] + row["goal_teacher"] + row["goal_distill"]
            traj = row["traj_student"] + row["traj_teacher"] + row["traj_distill"]
            assert row["total"] == pytest.approx(goal + 0.7 * traj, abs=1e-9)

    def test_log_file_layout(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=2)
        ds = tiny_dataset(tmp_path)
        train(cfg, ds)
        lines = (tmp_path / "run" / "train_log.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,goal_student")
        assert len(lines) == 3

    def test_ablation_off_freezes_teachers(self, tmp_path):
        flags = AblationFlags(gm_distill=False, tm_distill=False)
        cfg = tiny_config(tmp_path, ablation=flags, epochs=2)
        ds = tiny_dataset(tmp_path)
        models = build_models(cfg)
        tg0 = state_vector(models.teacher_goal).clone()
        tt0 = state_vector(models.teacher_traj).clone()
        sg0 = state_vector(models.student_goal).clone()
        result = train(cfg, ds, models=models)
        assert torch.equal(state_vector(result.models.teacher_goal), tg0)
        assert torch.equal(state_vector(result.models.teacher_traj), tt0)
        assert not torch.equal(state_vector(result.models.student_goal), sg0)
        # teacher loss terms are identically zero in the log
        for row in result.history:
            assert row["goal_teacher"] == 0.0
            assert row["goal_distill"] == 0.0
            assert row["traj_teacher"] == 0.0
            assert row["traj_distill"] == 0.0

    def test_non_finite_loss_aborts_with_component_name(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=1, val_every=0)
        ds = tiny_dataset(tmp_path)
        models = build_models(cfg)
        with torch.no_grad():
            models.student_traj.input_proj.weight.fill_(float("nan"))
        with pytest.raises(NumericalError, match="traj_student"):
            train(cfg, ds, models=models)

    def test_eval_split_untouched(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=2)
        ds = tiny_dataset(tmp_path)
        before = [
            (w.observed.clone(), w.future.clone())
            for g in ds.split("test")
            for w in g.windows
        ]
        train(cfg, ds)
        after = [(w.observed, w.future) for g in ds.split("test") for w in g.windows]
        for (o0, f0), (o1, f1) in zip(before, after):
            assert torch.equal(o0, o1) and torch.equal(f0, f1)


class TestCheckpointing:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=2)
        ds = tiny_dataset(tmp_path)
        result = train(cfg, ds)
        payload = load_checkpoint(tmp_path / "run" / "last.pt")
        fresh = build_models(cfg)
        from trajdistill.trainer import restore_models

        restore_models(fresh, payload)
        for a, b in zip(result.models.student_goal.parameters(), fresh.student_goal.parameters()):
            assert torch.equal(a, b)
        for a, b in zip(result.models.teacher_traj.parameters(), fresh.teacher_traj.parameters()):
            assert torch.equal(a, b)

    def test_resume_matches_straight_run(self, tmp_path):
        ds = tiny_dataset(tmp_path)
        straight = train(tiny_config(tmp_path, epochs=6, output_dir=str(tmp_path / "s")), ds)
        half = train(tiny_config(tmp_path, epochs=3, output_dir=str(tmp_path / "h")), ds)
        resumed = resume(tmp_path / "h" / "last.pt", ds, epochs=6)
        assert resumed.final_loss == pytest.approx(straight.final_loss, rel=1e-5)
        assert len(resumed.history) == 6

    def test_resume_finished_run_is_noop(self, tmp_path):
        ds = tiny_dataset(tmp_path)
        cfg = tiny_config(tmp_path, epochs=2)
        result = train(cfg, ds)
        again = resume(tmp_path / "run" / "last.pt", ds)
        assert again.history == result.history
        assert torch.equal(
            state_vector(again.models.student_goal), state_vector(result.models.student_goal)
        )

    def test_resume_config_mismatch_names_field(self, tmp_path):
        ds = tiny_dataset(tmp_path)
        cfg = tiny_config(tmp_path, epochs=2)
        train(cfg, ds)
        changed = tiny_config(tmp_path, epochs=4, d_model=32)
        with pytest.raises(ConfigMismatchError, match="d_model"):
            resume(tmp_path / "run" / "last.pt", ds, requested=changed)

    def test_config_diff_ignores_epoch_and_output(self, tmp_path):
        a = tiny_config(tmp_path, epochs=2).to_dict()
        b = tiny_config(tmp_path, epochs=9, output_dir="elsewhere").to_dict()
        assert config_diff(a, b) == []
        c = tiny_config(tmp_path, lam=0.25).to_dict()
        diffs = config_diff(a, c)
        assert len(diffs) == 1 and diffs[0].startswith("lam:")

    def test_checkpoint_next_step_loss_matches(self, tmp_path):
        ds = tiny_dataset(tmp_path)
        cfg = tiny_config(tmp_path, epochs=2, val_every=0)
        result = train(cfg, ds)
        # one extra epoch from the in-memory models vs from the checkpoint
        cont_a = train(
            cfg.replace(epochs=3, output_dir=str(tmp_path / "ca")), ds,
            models=result.models,
            optimizer=None,  # fresh optimizer for both sides
            start_epoch=2,
            history=result.history,
        )
        reloaded = build_models(cfg)
        from trajdistill.trainer import restore_models

        restore_models(reloaded, load_checkpoint(tmp_path / "run" / "last.pt"))
        cont_b = train(
            cfg.replace(epochs=3, output_dir=str(tmp_path / "cb")), ds,
            models=reloaded,
            optimizer=None,
            start_epoch=2,
            history=result.history,
        )
        assert cont_a.final_loss == pytest.approx(cont_b.final_loss, rel=1e-6)
