import math

import pytest
import torch

from trajdistill.core import TimeConfig, TrajectoryWindow, SceneMap
from trajdistill.dataio import WindowGroup, generate_synthetic, cut_windows, group_windows
from trajdistill.errors import EmptySplitError, InvalidArgumentError
from trajdistill.metrics import (
    ConstantVelocityPredictor,
    EvalReport,
    evaluate,
    horizon_sweep,
    min_ade_fde,
    write_horizon_table,
)

torch.manual_seed(0)


class TestMinAdeFde:
    def test_single_perfect_sample(self):
        gt = torch.rand(6, 2)
        ade, fde = min_ade_fde(gt[None], gt)
        assert (ade, fde) == (0.0, 0.0)

    def test_two_constant_offset_samples(self):
        gt = torch.rand(5, 2, dtype=torch.float64)
        near = gt + torch.tensor([1.0, 0.0], dtype=torch.float64)
        far = gt + torch.tensor([2.0, 0.0], dtype=torch.float64)
        ade, fde = min_ade_fde(torch.stack([far, near]), gt)
        assert ade == pytest.approx(1.0, rel=1e-12)
        assert fde == pytest.approx(1.0, rel=1e-12)

    def test_matches_brute_force_oracle(self):
        g = torch.Generator().manual_seed(4)
        samples = torch.rand(5, 4, 2, generator=g, dtype=torch.float64)
        gt = torch.rand(4, 2, generator=g, dtype=torch.float64)
        ade, fde = min_ade_fde(samples, gt)
        # exhaustive per-sample oracle
        want_ades, want_fdes = [], []
        for s in range(5):
            ds = [
                math.dist(samples[s, t].tolist(), gt[t].tolist()) for t in range(4)
            ]
            want_ades.append(sum(ds) / 4)
            want_fdes.append(ds[-1])
        assert ade == pytest.approx(min(want_ades), rel=1e-12)
        assert fde == pytest.approx(min(want_fdes), rel=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            min_ade_fde(torch.rand(2, 5, 2), torch.rand(4, 2))

    def test_minima_taken_independently(self):
        gt = torch.zeros(3, 2, dtype=torch.float64)
        # sample A: best ADE, bad FDE; sample B: bad ADE, best FDE
        a = torch.tensor([[0.1, 0.0], [0.1, 0.0], [5.0, 0.0]], dtype=torch.float64)
        b = torch.tensor([[4.0, 0.0], [4.0, 0.0], [0.1, 0.0]], dtype=torch.float64)
        ade, fde = min_ade_fde(torch.stack([a, b]), gt)
        assert ade == pytest.approx((0.1 + 0.1 + 5.0) / 3)
        assert fde == pytest.approx(0.1)

    def test_min_over_k_is_monotone(self):
        g = torch.Generator().manual_seed(7)
        gt = torch.rand(5, 2, generator=g, dtype=torch.float64)
        samples = torch.rand(10, 5, 2, generator=g, dtype=torch.float64)
        prev = (math.inf, math.inf)
        for k in range(1, 11):
            ade, fde = min_ade_fde(samples[:k], gt)
            assert ade <= prev[0] + 1e-15
            assert fde <= prev[1] + 1e-15
            prev = (ade, fde)


class PerfectPredictor:
    """Oracle stub: returns the ground-truth future verbatim for every sample."""

    def predict(self, scene, windows, cfg, k, horizon, generator=None):
        gt = torch.stack([w.future[:horizon] for w in windows])
        return gt[None].expand(k, -1, -1, -1)


class NoisyPredictor:
    """Ground truth plus per-sample Gaussian noise (seeded via generator)."""

    def __init__(self, scale=1.0):
        self.scale = scale

    def predict(self, scene, windows, cfg, k, horizon, generator=None):
        gt = torch.stack([w.future[:horizon] for w in windows]).float()
        noise = torch.randn(k, *gt.shape, generator=generator) * self.scale
        return gt[None] + noise


def synthetic_groups(cfg, n_scenes=3, agents=2, motion="turn", noise=0.2, seed=0):
    pairs = generate_synthetic(
        seed=seed, n_scenes=n_scenes, agents_per_scene=agents, motion=motion,
        noise_sigma=noise, steps=cfg.window_steps,
    )
    groups = []
    scenes = {}
    recs = []
    for rec, scene in pairs:
        scenes[scene.scene_id] = scene
        recs.append(rec)
        groups.extend(group_windows(cut_windows(rec, cfg)))
    return groups, scenes, recs


CFG = TimeConfig(t_h=5, t_wp=15, t_f=30)


class TestEvaluate:
    def test_perfect_stub_scores_zero(self):
        groups, scenes, _ = synthetic_groups(CFG)
        report = evaluate(PerfectPredictor(), groups, scenes, CFG, k=20, seed=0)
        assert report.min_ade == 0.0
        assert report.min_fde == 0.0
        assert report.k == 20
        assert report.n_windows == 6

    def test_empty_split_rejected(self):
        with pytest.raises(EmptySplitError):
            evaluate(PerfectPredictor(), [], {}, CFG)

    def test_more_samples_never_hurt(self):
        groups, scenes, _ = synthetic_groups(CFG, n_scenes=2)
        r1 = evaluate(NoisyPredictor(), groups, scenes, CFG, k=1, seed=3)
        r20 = evaluate(NoisyPredictor(), groups, scenes, CFG, k=20, seed=3)
        assert r20.min_ade <= r1.min_ade
        assert r20.min_fde <= r1.min_fde

    def test_seed_determinism(self):
        groups, scenes, _ = synthetic_groups(CFG, n_scenes=2)
        a = evaluate(NoisyPredictor(), groups, scenes, CFG, k=5, seed=11)
        b = evaluate(NoisyPredictor(), groups, scenes, CFG, k=5, seed=11)
        assert (a.min_ade, a.min_fde) == (b.min_ade, b.min_fde)

    def test_pixel_scale_applies_to_report(self):
        groups, scenes, _ = synthetic_groups(CFG, n_scenes=1)
        r1 = evaluate(NoisyPredictor(), groups, scenes, CFG, k=2, seed=1)
        r2 = evaluate(NoisyPredictor(), groups, scenes, CFG, k=2, seed=1, pixel_scale=2.0)
        assert r2.min_ade == pytest.approx(2 * r1.min_ade, rel=1e-12)


class TestConstantVelocity:
    def test_extrapolates_last_displacement(self):
        obs = torch.tensor([[0.0, 0.0], [1.0, 0.5], [2.0, 1.0]])
        w = TrajectoryWindow("s", "a", obs, torch.zeros(4, 2))
        pred = ConstantVelocityPredictor().predict(None, [w], CFG, k=3, horizon=4)
        assert pred.shape == (3, 1, 4, 2)
        want = torch.tensor([[3.0, 1.5], [4.0, 2.0], [5.0, 2.5], [6.0, 3.0]])
        assert torch.allclose(pred[0, 0], want)
        assert torch.equal(pred[0], pred[2])

    def test_exact_on_noise_free_straight_lines(self):
        cfg = TimeConfig(t_h=4, t_wp=4, t_f=8)
        groups, scenes, _ = synthetic_groups(cfg, motion="straight", noise=0.0, n_scenes=2)
        report = evaluate(ConstantVelocityPredictor(), groups, scenes, cfg, k=1, seed=0)
        assert report.min_ade < 1e-5
        assert report.min_fde < 1e-5


class TestHorizonSweep:
    def test_singleton_sweep_matches_evaluate(self):
        cfg = TimeConfig(t_h=8, t_wp=6, t_f=12)
        groups, scenes, recs = synthetic_groups(cfg, n_scenes=2)
        rows, warnings = horizon_sweep(
            PerfectPredictor(), recs, scenes, cfg, horizons=[12], k=4, seed=0
        )
        assert warnings == []
        assert len(rows) == 1
        h, ade, fde = rows[0]
        report = evaluate(PerfectPredictor(), groups, scenes, cfg, k=4, seed=0, horizon=12)
        assert (h, ade, fde) == (12, report.min_ade, report.min_fde)

    def test_output_sorted_ascending(self):
        cfg = TimeConfig(t_h=4, t_wp=4, t_f=8)
        _, scenes, recs = synthetic_groups(cfg, n_scenes=2)
        rows, _ = horizon_sweep(
            NoisyPredictor(), recs, scenes, cfg, horizons=[8, 4, 6], k=2, seed=0
        )
        assert [r[0] for r in rows] == [4, 6, 8]

    def test_noisy_error_grows_with_horizon(self):
        cfg = TimeConfig(t_h=5, t_wp=10, t_f=20)
        _, scenes, recs = synthetic_groups(
            cfg, n_scenes=4, agents=3, motion="straight", noise=0.5, seed=5
        )
        rows, _ = horizon_sweep(
            ConstantVelocityPredictor(), recs, scenes, cfg, horizons=[5, 10, 20], k=1, seed=0
        )
        ades = [r[1] for r in rows]
        assert ades[0] < ades[1] < ades[2]

    def test_overlong_horizon_skipped_with_warning(self):
        cfg = TimeConfig(t_h=4, t_wp=4, t_f=8)
        _, scenes, recs = synthetic_groups(cfg, n_scenes=1)
        rows, warnings = horizon_sweep(
            NoisyPredictor(), recs, scenes, cfg, horizons=[8, 500], k=2, seed=0
        )
        assert [r[0] for r in rows] == [8]
        assert any("500" in w for w in warnings)


class TestEvalReport:
    def test_serialization(self, tmp_path):
        report = EvalReport(min_ade=1.25, min_fde=2.5, k=20, n_windows=7)
        report.to_kv(tmp_path / "r.txt")
        report.to_csv(tmp_path / "r.csv")
        kv = dict(
            line.split("=", 1) for line in (tmp_path / "r.txt").read_text().splitlines()
        )
        assert float(kv["min_ade"]) == 1.25
        assert int(kv["k"]) == 20
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "horizon,ade,fde"

    def test_invalid_report_rejected(self):
        with pytest.raises(InvalidArgumentError):
            EvalReport(min_ade=-1.0, min_fde=0.0, k=1, n_windows=1)
        with pytest.raises(InvalidArgumentError):
            EvalReport(min_ade=0.0, min_fde=0.0, k=0, n_windows=1)

    def test_horizon_table_write(self, tmp_path):
        write_horizon_table([(5, 1.0, 2.0), (10, 3.0, 4.0)], tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "horizon,ade,fde"
        assert len(lines) == 3
