import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdistill.core import (
    GROUND_TRUTH,
    HeatmapStack,
    LossBundle,
    TimeConfig,
    TrajectoryWindow,
    bce,
    mse_trajectory,
    patchify,
    render_gaussian_heatmap,
    render_trajectory_heatmaps,
    unpatchify,
)
from trajdistill.errors import InvalidArgumentError

torch.manual_seed(0)


class TestTimeConfig:
    def test_long_term_default_is_symmetric(self):
        cfg = TimeConfig()
        assert (cfg.t_h, cfg.t_wp, cfg.t_f) == (5, 15, 30)
        assert cfg.is_symmetric_split
        assert cfg.window_steps == 35

    def test_short_term_shape(self):
        cfg = TimeConfig(t_h=8, t_wp=6, t_f=12)
        assert cfg.is_symmetric_split

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(t_h=0),
            dict(t_f=1, t_wp=1),
            dict(t_wp=0),
            dict(t_wp=30, t_f=30),
            dict(stride_seconds=0.0),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TimeConfig(**{**dict(t_h=5, t_wp=15, t_f=30), **kwargs})


class TestRenderGaussian:
    def test_center_peak_and_symmetry(self):
        g = render_gaussian_heatmap((2.0, 2.0), 1.0, 5, 5)
        assert g[2, 2] == pytest.approx(1.0)
        # symmetric under (i, j) <-> (j, i) reflection about the center
        assert torch.equal(g, g.T)

    def test_tiny_sigma_concentrates(self):
        g = render_gaussian_heatmap((2.0, 2.0), 0.25, 5, 5)
        assert g[2, 2] == pytest.approx(1.0)
        off = g.clone()
        off[2, 2] = 0.0
        # nearest off-center cell is exp(-1/(2*0.0625)) = exp(-8) < 4e-4
        assert off.max() < 4e-4

    def test_mass_matches_analytic_integral(self):
        # numeric summation oracle over all cells: total mass ~ 2*pi*sigma^2
        g = render_gaussian_heatmap((32.0, 32.0), 1.0, 64, 64, dtype=torch.float64)
        assert float(g.sum()) == pytest.approx(2.0 * math.pi, rel=0.01)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(InvalidArgumentError):
            render_gaussian_heatmap((2.0, 2.0), 0.0, 5, 5)
        with pytest.raises(InvalidArgumentError):
            render_gaussian_heatmap((2.0, 2.0), -1.0, 5, 5)

    def test_center_outside_grid_clips_tail(self):
        g = render_gaussian_heatmap((-3.0, -3.0), 2.0, 8, 8)
        assert g.max() < 1.0
        assert g.argmax() == 0  # nearest corner

    def test_translation_equivariance_on_interior(self):
        # shifting the center by integer (dx, dy) shifts the grid exactly;
        # dyadic-rational centers keep the shifted coordinates fp-exact
        g0 = render_gaussian_heatmap((7.25, 6.5), 2.0, 24, 24)
        g1 = render_gaussian_heatmap((7.25 + 5, 6.5 + 4), 2.0, 24, 24)
        assert torch.equal(g0[:-4, :-5], g1[4:, 5:])


class TestRenderTrajectoryHeatmaps:
    def test_stack_shape_and_peaks(self):
        positions = torch.tensor([[3.0, 4.0], [5.0, 6.0], [8.0, 2.0], [1.0, 1.0], [9.0, 9.0]])
        stack = render_trajectory_heatmaps(positions, 2.0, 12, 12)
        assert stack.steps == 5
        assert stack.provenance == GROUND_TRUTH
        for t, (x, y) in enumerate(positions):
            assert stack.grid[t, int(y), int(x)] == pytest.approx(1.0)
            assert float(stack.grid[t].max()) == pytest.approx(1.0)

    def test_single_position_matches_single_render(self):
        stack = render_trajectory_heatmaps([[8.0, 8.0]], 3.0, 16, 16)
        direct = render_gaussian_heatmap((8.0, 8.0), 3.0, 16, 16)
        assert torch.equal(stack.grid[0], direct)

    def test_collinear_argmax_recovers_positions(self):
        # argmax oracle: per-step argmax equals the rounded input position
        positions = [[2.2, 3.1], [4.2, 5.1], [6.2, 7.1]]
        stack = render_trajectory_heatmaps(positions, 1.5, 16, 16)
        for t, (x, y) in enumerate(positions):
            flat = int(stack.grid[t].argmax())
            iy, ix = divmod(flat, 16)
            assert (ix, iy) == (round(x), round(y))

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            render_trajectory_heatmaps(torch.zeros((0, 2)), 1.0, 8, 8)


class TestPatchify:
    def test_small_round_trip(self):
        grid = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4)
        tokens = patchify(grid, 2)
        assert tokens.shape == (4, 4)
        assert torch.equal(unpatchify(tokens, 1, 4, 4, 2), grid)

    def test_token_counts(self):
        grid = torch.rand(6, 32, 32)
        tokens = patchify(grid, 8)
        assert tokens.shape == (16, 384)

    def test_matches_index_oracle(self):
        grid = torch.rand(2, 8, 8)
        p = 4
        tokens = patchify(grid, p)
        gw = 8 // p
        for n in range(tokens.shape[0]):
            bi, bj = divmod(n, gw)
            for c in range(2):
                for di in range(p):
                    for dj in range(p):
                        expect = grid[c, bi * p + di, bj * p + dj]
                        assert tokens[n, c * p * p + di * p + dj] == expect

    def test_non_divisible_rejected(self):
        with pytest.raises(InvalidArgumentError):
            patchify(torch.rand(1, 6, 6), 4)

    @settings(max_examples=25, deadline=None)
    @given(
        c=st.integers(1, 4),
        gh=st.integers(1, 4),
        gw=st.integers(1, 4),
        p=st.integers(1, 4),
    )
    def test_round_trip_property(self, c, gh, gw, p):
        grid = torch.rand(c, gh * p, gw * p)
        tokens = patchify(grid, p)
        assert torch.equal(unpatchify(tokens, c, gh * p, gw * p, p), grid)


def bce_oracle(pred, target):
    """Scalar-loop reference for mean binary cross-entropy."""
    eps = 1e-6
    total = 0.0
    n = 0
    for p, t in zip(pred.flatten().tolist(), target.flatten().tolist()):
        p = min(max(p, eps), 1.0 - eps)
        total += -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
        n += 1
    return total / n


class TestBce:
    def test_perfect_binary_prediction(self):
        target = (torch.rand(6, 6) > 0.5).double()
        assert float(bce(target.clone(), target)) <= 2e-6

    def test_uniform_half_prediction(self):
        target = (torch.rand(5, 5) > 0.5).double()
        pred = torch.full((5, 5), 0.5, dtype=torch.float64)
        assert float(bce(pred, target)) == pytest.approx(math.log(2.0), rel=1e-9)

    def test_matches_scalar_oracle(self):
        for _ in range(20):
            pred = torch.rand(4, 4, dtype=torch.float64)
            target = torch.rand(4, 4, dtype=torch.float64)
            got = float(bce(pred, target))
            want = bce_oracle(pred, target)
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            bce(torch.rand(3, 3), torch.rand(3, 4))

    def test_nonnegative_and_minimized_at_target(self):
        pred = torch.rand(5, 5, dtype=torch.float64).clamp(0.05, 0.95)
        target = pred.clone()
        base = float(bce(pred, target))
        assert base >= 0.0
        for _ in range(10):
            i, j = torch.randint(0, 5, (2,))
            bumped = pred.clone()
            bumped[i, j] = (pred[i, j] + 0.3).clamp(0.05, 0.95)
            if bumped[i, j] == pred[i, j]:
                bumped[i, j] = pred[i, j] - 0.3
            assert float(bce(bumped, target)) > base


class TestMseTrajectory:
    def test_identical_sequences(self):
        seq = torch.rand(9, 2)
        assert float(mse_trajectory(seq, seq)) == 0.0

    def test_constant_offset_three_four(self):
        gt = torch.rand(6, 2, dtype=torch.float64)
        pred = gt + torch.tensor([3.0, 4.0], dtype=torch.float64)
        assert float(mse_trajectory(pred, gt)) == pytest.approx(25.0, rel=1e-12)

    def test_matches_scalar_oracle(self):
        pred = torch.rand(7, 2, dtype=torch.float64)
        gt = torch.rand(7, 2, dtype=torch.float64)
        want = sum(
            (pred[t, 0] - gt[t, 0]) ** 2 + (pred[t, 1] - gt[t, 1]) ** 2 for t in range(7)
        ).item() / 7
        assert float(mse_trajectory(pred, gt)) == pytest.approx(want, rel=1e-10)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            mse_trajectory(torch.rand(4, 2), torch.rand(5, 2))

    def test_symmetry_and_zero_iff_equal(self):
        a = torch.rand(5, 2, dtype=torch.float64)
        b = torch.rand(5, 2, dtype=torch.float64)
        assert float(mse_trajectory(a, b)) == pytest.approx(float(mse_trajectory(b, a)), rel=1e-12)
        assert float(mse_trajectory(a, b)) > 0.0


class TestDomainTypes:
    def test_window_length_check(self):
        cfg = TimeConfig(t_h=2, t_wp=2, t_f=4)
        w = TrajectoryWindow("s", "a", torch.zeros(2, 2), torch.zeros(4, 2))
        assert w.matches(cfg)
        assert not w.matches(TimeConfig(t_h=3, t_wp=2, t_f=4))

    def test_heatmap_stack_validation(self):
        with pytest.raises(InvalidArgumentError):
            HeatmapStack(grid=torch.rand(4, 4))
        with pytest.raises(InvalidArgumentError):
            HeatmapStack(grid=torch.rand(1, 4, 4), provenance="mystery")

    def test_loss_bundle_total_identity(self):
        bundle = LossBundle(
            goal_student=torch.tensor(1.0),
            goal_teacher=torch.tensor(0.5),
            goal_distill=torch.tensor(0.25),
            traj_student=torch.tensor(2.0),
            traj_teacher=torch.tensor(1.0),
            traj_distill=torch.tensor(0.5),
            lam=0.5,
        )
        want = (1.0 + 0.5 + 0.25) + 0.5 * (2.0 + 1.0 + 0.5)
        assert float(bundle.total) == pytest.approx(want, rel=1e-12)
        assert bundle.as_dict()["total"] == pytest.approx(want, rel=1e-12)
