"""Sampler algebra (convex-combination step, average velocity), oracle
exactness, trajectory structure, straightness geometry, and determinism."""

import numpy as np
import pytest

from flowlab.denoiser import PredTarget
from flowlab.sample import (
    PredTargetError,
    SampleRequest,
    SamplerKind,
    Trajectory,
    average_velocity,
    diffusion_sample,
    euler_step_avg,
    flowlm_sample,
    instant_velocity_sample,
    sample_batch,
    straightness,
    trajectory_to_csv,
)
from flowlab.schedule import FlowTimeGrid, NoiseSchedule, flow_interpolate, sqrt_noise_schedule
from flowlab.textspace import EmbeddingTable


def margin_table(vocab_size=16, dim=12, seed=0, scale=1.0):
    """Unit-norm rows: every id has positive tied-head margin."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((vocab_size, dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return EmbeddingTable.from_array((scale * w).astype(np.float32))


class Z0Oracle:
    """Always predicts the true clean target block."""

    pred_target = PredTarget.Z0

    def __init__(self, z0_by_batchpos):
        self.z0 = z0_by_batchpos
        self.forward_calls = 0

    def __call__(self, z_in, t_input):
        z_in = np.asarray(z_in)
        self.forward_calls += z_in.shape[0] if z_in.ndim == 3 else 1
        src_len = z_in.shape[-2] - self.z0.shape[-2]
        out = z_in.copy()
        out[..., src_len:, :] = self.z0
        return out


class VelocityOracle:
    """Returns the exact straight-path velocity eps - z0 at every time."""

    pred_target = PredTarget.VELOCITY

    def __init__(self, velocity):
        self.velocity = velocity
        self.forward_calls = 0

    def __call__(self, z_in, t_input):
        z_in = np.asarray(z_in)
        self.forward_calls += z_in.shape[0] if z_in.ndim == 3 else 1
        src_len = z_in.shape[-2] - self.velocity.shape[-2]
        out = np.zeros_like(z_in)
        out[..., src_len:, :] = self.velocity
        return out


class TestVelocityAlgebra:
    def test_fixed_point_zero_velocity(self):
        z = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(average_velocity(z, z, 0.5), np.zeros((3, 4)))

    def test_endpoint_t1(self):
        eps = np.random.default_rng(1).standard_normal((2, 4))
        np.testing.assert_allclose(average_velocity(eps, np.zeros((2, 4)), 1.0), eps)

    def test_on_straight_path_equals_instant_velocity(self):
        rng = np.random.default_rng(2)
        z0 = rng.standard_normal((5, 8)).astype(np.float32)
        z1 = rng.standard_normal((5, 8)).astype(np.float32)
        for k in range(1, 21):
            t = k / 20
            z_t = flow_interpolate(z0, z1, t)
            v = average_velocity(z_t, z0, t)
            np.testing.assert_allclose(v, z1 - z0, atol=1e-5)

    def test_t_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            average_velocity(np.zeros(2), np.zeros(2), 0.0)


class TestEulerStep:
    def test_final_step_lands_on_prediction(self):
        rng = np.random.default_rng(3)
        z_t = rng.standard_normal((4, 6)).astype(np.float32)
        pred = rng.standard_normal((4, 6)).astype(np.float32)
        np.testing.assert_array_equal(euler_step_avg(z_t, pred, 0.25, 0.25), pred)

    def test_tiny_dt_keeps_state(self):
        rng = np.random.default_rng(4)
        z_t = rng.standard_normal((4, 6)).astype(np.float64)
        pred = rng.standard_normal((4, 6)).astype(np.float64)
        out = euler_step_avg(z_t, pred, 1.0, 1e-9)
        assert np.linalg.norm(out - z_t) < 1e-6 * np.linalg.norm(z_t - pred)

    def test_midpoint_at_half_weight(self):
        z_t = np.array([2.0, 0.0])
        pred = np.array([0.0, 2.0])
        np.testing.assert_allclose(euler_step_avg(z_t, pred, 1.0, 0.5), [1.0, 1.0])

    def test_equals_velocity_form(self):
        rng = np.random.default_rng(5)
        z_t = rng.standard_normal((3, 5)).astype(np.float32)
        pred = rng.standard_normal((3, 5)).astype(np.float32)
        for n in (1, 3, 5, 20):
            for k in range(1, n + 1):
                t, dt = k / n, 1.0 / n
                a = euler_step_avg(z_t, pred, t, dt)
                b = z_t - average_velocity(z_t, pred, t) * dt
                np.testing.assert_allclose(a, b, atol=1e-6)

    def test_dt_bounds(self):
        z = np.zeros(2)
        with pytest.raises(ValueError):
            euler_step_avg(z, z, 0.2, 0.3)
        with pytest.raises(ValueError):
            euler_step_avg(z, z, 0.2, 0.0)

    def test_constant_prediction_telescopes_to_prediction(self):
        rng = np.random.default_rng(6)
        pred = rng.standard_normal((2, 4)).astype(np.float32)
        for n in (1, 2, 3, 5, 20):
            z = rng.standard_normal((2, 4)).astype(np.float32)
            for k in range(n, 0, -1):
                z = euler_step_avg(z, pred, k / n, 1.0 / n)
            np.testing.assert_array_equal(z, pred)


class TestFlowlmSampler:
    def _request(self, steps, seed=0, record=False):
        return SampleRequest(src_ids=(4, 5, 1), target_len=4, steps=steps,
                             kind=SamplerKind.FLOW_AVG,
                             record_trajectory=record, seed=seed)

    def test_one_step_is_single_forward_and_rounds_prediction(self):
        table = margin_table()
        rng = np.random.default_rng(7)
        true_ids = np.array([6, 7, 8, 2])
        z0 = table.array[true_ids]
        oracle = Z0Oracle(z0)
        ids, _ = flowlm_sample(oracle, table, FlowTimeGrid(1), self._request(1))
        assert oracle.forward_calls == 1
        np.testing.assert_array_equal(ids, true_ids)

    @pytest.mark.parametrize("steps", [1, 3, 5])
    def test_oracle_recovers_ground_truth(self, steps):
        table = margin_table(seed=1)
        rng = np.random.default_rng(8)
        true_ids = rng.integers(0, 16, size=4)
        oracle = Z0Oracle(table.array[true_ids])
        ids, _ = flowlm_sample(oracle, table, FlowTimeGrid(steps),
                               self._request(steps, seed=3))
        np.testing.assert_array_equal(ids, true_ids)

    def test_fixed_seed_determinism(self):
        table = margin_table(seed=2)
        oracle = Z0Oracle(table.array[[1, 2, 3, 4]])
        a, _ = flowlm_sample(oracle, table, FlowTimeGrid(5), self._request(5, seed=11))
        b, _ = flowlm_sample(oracle, table, FlowTimeGrid(5), self._request(5, seed=11))
        np.testing.assert_array_equal(a, b)

    def test_trajectory_shape_and_times(self):
        table = margin_table(seed=3)
        oracle = Z0Oracle(table.array[[5, 6, 7, 8]])
        for n in (1, 4, 20):
            _, traj = flowlm_sample(oracle, table, FlowTimeGrid(n),
                                    self._request(n, record=True))
            assert len(traj) == n + 1
            expected = [1.0] + [(k - 1) / n for k in range(n, 0, -1)]
            np.testing.assert_allclose(traj.times, expected, atol=1e-12)
            assert traj.times[0] == 1.0 and traj.times[-1] == 0.0

    def test_pred_target_mismatch_typed_error(self):
        table = margin_table(seed=4)
        wrong = VelocityOracle(np.zeros((4, 12), dtype=np.float32))
        with pytest.raises(PredTargetError):
            flowlm_sample(wrong, table, FlowTimeGrid(3), self._request(3))

    def test_batched_equals_single(self):
        table = margin_table(seed=5)
        oracle = Z0Oracle(table.array[[2, 9, 13, 1]])
        reqs = [self._request(3, seed=s) for s in (0, 1, 2)]
        batch_ids, _, _ = sample_batch(oracle, table, FlowTimeGrid(3), reqs)
        for req, want in zip(reqs, batch_ids):
            single, _ = flowlm_sample(oracle, table, FlowTimeGrid(3), req)
            np.testing.assert_array_equal(single, want)


class TestInstantVelocitySampler:
    def test_exact_velocity_recovers_clean_data_any_steps(self):
        table = margin_table(seed=6)
        rng = np.random.default_rng(9)
        true_ids = rng.integers(0, 16, size=4)
        z0 = table.array[true_ids]
        for steps in (1, 2, 5, 20):
            req = SampleRequest((3, 2, 1), 4, steps, SamplerKind.FLOW_INSTANT, seed=17)
            eps = np.random.default_rng(17).standard_normal((4, 12)).astype(np.float32)
            oracle = VelocityOracle(eps - z0)
            ids, _ = instant_velocity_sample(oracle, table, FlowTimeGrid(steps), req)
            np.testing.assert_array_equal(ids, true_ids)

    def test_zero_velocity_one_step_decodes_init(self):
        table = margin_table(seed=7)
        req = SampleRequest((3, 2, 1), 4, 1, SamplerKind.FLOW_INSTANT, seed=23)
        oracle = VelocityOracle(np.zeros((4, 12), dtype=np.float32))
        ids, _ = instant_velocity_sample(oracle, table, FlowTimeGrid(1), req)
        init = np.random.default_rng(23).standard_normal((4, 12)).astype(np.float32)
        from flowlab.textspace import round_tokens
        np.testing.assert_array_equal(ids, round_tokens(init, table))

    def test_requires_velocity_target(self):
        table = margin_table(seed=8)
        wrong = Z0Oracle(np.zeros((4, 12), dtype=np.float32))
        req = SampleRequest((3, 2, 1), 4, 2, SamplerKind.FLOW_INSTANT)
        with pytest.raises(PredTargetError):
            instant_velocity_sample(wrong, table, FlowTimeGrid(2), req)


class TestDiffusionSampler:
    def _sched(self, n=40):
        return sqrt_noise_schedule(n)

    def test_frozen_chain_decodes_init(self):
        # all beta -> 0 with the limit-consistent denoiser (z0_pred = z_t,
        # since no noise was ever added): posterior coefficients sum onto
        # z_t, variance vanishes, and the chain barely moves
        n = 10
        ab = np.concatenate([[1.0], 0.5 * (1.0 - 1e-9 * np.arange(1, n + 1))])
        alphas = ab[1:] / ab[:-1]
        pad = lambda a: np.concatenate([[np.nan], a])
        sched = NoiseSchedule(num_steps=n, betas=pad(1 - alphas), alphas=pad(alphas),
                              alpha_bars=ab)
        table = margin_table(seed=9)

        class Identity:
            pred_target = PredTarget.Z0
            forward_calls = 0

            def __call__(self, z_in, t_input):
                return np.asarray(z_in)

        req = SampleRequest((5, 6, 1), 4, n, SamplerKind.DIFFUSION_ANCESTRAL, seed=31)
        ids, traj = diffusion_sample(Identity(), table, sched,
                                     SampleRequest((5, 6, 1), 4, n,
                                                   SamplerKind.DIFFUSION_ANCESTRAL,
                                                   record_trajectory=True, seed=31))
        init = np.random.default_rng(31).standard_normal((4, 12)).astype(np.float32)
        from flowlab.textspace import round_tokens
        np.testing.assert_array_equal(ids, round_tokens(init, table))
        drift = np.abs(traj.snapshots[-1] - traj.snapshots[0]).max()
        assert drift < 1e-3

    def test_oracle_recovers_ground_truth(self):
        sched = self._sched(40)
        table = margin_table(seed=10)
        rng = np.random.default_rng(11)
        true_ids = rng.integers(0, 16, size=4)
        oracle = Z0Oracle(table.array[true_ids])
        req = SampleRequest((5, 6, 1), 4, 40, SamplerKind.DIFFUSION_ANCESTRAL, seed=37)
        ids, _ = diffusion_sample(oracle, table, sched, req)
        assert oracle.forward_calls == 40
        np.testing.assert_array_equal(ids, true_ids)

    def test_wrong_step_count_rejected(self):
        sched = self._sched(40)
        table = margin_table(seed=11)
        oracle = Z0Oracle(table.array[[1, 2, 3, 4]])
        req = SampleRequest((5, 6, 1), 4, 10, SamplerKind.DIFFUSION_ANCESTRAL)
        with pytest.raises(ValueError, match="respacing"):
            diffusion_sample(oracle, table, sched, req)

    def test_fixed_seed_determinism(self):
        sched = self._sched(20)
        table = margin_table(seed=12)
        oracle = Z0Oracle(table.array[[8, 9, 10, 11]])
        req = SampleRequest((5, 6, 1), 4, 20, SamplerKind.DIFFUSION_ANCESTRAL, seed=41)
        a, _ = diffusion_sample(oracle, table, sched, req)
        b, _ = diffusion_sample(oracle, table, sched, req)
        np.testing.assert_array_equal(a, b)


class TestStraightness:
    def _traj(self, points):
        return Trajectory(times=list(np.linspace(1, 0, len(points))),
                          snapshots=[np.asarray(p, dtype=np.float64) for p in points])

    def test_collinear_is_one(self):
        t = self._traj([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        assert straightness(t) == pytest.approx(1.0)

    def test_right_angle(self):
        t = self._traj([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        assert straightness(t) == pytest.approx(np.sqrt(2) / 2)

    def test_retracing_path(self):
        t = self._traj([[0.0], [2.0], [1.0]])
        assert straightness(t) == pytest.approx(1.0 / 3.0)

    def test_degenerate_zero_length_is_one(self):
        t = self._traj([[1.0, 2.0], [1.0, 2.0]])
        assert straightness(t) == 1.0

    def test_needs_two_snapshots(self):
        with pytest.raises(ValueError):
            straightness(self._traj([[0.0]]))


class TestTrajectoryCsv:
    def test_header_and_rows(self):
        traj = Trajectory(times=[1.0, 0.0],
                          snapshots=[np.ones((3, 4), dtype=np.float32),
                                     np.zeros((3, 4), dtype=np.float32)],
                          meta={})
        text = trajectory_to_csv(traj, position=2)
        lines = text.strip().split("\n")
        assert lines[0] == "k,t,dim0,dim1,dim2,dim3"
        assert lines[1].startswith("0,1,")
        assert lines[2].startswith("1,0,")
        assert traj.meta["position"] == 2
        assert len(lines) == 3
