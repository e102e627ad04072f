import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmmtrack.errors import ConfigurationError, IntegrationDivergence
from nmmtrack.model import (
    AUG_NAMES, LAYOUT, N_AUG, ModelParams, ParamSchedule, Trajectory, build_matrices, initial_state, one_step,
    sigmoid, simulate, simulate_batch, step,
)


def erf_series(x, terms=60):
    """Maclaurin series of erf, independent of scipy."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def zero_gain_params(**kw):
    return ModelParams(alpha_pe=0.0, alpha_pi=0.0, alpha_ip=0.0, alpha_ep=0.0, u=0.0, **kw)


class TestSigmoid:
    def test_threshold_is_half(self):
        assert sigmoid(6.0, 6.0, 3.0) == 0.5

    def test_limits(self):
        assert sigmoid(1e6) == 1.0
        assert sigmoid(-1e6) == 0.0

    def test_one_slope_above_threshold(self):
        expected = 0.5 * (erf_series(1.0) + 1.0)
        assert sigmoid(9.0, 6.0, 3.0) == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.92135, abs=1e-5)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            sigmoid(np.nan)
        with pytest.raises(ValueError):
            sigmoid(1.0, 6.0, 0.0)

    @given(st.floats(-200, 200), st.floats(0, 50))
    def test_monotone_and_bounded(self, v, dv):
        a, b = sigmoid(v), sigmoid(v + dv)
        assert 0.0 <= a <= b <= 1.0


class TestParams:
    def test_time_constant_range(self):
        with pytest.raises(ConfigurationError):
            ModelParams(tau_e=0.001)
        with pytest.raises(ConfigurationError):
            ModelParams(dt=0.0)
        with pytest.raises(ConfigurationError):
            ModelParams(r_obs=-1.0)

    def test_gain_scaling_keeps_kernel_integral(self):
        p = ModelParams()
        q = p.with_time_constants(0.04, 0.05)
        assert q.alpha_pe * q.tau_e == pytest.approx(p.alpha_pe * p.tau_e)
        assert q.alpha_pi * q.tau_i == pytest.approx(p.alpha_pi * p.tau_i)
        assert q.u == p.u
        assert p.with_time_constants(0.02, 0.02, scale_input=True).u == pytest.approx(p.u / 2)

    def test_dict_round_trip(self):
        p = ModelParams(u=123.0)
        assert ModelParams.from_dict(p.to_dict()) == p
        with pytest.raises(ConfigurationError):
            ModelParams.from_dict({"bogus": 1})


class TestMatrices:
    def test_psi_block(self):
        A, B, C, H = build_matrices(ModelParams(tau_e=0.01))
        np.testing.assert_array_equal(A[0:2, 0:2], [[0, 1], [-10000, -200]])

    def test_adjacency_is_binary(self):
        _, _, C, _ = build_matrices(ModelParams())
        assert set(np.unique(C)) <= {0.0, 1.0}
        assert not C[4].any()  # pu bypasses the sigmoid

    def test_observation_row(self):
        _, _, _, H = build_matrices(ModelParams())
        x = np.random.default_rng(0).normal(size=10)
        x[[0, 2, 8]] = [3.0, -2.0, 1.0]
        assert H @ x == pytest.approx(2.0)

    def test_gain_drive_on_z_rows(self):
        p = ModelParams()
        _, B, _, _ = build_matrices(p)
        assert B[1, 0] == pytest.approx(p.alpha_pe / p.tau_e)
        assert B[3, 1] == pytest.approx(p.alpha_pi / p.tau_i)
        assert B[9, 4] == pytest.approx(1.0 / p.tau_e)
        assert not B[0::2].any()

    def test_zero_gains_reduce_to_linear_system(self):
        p = zero_gain_params()
        A, B, C, _ = build_matrices(p)
        xi = initial_state(p)
        xi[:10] = np.random.default_rng(1).normal(size=10)
        expected = xi[:10] + p.dt * (A @ xi[:10])
        np.testing.assert_allclose(step(xi, p)[:10], expected, rtol=1e-13, atol=1e-12)

    def test_matrix_form_matches_step(self):
        p = ModelParams()
        A, B, C, _ = build_matrices(p)
        xi = initial_state(p)
        xi[:10] = np.random.default_rng(2).normal(scale=5, size=10)
        r = np.concatenate([sigmoid(C[:4] @ xi[:10]), [p.u]])
        expected = xi[:10] + p.dt * (A @ xi[:10] + B @ r)
        np.testing.assert_allclose(step(xi, p)[:10], expected, rtol=1e-12)


class TestStep:
    def test_zero_fixed_point(self):
        p = zero_gain_params()
        np.testing.assert_array_equal(step(np.zeros(N_AUG), p, np.zeros(N_AUG)), np.zeros(N_AUG))

    def test_hand_computed_euler(self):
        p = ModelParams()
        rng = np.random.default_rng(3)
        xi = initial_state(p)
        xi[:10] = rng.normal(scale=4, size=10)
        out = step(xi, p)
        phi = lambda v: 0.5 * (math.erf((v - 6.0) / 3.0) + 1.0)
        v_p = xi[0] + xi[2] + xi[8]
        # channel: (v row, gain, presynaptic potential or None, tau)
        table = [(0, p.alpha_pe, xi[4], p.tau_e), (2, p.alpha_pi, xi[6], p.tau_i), (4, p.alpha_ep, v_p, p.tau_e),
                 (6, p.alpha_ip, v_p, p.tau_e), (8, 1.0, None, p.tau_e)]
        for row, gain, pre, tau in table:
            v, z = xi[row], xi[row + 1]
            rate = p.u if pre is None else phi(pre)
            assert out[row] == pytest.approx(v + p.dt * z, rel=1e-13)
            dz = gain * rate / tau - 2 * z / tau - v / tau**2
            assert out[row + 1] == pytest.approx(z + p.dt * dz, rel=1e-12, abs=1e-9)
        np.testing.assert_array_equal(out[10:], xi[10:])

    def test_divergence_names_channel(self):
        xi = initial_state(ModelParams())
        noise = np.zeros(N_AUG)
        noise[5] = np.inf
        with pytest.raises(IntegrationDivergence) as err:
            step(xi, ModelParams(), noise)
        assert err.value.channel == AUG_NAMES[5]

    def test_linear_when_sigmoid_removed(self):
        p = ModelParams()
        rng = np.random.default_rng(4)
        x1, x2 = rng.normal(size=(2, N_AUG))
        a, b = 1.7, -0.4
        flat = lambda v, v0, s: np.zeros_like(v)
        lhs = one_step(a * x1 + b * x2, p.tau_e, p.tau_i, p.v0, p.sigma_s, p.dt, flat)
        rhs = a * one_step(x1, p.tau_e, p.tau_i, p.v0, p.sigma_s, p.dt, flat) + b * one_step(
            x2, p.tau_e, p.tau_i, p.v0, p.sigma_s, p.dt, flat)
        np.testing.assert_allclose(lhs[:10], rhs[:10], rtol=1e-12, atol=1e-9)


class TestSimulate:
    def test_alpha_peak_at_default_point(self):
        tr = simulate(ModelParams(), 8.0, seed=1)
        y = tr.observations - tr.observations.mean()
        freqs = np.fft.rfftfreq(y.size, tr.dt)
        peak = freqs[np.argmax(np.abs(np.fft.rfft(y))[1:]) + 1]
        assert 8.0 <= peak <= 12.0

    def test_zero_system_is_silent(self):
        p = zero_gain_params(q_process=0.0, r_obs=0.0)
        tr = simulate(p, 1.0, seed=0)
        assert not tr.observations.any()

    def test_deterministic(self):
        a = simulate(ModelParams(), 1.0, seed=7)
        b = simulate(ModelParams(), 1.0, seed=7)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.observations, b.observations)
        c = simulate(ModelParams(), 1.0, seed=8)
        assert not np.array_equal(a.observations, c.observations)

    def test_batch_matches_single(self):
        ps = [ModelParams(u=1000.0), ModelParams(u=3000.0)]
        batch = simulate_batch(ps, 0.5, [11, 12])
        for p, s, tr in zip(ps, [11, 12], batch):
            np.testing.assert_array_equal(simulate(p, 0.5, seed=s).observations, tr.observations)

    def test_observation_noise_bound(self):
        tr = simulate(ModelParams(r_obs=2.0), 20.0, seed=5)
        resid = np.abs(tr.observations - tr.clean_observation())
        assert np.mean(resid <= 5 * 2.0) >= 0.999

    def test_times_and_lengths(self):
        tr = simulate(ModelParams(), 0.5, seed=0)
        assert len(tr) == 200
        np.testing.assert_allclose(np.diff(tr.times), tr.dt)
        assert tr.targets().shape == (200, 17)

    def test_euler_first_order(self):
        def terminal(dt):
            p = ModelParams(dt=dt, q_process=0.0, r_obs=0.0)
            return simulate(p, 0.25, seed=0, transient=0.0).states[-1, :10]

        base = 1.0 / 400.0
        ref = terminal(base / 64)
        e1 = np.linalg.norm(terminal(base) - ref)
        e2 = np.linalg.norm(terminal(base / 2) - ref)
        assert 1.5 <= e1 / e2 <= 2.5

    def test_parameter_block_constant_without_walk(self):
        tr = simulate(ModelParams(q_param=0.0), 1.0, seed=2)
        np.testing.assert_array_equal(tr.states[:, 10:], np.tile(ModelParams().theta, (len(tr), 1)))

    def test_schedule_drives_parameters(self):
        n = 400
        p = ModelParams()
        theta = np.tile(p.theta, (n, 1))
        theta[:, 0] = np.linspace(2000, 4000, n)
        sched = ParamSchedule(np.full(n, 0.01), np.linspace(0.02, 0.03, n), theta)
        tr = simulate(p, 1.0, seed=0, schedule=sched)
        np.testing.assert_array_equal(tr.states[:, 10], theta[:, 0])
        np.testing.assert_array_equal(tr.tau[:, 1], sched.tau_i)

    def test_duration_guard(self):
        with pytest.raises(ConfigurationError):
            simulate(ModelParams(), 0.0)

    def test_csv_round_trip(self, tmp_path):
        tr = simulate(ModelParams(), 0.5, seed=9)
        tr.to_csv(tmp_path / "traj.csv")
        back = Trajectory.from_csv(tmp_path / "traj.csv")
        np.testing.assert_array_equal(back.states, tr.states)
        np.testing.assert_array_equal(back.observations, tr.observations)
        np.testing.assert_array_equal(back.times, tr.times)
        assert back.params == tr.params and back.seed == 9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_layout_indices_consistent(seed):
    xi = np.random.default_rng(seed).normal(size=N_AUG)
    assert LAYOUT.observation_row(N_AUG) @ xi == pytest.approx(xi[0] + xi[2] + xi[8])
    assert [AUG_NAMES[i] for i in LAYOUT.param_index] == ["u", "alpha_pe", "alpha_pi", "alpha_ip", "alpha_ep"]
    assert [AUG_NAMES[i][2:] for i in LAYOUT.v_index] == ["pe", "pi", "ep", "ip", "pu"]
