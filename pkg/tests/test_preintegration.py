import numpy as np
import pytest

from radionav.lie import Pose, skew, so3_exp, so3_log
from radionav.preintegration import (
    GravityModel,
    ImuNoiseModel,
    ImuSample,
    PreintegratedImu,
    predict,
    reset_with_bias,
    residual_and_jacobians,
)
from radionav.states import ImuBias, NavState, retract

G = GravityModel()


def make_stream(rng, n, dt, rate_scale=1.0, force_scale=5.0):
    t = 0.0
    samples = []
    for _ in range(n):
        samples.append(ImuSample(
            timestamp=t,
            specific_force=rng.uniform(-force_scale, force_scale, 3),
            angular_rate=rng.uniform(-rate_scale, rate_scale, 3),
        ))
        t += dt
    return samples


def integrate_stream(samples, dt, bias=None, noise=None):
    acc = PreintegratedImu(bias, noise)
    for s in samples:
        acc.integrate(s, dt)
    return acc


def rk4_strapdown(state, samples, dt, gravity, substeps=16):
    """Independent direct-integration oracle: RK4 on the strapdown ODE with
    each sample held constant over its interval."""
    r = state.rotation.copy()
    v = state.velocity.copy()
    p = state.position.copy()
    g = gravity.vector

    def deriv(r, v, p, w, a):
        return r @ skew(w), g + r @ a, v

    h = dt / substeps
    for s in samples:
        w = s.angular_rate
        a = s.specific_force
        for _ in range(substeps):
            k1 = deriv(r, v, p, w, a)
            k2 = deriv(r + 0.5 * h * k1[0], v + 0.5 * h * k1[1], p + 0.5 * h * k1[2], w, a)
            k3 = deriv(r + 0.5 * h * k2[0], v + 0.5 * h * k2[1], p + 0.5 * h * k2[2], w, a)
            k4 = deriv(r + h * k3[0], v + h * k3[1], p + h * k3[2], w, a)
            r = r + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            v = v + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            p = p + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return r, v, p


class TestIntegrate:
    def test_null_input(self):
        acc = PreintegratedImu()
        for i in range(100):
            acc.integrate(ImuSample(i * 0.01, np.zeros(3), np.zeros(3)), 0.01)
        np.testing.assert_allclose(acc.delta_rotation, np.eye(3))
        np.testing.assert_allclose(acc.delta_velocity, np.zeros(3))
        np.testing.assert_allclose(acc.delta_position, np.zeros(3))
        assert acc.delta_time == pytest.approx(1.0)

    def test_constant_acceleration_kinematics(self):
        # 1 m/s^2 for 2 s: v = a t = 2, p = a t^2 / 2 = 2
        dt = 2.0 / 2000
        acc = PreintegratedImu()
        for i in range(2000):
            acc.integrate(ImuSample(i * dt, np.array([1.0, 0, 0]), np.zeros(3)), dt)
        np.testing.assert_allclose(acc.delta_velocity, [2.0, 0, 0], rtol=0, atol=1e-6)
        np.testing.assert_allclose(acc.delta_position, [2.0, 0, 0], rtol=0, atol=1e-3)

    def test_constant_rate_rotation(self):
        dt = 1.0 / 500
        acc = PreintegratedImu()
        w = np.array([0.0, 0.0, np.pi / 2])
        for i in range(500):
            acc.integrate(ImuSample(i * dt, np.zeros(3), w), dt)
        np.testing.assert_allclose(acc.delta_rotation, so3_exp(w), rtol=0, atol=1e-6)

    def test_rejects_bad_input(self):
        acc = PreintegratedImu()
        with pytest.raises(ValueError):
            acc.integrate(ImuSample(0.0, np.zeros(3), np.zeros(3)), 0.0)
        with pytest.raises(ValueError):
            acc.integrate(ImuSample(0.0, np.zeros(3), np.zeros(3)), -0.01)
        with pytest.raises(ValueError):
            acc.integrate(ImuSample(0.0, np.array([np.nan, 0, 0]), np.zeros(3)), 0.01)

    def test_covariance_trace_monotone(self):
        rng = np.random.default_rng(20)
        acc = PreintegratedImu()
        prev = 0.0
        for s in make_stream(rng, 200, 0.01):
            acc.integrate(s, 0.01)
            tr = np.trace(acc.covariance)
            assert tr >= prev - 1e-18
            prev = tr
        # symmetric PSD
        np.testing.assert_allclose(acc.covariance, acc.covariance.T, atol=1e-18)
        assert np.linalg.eigvalsh(acc.covariance).min() >= -1e-18


class TestPredict:
    def test_empty_preint_is_identity(self):
        state = NavState(Pose(so3_exp([0.1, 0.2, 0.3]), np.array([1.0, 2, 3])),
                         velocity=np.array([0.5, 0, -0.5]))
        out = predict(state, PreintegratedImu(), G)
        np.testing.assert_allclose(out.rotation, state.rotation)
        np.testing.assert_allclose(out.position, state.position)
        np.testing.assert_allclose(out.velocity, state.velocity)

    def test_stationary_hover(self):
        # level attitude, specific force exactly cancelling gravity
        state = NavState(Pose.identity(), np.zeros(3))
        acc = PreintegratedImu()
        dt = 0.005
        for i in range(200):
            acc.integrate(ImuSample(i * dt, -G.vector, np.zeros(3)), dt)
        out = predict(state, acc, G)
        np.testing.assert_allclose(out.position, np.zeros(3), rtol=0, atol=1e-9)
        np.testing.assert_allclose(out.velocity, np.zeros(3), rtol=0, atol=1e-9)

    def test_matches_direct_strapdown_oracle(self):
        rng = np.random.default_rng(21)
        dt = 0.005
        samples = make_stream(rng, 500, dt)
        state = NavState(Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3)),
                         velocity=rng.normal(size=3))
        acc = integrate_stream(samples, dt)
        out = predict(state, acc, G)
        r_o, v_o, p_o = rk4_strapdown(state, samples, dt, G)
        assert np.linalg.norm(so3_log(r_o.T @ out.rotation)) < 1e-7
        assert np.linalg.norm(out.position - p_o) < 1e-6
        assert np.linalg.norm(out.velocity - v_o) < 1e-6


class TestResetAndBias:
    def test_reset_contract(self):
        rng = np.random.default_rng(22)
        acc = integrate_stream(make_stream(rng, 50, 0.01), 0.01)
        new_bias = ImuBias(np.array([0.1, 0, 0]), np.array([0, 0.01, 0]))
        fresh = reset_with_bias(acc, new_bias)
        np.testing.assert_array_equal(fresh.delta_rotation, np.eye(3))
        np.testing.assert_array_equal(fresh.delta_velocity, np.zeros(3))
        np.testing.assert_array_equal(fresh.delta_position, np.zeros(3))
        assert fresh.delta_time == 0.0
        assert fresh.linearization_bias is new_bias

    def test_reset_then_integrate_equals_fresh(self):
        bias = ImuBias(np.array([0.05, -0.02, 0.01]), np.array([0.002, 0.001, -0.003]))
        sample = ImuSample(0.0, np.array([1.0, -2.0, 9.0]), np.array([0.1, 0.2, -0.1]))
        used = PreintegratedImu(ImuBias())
        used.integrate(sample, 0.01)
        a = reset_with_bias(used, bias).integrate(sample, 0.01)
        b = PreintegratedImu(bias).integrate(sample, 0.01)
        np.testing.assert_array_equal(a.delta_rotation, b.delta_rotation)
        np.testing.assert_array_equal(a.delta_velocity, b.delta_velocity)
        np.testing.assert_array_equal(a.covariance, b.covariance)

    def test_bias_corrected_stream_equivalence(self):
        rng = np.random.default_rng(23)
        bias = ImuBias(np.array([0.05, -0.02, 0.01]), np.array([0.002, 0.001, -0.003]))
        samples = make_stream(rng, 100, 0.01)
        with_bias = integrate_stream(samples, 0.01, bias=bias)
        shifted = [ImuSample(s.timestamp, s.specific_force - bias.accel,
                             s.angular_rate - bias.gyro) for s in samples]
        zero_bias = integrate_stream(shifted, 0.01)
        np.testing.assert_allclose(with_bias.delta_rotation,
                                   zero_bias.delta_rotation, rtol=0, atol=1e-12)
        np.testing.assert_allclose(with_bias.delta_velocity,
                                   zero_bias.delta_velocity, rtol=0, atol=1e-12)
        np.testing.assert_allclose(with_bias.delta_position,
                                   zero_bias.delta_position, rtol=0, atol=1e-12)

    def test_first_order_bias_correction_slope(self):
        rng = np.random.default_rng(24)
        dt = 0.005
        samples = make_stream(rng, 200, dt, rate_scale=0.5, force_scale=5.0)
        nominal = integrate_stream(samples, dt)
        direction = rng.normal(size=6)
        direction /= np.linalg.norm(direction)

        def correction_error(scale):
            db = direction * scale
            pert = ImuBias(db[:3], db[3:])
            dr_c, dv_c, dp_c = nominal.corrected_deltas(pert)
            truth = integrate_stream(samples, dt, bias=pert)
            err_r = np.linalg.norm(so3_log(truth.delta_rotation.T @ dr_c))
            err_v = np.linalg.norm(dv_c - truth.delta_velocity)
            err_p = np.linalg.norm(dp_c - truth.delta_position)
            return err_r + err_v + err_p

        e1 = correction_error(1e-3)
        e2 = correction_error(1e-4)
        # a first-order-correct Jacobian leaves only o(|db|): 100x ratio
        assert e2 < e1 / 30.0


class TestChaining:
    def test_group_relation_composition(self):
        rng = np.random.default_rng(25)
        dt = 0.01
        stream_a = make_stream(rng, 120, dt)
        stream_b = [ImuSample(s.timestamp + 1.2, s.specific_force, s.angular_rate)
                    for s in make_stream(rng, 80, dt)]
        a = integrate_stream(stream_a, dt)
        b = integrate_stream(stream_b, dt)
        both = integrate_stream(stream_a + stream_b, dt)
        # group relations: dR_ik = dR_ij dR_jk; dv_ik = dv_ij + dR_ij dv_jk;
        # dp_ik = dp_ij + dv_ij * dt_jk + dR_ij dp_jk
        dr = a.delta_rotation @ b.delta_rotation
        dv = a.delta_velocity + a.delta_rotation @ b.delta_velocity
        dp = (a.delta_position + a.delta_velocity * b.delta_time
              + a.delta_rotation @ b.delta_position)
        np.testing.assert_allclose(dr, both.delta_rotation, rtol=0, atol=1e-9)
        np.testing.assert_allclose(dv, both.delta_velocity, rtol=0, atol=1e-9)
        np.testing.assert_allclose(dp, both.delta_position, rtol=0, atol=1e-9)
        assert a.delta_time + b.delta_time == pytest.approx(both.delta_time)


def random_state(rng, bias_scale=0.05):
    return NavState(
        Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 5.0),
        velocity=rng.normal(size=3),
        bias=ImuBias(rng.normal(size=3) * bias_scale, rng.normal(size=3) * 0.01),
    )


class TestResidual:
    def test_zero_at_prediction(self):
        rng = np.random.default_rng(26)
        for _ in range(10):
            samples = make_stream(rng, 50, 0.01)
            acc = integrate_stream(samples, 0.01)
            state_i = random_state(rng, bias_scale=0.0)
            state_i = NavState(state_i.pose, state_i.velocity, ImuBias())
            state_j = predict(state_i, acc, G)
            r, _ = residual_and_jacobians(state_i, state_j, acc, G)
            assert np.abs(r).max() < 1e-9

    def test_position_perturbation_direction(self):
        rng = np.random.default_rng(27)
        samples = make_stream(rng, 20, 0.01)
        acc = integrate_stream(samples, 0.01)
        state_i = random_state(rng, bias_scale=0.0)
        state_i = NavState(state_i.pose, state_i.velocity, ImuBias())
        state_j = predict(state_i, acc, G)
        delta = np.array([0.1, 0.0, 0.0])
        moved = NavState(Pose(state_j.rotation, state_j.position + delta),
                         state_j.velocity, state_j.bias,
                         timestamp=state_j.timestamp)
        r0, _ = residual_and_jacobians(state_i, state_j, acc, G)
        r1, _ = residual_and_jacobians(state_i, moved, acc, G)
        np.testing.assert_allclose(r1[6:9] - r0[6:9],
                                   state_i.rotation.T @ delta, rtol=0, atol=1e-9)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(28)
        eps = 1e-6
        worst = 0.0
        for _ in range(50):
            samples = make_stream(rng, 20, 0.01, rate_scale=0.5)
            acc = integrate_stream(samples, 0.01)
            state_i = random_state(rng)
            state_j = random_state(rng)

            r0, blocks = residual_and_jacobians(state_i, state_j, acc, G)

            def fd_block(apply):
                cols = []
                for k in range(apply.dim):
                    lo = residual_and_jacobians(*apply(k, -eps), acc, G)[0]
                    hi = residual_and_jacobians(*apply(k, +eps), acc, G)[0]
                    cols.append((hi - lo) / (2 * eps))
                return np.array(cols).T

            def perturb_i(k, e, dim):
                xi = np.zeros(15)
                xi[k if dim != "vel" else 6 + k] = e
                return retract(state_i, xi), state_j

            def perturb_j(k, e, dim):
                xi = np.zeros(15)
                xi[k if dim != "vel" else 6 + k] = e
                return state_i, retract(state_j, xi)

            checks = []

            def mk(dim_size, fn):
                fn.dim = dim_size
                return fn

            checks.append(("pose_i", mk(6, lambda k, e: perturb_i(k, e, "pose"))))
            checks.append(("vel_i", mk(3, lambda k, e: perturb_i(k, e, "vel"))))
            checks.append(("pose_j", mk(6, lambda k, e: perturb_j(k, e, "pose"))))
            checks.append(("vel_j", mk(3, lambda k, e: perturb_j(k, e, "vel"))))

            def perturb_bias(k, e):
                xi = np.zeros(15)
                xi[9 + k] = e
                return retract(state_i, xi), state_j

            checks.append(("bias", mk(6, perturb_bias)))

            for name, apply in checks:
                fd = fd_block(apply)
                scale = max(1.0, np.abs(blocks[name]).max())
                err = np.abs(fd - blocks[name]).max() / scale
                worst = max(worst, err)
                assert err < 1e-5, f"{name} Jacobian off by {err}"
        assert worst < 1e-5
