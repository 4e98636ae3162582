"""On-manifold IMU preintegration between keyframes.

Accumulates high-rate gyro/accelerometer samples into relative-motion
deltas (dR, dv, dp) with first-order bias Jacobians and a propagated
9x9 noise covariance ordered (rotation, velocity, position).

Each sample is treated as constant over its interval and propagated with
the closed-form constant-input solution: the velocity and position
increments use the exponential integrals G1 (left Jacobian) and G2, so the
deltas are exact for piecewise-constant inputs rather than accurate to
some integration order.  Gravity is not folded into the deltas; it enters
in predict().
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import (
    Pose,
    exp_double_integral,
    exp_double_integral_deriv,
    left_jacobian,
    left_jacobian_deriv,
    orthonormality_defect,
    project_to_rotation,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)
from .states import ImuBias, NavState


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: body-frame specific force (m/s^2) and rate (rad/s)."""

    timestamp: float
    specific_force: np.ndarray
    angular_rate: np.ndarray


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time white-noise densities of the IMU channels.

    gyro in rad/s/sqrt(Hz), accel in m/s^2/sqrt(Hz); the discrete
    per-sample variance over an interval dt is density^2 / dt.
    """

    gyro_density: float = 1e-4
    accel_density: float = 1e-3


@dataclass(frozen=True)
class GravityModel:
    """Navigation-frame gravity vector, fixed for a run (NED default)."""

    vector: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))


class PreintegratedImu:
    """Single-writer accumulator of IMU samples between two keyframes."""

    def __init__(self, bias: ImuBias | None = None,
                 noise: ImuNoiseModel | None = None):
        self.linearization_bias = bias if bias is not None else ImuBias()
        self.noise = noise if noise is not None else ImuNoiseModel()
        self.delta_rotation = np.eye(3)
        self.delta_velocity = np.zeros(3)
        self.delta_position = np.zeros(3)
        self.delta_time = 0.0
        self.covariance = np.zeros((9, 9))
        # first-order sensitivities of the deltas to the linearization bias
        self.j_rot_gyro = np.zeros((3, 3))
        self.j_vel_accel = np.zeros((3, 3))
        self.j_vel_gyro = np.zeros((3, 3))
        self.j_pos_accel = np.zeros((3, 3))
        self.j_pos_gyro = np.zeros((3, 3))
        self._steps = 0

    def copy(self) -> "PreintegratedImu":
        out = PreintegratedImu(self.linearization_bias, self.noise)
        out.delta_rotation = self.delta_rotation.copy()
        out.delta_velocity = self.delta_velocity.copy()
        out.delta_position = self.delta_position.copy()
        out.delta_time = self.delta_time
        out.covariance = self.covariance.copy()
        out.j_rot_gyro = self.j_rot_gyro.copy()
        out.j_vel_accel = self.j_vel_accel.copy()
        out.j_vel_gyro = self.j_vel_gyro.copy()
        out.j_pos_accel = self.j_pos_accel.copy()
        out.j_pos_gyro = self.j_pos_gyro.copy()
        out._steps = self._steps
        return out

    def integrate(self, sample: ImuSample, dt: float) -> "PreintegratedImu":
        """Fold one sample held over dt seconds into the accumulator."""
        if not dt > 0.0:
            raise ValueError(f"sample interval must be positive, got {dt}")
        w = np.asarray(sample.angular_rate, dtype=float) - self.linearization_bias.gyro
        a = np.asarray(sample.specific_force, dtype=float) - self.linearization_bias.accel
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise ValueError("non-finite IMU sample")

        phi = w * dt
        rot_inc = so3_exp(phi)
        g1 = left_jacobian(phi)
        g2 = exp_double_integral(phi)
        dr = self.delta_rotation
        vel_inc = dt * (g1 @ a)           # in the frame of dR before this step
        pos_inc = dt * dt * (g2 @ a)

        # noise covariance: first-order propagation, (theta, vel, pos) order
        a_mat = np.eye(9)
        a_mat[0:3, 0:3] = rot_inc.T
        a_mat[3:6, 0:3] = -dr @ skew(vel_inc)
        a_mat[6:9, 0:3] = -dr @ skew(pos_inc)
        a_mat[6:9, 3:6] = dt * np.eye(3)
        b_mat = np.zeros((9, 6))
        b_mat[0:3, 0:3] = right_jacobian(phi) * dt
        b_mat[3:6, 3:6] = dr @ (dt * g1)
        b_mat[6:9, 3:6] = dr @ (dt * dt * g2)
        q = np.zeros((6, 6))
        q[0:3, 0:3] = (self.noise.gyro_density ** 2 / dt) * np.eye(3)
        q[3:6, 3:6] = (self.noise.accel_density ** 2 / dt) * np.eye(3)
        self.covariance = a_mat @ self.covariance @ a_mat.T + b_mat @ q @ b_mat.T

        # bias Jacobians, all right-hand sides at the pre-update values
        j_rot = self.j_rot_gyro
        self.j_pos_accel = self.j_pos_accel + dt * self.j_vel_accel - dr @ (dt * dt * g2)
        self.j_pos_gyro = (self.j_pos_gyro + dt * self.j_vel_gyro
                           - dr @ skew(pos_inc) @ j_rot
                           - dr @ (dt ** 3 * exp_double_integral_deriv(phi, a)))
        self.j_vel_accel = self.j_vel_accel - dr @ (dt * g1)
        self.j_vel_gyro = (self.j_vel_gyro - dr @ skew(vel_inc) @ j_rot
                           - dr @ (dt * dt * left_jacobian_deriv(phi, a)))
        self.j_rot_gyro = rot_inc.T @ j_rot - right_jacobian(phi) * dt

        # deltas; position before velocity so it sees the pre-update dv
        self.delta_position = self.delta_position + dt * self.delta_velocity + dr @ pos_inc
        self.delta_velocity = self.delta_velocity + dr @ vel_inc
        self.delta_rotation = dr @ rot_inc
        self.delta_time += dt
        self._steps += 1
        if self._steps % 256 == 0 and orthonormality_defect(self.delta_rotation) > 1e-9:
            self.delta_rotation = project_to_rotation(self.delta_rotation)
        return self

    def corrected_deltas(self, bias: ImuBias):
        """Deltas first-order corrected to a bias estimate away from the
        linearization point."""
        dba = bias.accel - self.linearization_bias.accel
        dbg = bias.gyro - self.linearization_bias.gyro
        dr = self.delta_rotation @ so3_exp(self.j_rot_gyro @ dbg)
        dv = self.delta_velocity + self.j_vel_accel @ dba + self.j_vel_gyro @ dbg
        dp = self.delta_position + self.j_pos_accel @ dba + self.j_pos_gyro @ dbg
        return dr, dv, dp


def reset_with_bias(preint: PreintegratedImu, new_bias: ImuBias) -> PreintegratedImu:
    """Fresh accumulator keeping the noise model, relinearized at new_bias."""
    return PreintegratedImu(new_bias, preint.noise)


def predict(state_i: NavState, preint: PreintegratedImu,
            gravity: GravityModel) -> NavState:
    """Propagate a state through the preintegrated deltas (bias-corrected)."""
    dr, dv, dp = preint.corrected_deltas(state_i.bias)
    dt = preint.delta_time
    g = gravity.vector
    r_i = state_i.rotation
    rot = r_i @ dr
    vel = state_i.velocity + g * dt + r_i @ dv
    pos = state_i.position + state_i.velocity * dt + 0.5 * g * dt * dt + r_i @ dp
    return NavState(
        pose=Pose(rot, pos),
        velocity=vel,
        bias=state_i.bias,
        baro_bias=state_i.baro_bias,
        timestamp=state_i.timestamp + dt,
    )


def residual_and_jacobians(state_i: NavState, state_j: NavState,
                           preint: PreintegratedImu, gravity: GravityModel):
    """Preintegration residual (rotation, velocity, position) and its
    Jacobian blocks.

    Returns (residual, blocks) with blocks keyed 'pose_i', 'vel_i',
    'pose_j', 'vel_j', 'bias'; each block is the derivative of the residual
    with respect to the corresponding tangent perturbation (pose blocks are
    9x6 over [theta, rho], bias block is 9x6 over [accel, gyro]).
    """
    dt = preint.delta_time
    g = gravity.vector
    r_i = state_i.rotation
    r_j = state_j.rotation
    rt_i = r_i.T

    dbg = state_i.bias.gyro - preint.linearization_bias.gyro
    dba = state_i.bias.accel - preint.linearization_bias.accel
    j = preint.j_rot_gyro
    corr = j @ dbg
    dr_corr = preint.delta_rotation @ so3_exp(corr)
    dv_corr = preint.delta_velocity + preint.j_vel_accel @ dba + preint.j_vel_gyro @ dbg
    dp_corr = preint.delta_position + preint.j_pos_accel @ dba + preint.j_pos_gyro @ dbg

    vel_term = rt_i @ (state_j.velocity - state_i.velocity - g * dt)
    pos_term = rt_i @ (state_j.position - state_i.position
                       - state_i.velocity * dt - 0.5 * g * dt * dt)

    r_theta = so3_log(dr_corr.T @ rt_i @ r_j)
    residual = np.concatenate([r_theta, vel_term - dv_corr, pos_term - dp_corr])

    jr_inv = right_jacobian_inv(r_theta)
    c = preint.delta_rotation.T @ rt_i @ r_j

    pose_i = np.zeros((9, 6))
    pose_i[0:3, 0:3] = -jr_inv @ (r_j.T @ r_i)
    pose_i[3:6, 0:3] = skew(vel_term)
    pose_i[6:9, 0:3] = skew(pos_term)
    pose_i[6:9, 3:6] = -np.eye(3)

    pose_j = np.zeros((9, 6))
    pose_j[0:3, 0:3] = jr_inv
    pose_j[6:9, 3:6] = rt_i @ r_j

    vel_i = np.zeros((9, 3))
    vel_i[3:6, :] = -rt_i
    vel_i[6:9, :] = -rt_i * dt

    vel_j = np.zeros((9, 3))
    vel_j[3:6, :] = rt_i

    bias = np.zeros((9, 6))
    # rotation residual depends on the gyro bias through Exp(j @ dbg)
    bias[0:3, 3:6] = -jr_inv @ c.T @ right_jacobian(-corr) @ j
    bias[3:6, 0:3] = -preint.j_vel_accel
    bias[3:6, 3:6] = -preint.j_vel_gyro
    bias[6:9, 0:3] = -preint.j_pos_accel
    bias[6:9, 3:6] = -preint.j_pos_gyro

    blocks = {"pose_i": pose_i, "vel_i": vel_i, "pose_j": pose_j,
              "vel_j": vel_j, "bias": bias}
    return residual, blocks
