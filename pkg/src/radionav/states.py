"""Navigation state container and its tangent-space parametrization.

The tangent ordering is fixed package-wide:

    [rotation (3), translation (3), velocity (3), accel bias (3),
     gyro bias (3), baro bias (1, optional)]

with the pose perturbed on the right, pose * Exp([theta, rho]), and all
other components additive.  Every Jacobian in the package is expressed in
these coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .lie import Pose, se3_exp, se3_log


@dataclass(frozen=True)
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.accel, self.gyro])

    @staticmethod
    def from_vector(v) -> "ImuBias":
        v = np.asarray(v, dtype=float)
        return ImuBias(v[:3].copy(), v[3:6].copy())


@dataclass(frozen=True)
class NavState:
    """Pose on SE(3), NED-frame velocity, IMU biases, optional baro bias."""

    pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=ImuBias)
    baro_bias: float | None = None
    timestamp: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def dim(self) -> int:
        return 15 if self.baro_bias is None else 16

    def with_timestamp(self, t: float) -> "NavState":
        return replace(self, timestamp=t)


def retract(state: NavState, xi) -> NavState:
    """Apply a tangent-space increment to a state."""
    xi = np.asarray(xi, dtype=float)
    if xi.size != state.dim:
        raise ValueError(f"tangent size {xi.size} does not match state dim {state.dim}")
    pose = state.pose.compose(se3_exp(xi[:6]))
    baro = state.baro_bias
    if baro is not None:
        baro = baro + float(xi[15])
    return NavState(
        pose=pose,
        velocity=state.velocity + xi[6:9],
        bias=ImuBias(state.bias.accel + xi[9:12], state.bias.gyro + xi[12:15]),
        baro_bias=baro,
        timestamp=state.timestamp,
    )


def local_coordinates(base: NavState, other: NavState) -> np.ndarray:
    """Tangent vector xi with retract(base, xi) == other (angles < pi)."""
    if base.dim != other.dim:
        raise ValueError("states have mismatched dimensions")
    xi = np.zeros(base.dim)
    xi[:6] = se3_log(base.pose.inverse().compose(other.pose))
    xi[6:9] = other.velocity - base.velocity
    xi[9:12] = other.bias.accel - base.bias.accel
    xi[12:15] = other.bias.gyro - base.bias.gyro
    if base.baro_bias is not None:
        xi[15] = other.baro_bias - base.baro_bias
    return xi
