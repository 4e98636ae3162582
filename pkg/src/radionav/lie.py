"""SO(3)/SE(3) group operations and tangent-space maps.

Rotations are stored as 3x3 orthonormal numpy arrays (direction cosine
matrices); quaternions only appear at I/O boundaries elsewhere in the
package.  Twists are 6-vectors ordered [rotation part, translation part],
matching the tangent ordering used by the smoother and the ESKF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this angle the closed-form Rodrigues coefficients switch to their
# Taylor expansions to avoid 0/0.
SMALL_ANGLE = 1e-6

# The higher-order integral coefficients cancel catastrophically well before
# SMALL_ANGLE, so they get a wider Taylor branch.
_SERIES_ANGLE = 1e-3


def skew(v) -> np.ndarray:
    """Skew-symmetric (hat) matrix such that skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m) -> np.ndarray:
    """Inverse of skew for antisymmetric 3x3 matrices."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula mapping a rotation vector (radians) onto SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation) -> np.ndarray:
    """Rotation vector of a rotation matrix; returned angle lies in [0, pi].

    Uses a diagonal-pivot branch near pi where the usual sin(theta)
    denominator degenerates.
    """
    r = np.asarray(rotation, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = vee(r - r.T)  # = 2 sin(theta) * axis
    if theta < SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # Symmetrizing removes the sin(theta) skew part:
        # (R + R^T)/2 + I = (1 + cos)I + (1 - cos) axis axis^T,
        # so the strongest column gives the axis to O((pi - theta)^2).
        m = 0.5 * (r + r.T) + np.eye(3)
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.linalg.norm(m[:, i])
        # w is tiny but carries the sign of the axis (ambiguous exactly at pi).
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return theta * axis
    return (0.5 * theta / np.sin(theta)) * w


def left_jacobian(phi) -> np.ndarray:
    """Left Jacobian of SO(3); also the integral of Exp(s*phi) over s in [0,1]."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / (theta * theta)
        b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def right_jacobian(phi) -> np.ndarray:
    return left_jacobian(-np.asarray(phi, dtype=float))


def right_jacobian_inv(phi) -> np.ndarray:
    return left_jacobian_inv(-np.asarray(phi, dtype=float))


def exp_double_integral(phi) -> np.ndarray:
    """Closed form of the double integral of Exp over a unit interval.

    G2(phi) = sum_m skew(phi)^m / (m+2)!, so that for constant body rate w
    and specific force a over a step dt, the position increment is
    dv*dt + R @ (dt^2 * G2(w*dt)) @ a exactly.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
    else:
        c1 = (theta - np.sin(theta)) / (theta ** 3)
        c2 = (np.cos(theta) - 1.0 + 0.5 * theta * theta) / (theta ** 4)
    return 0.5 * np.eye(3) + c1 * k + c2 * (k @ k)


def _series_dirderiv(phi, a, offset: int, terms: int = 10) -> np.ndarray:
    """d/dphi of (sum_m skew(phi)^m/(m+offset)!) @ a, by truncated series.

    Valid for the small per-step angles seen in IMU integration; the series
    converges like theta^terms.
    """
    phi = np.asarray(phi, dtype=float)
    a = np.asarray(a, dtype=float)
    k = skew(phi)
    # powers[j] = skew(phi)^j
    powers = [np.eye(3)]
    for _ in range(terms):
        powers.append(k @ powers[-1])
    out = np.zeros((3, 3))
    fact = float(math.factorial(offset))
    for m in range(1, terms + 1):
        fact *= (m + offset)
        coeff = 1.0 / fact
        # d(skew(phi)^m a)/dphi = -sum_j skew(phi)^j skew(skew(phi)^(m-1-j) a)
        term = np.zeros((3, 3))
        for j in range(m):
            term -= powers[j] @ skew(powers[m - 1 - j] @ a)
        out += coeff * term
    return out


def left_jacobian_deriv(phi, a) -> np.ndarray:
    """Directional derivative d(left_jacobian(phi) @ a)/dphi."""
    return _series_dirderiv(phi, a, offset=1)


def exp_double_integral_deriv(phi, a) -> np.ndarray:
    """Directional derivative d(exp_double_integral(phi) @ a)/dphi."""
    return _series_dirderiv(phi, a, offset=2)


def project_to_rotation(m) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def orthonormality_defect(rotation) -> float:
    r = np.asarray(rotation, dtype=float)
    return float(np.linalg.norm(r @ r.T - np.eye(3)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform on SE(3): x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())


def se3_exp(xi) -> Pose:
    """Exponential map of a twist [theta (rad), rho (m)] onto SE(3).

    The translation couples through the left Jacobian; a pure-rotation twist
    with nonzero rho therefore produces nonzero translation.
    """
    xi = np.asarray(xi, dtype=float)
    theta = xi[:3]
    rho = xi[3:]
    return Pose(so3_exp(theta), left_jacobian(theta) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Twist [theta, rho] such that se3_exp(twist) == pose, for angles < pi."""
    theta = so3_log(pose.rotation)
    rho = left_jacobian_inv(theta) @ pose.translation
    return np.concatenate([theta, rho])


def se3_hat(xi) -> np.ndarray:
    """4x4 Lie-algebra embedding of a twist."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[:3])
    m[:3, 3] = xi[3:]
    return m
