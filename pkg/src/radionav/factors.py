"""Aiding measurement models with analytic Jacobians.

Every factor returns (residual, H) where residual = z - h(state) and H is
the Jacobian of the *prediction* h with respect to the SE(3) tangent
perturbation [theta, rho] (pose blocks are m x 6).  Optimizers consume the
pair as the linearized term || h + H xi - z ||^2.

Factors whose geometry degenerates (angle/range singularities near the
radio origin) raise UnusableMeasurement so callers can skip the epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lie import skew
from .states import NavState

# Horizontal/total range below which AoA and range geometry is singular.
DEFAULT_RANGE_FLOOR = 0.5

# Earth atmosphere model constants (troposphere branch), pressure in kPa.
_ATM_P0 = 101.29
_ATM_EXP = 1.0 / 5.256
_ATM_SCALE = 288.08
_ATM_OFFSET = 288.14
_ATM_LAPSE = -0.00649


class UnusableMeasurement(ValueError):
    """Raised when a factor's geometry makes the measurement unusable."""


def wrap_angle(a):
    """Wrap an angle (radians) to (-pi, pi]."""
    return -(((-np.asarray(a)) + np.pi) % (2.0 * np.pi) - np.pi)


@dataclass(frozen=True)
class RadioFrameConfig:
    """Mounting of the phased-array ground station: rotation radio->nav and
    the nav-frame lever arm of the array origin."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class CompassBaseline:
    """Body-frame baseline vector between the two GNSS antennas."""

    baseline: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(self.baseline) == 0.0:
            raise ValueError("compass baseline must have nonzero norm")


@dataclass(frozen=True)
class AoaMeasurement:
    azimuth: float
    elevation: float
    timestamp: float
    noise_cov: np.ndarray

    def __post_init__(self):
        if not (-np.pi < self.azimuth <= np.pi):
            raise ValueError("azimuth must lie in (-pi, pi]")
        if not (-np.pi / 2 <= self.elevation <= np.pi / 2):
            raise ValueError("elevation must lie in [-pi/2, pi/2]")


@dataclass(frozen=True)
class RangeMeasurement:
    range: float
    timestamp: float
    variance: float

    def __post_init__(self):
        if self.range < 0.0:
            raise ValueError("range must be non-negative")


@dataclass(frozen=True)
class BaroMeasurement:
    pressure: float  # kPa
    timestamp: float
    variance: float  # variance of the derived altitude, m^2

    def __post_init__(self):
        if not self.pressure > 0.0:
            raise ValueError("pressure must be positive")


def gnss_position_factor(state: NavState, z):
    """Direct position measurement of the body origin in the nav frame."""
    residual = np.asarray(z, dtype=float) - state.position
    h = np.zeros((3, 6))
    h[:, 3:6] = state.rotation
    return residual, h


def gnss_compass_factor(state: NavState, z, baseline: CompassBaseline):
    """Dual-antenna baseline observed in the nav frame: h = R @ l_body."""
    predicted = state.rotation @ baseline.baseline
    h = np.zeros((3, 6))
    h[:, 0:3] = -state.rotation @ skew(baseline.baseline)
    return np.asarray(z, dtype=float) - predicted, h


def body_to_radio(state: NavState, cfg: RadioFrameConfig) -> np.ndarray:
    """Body origin expressed in the radio frame."""
    return cfg.rotation.T @ (state.position - cfg.lever_arm)


def radio_position_jacobian(state: NavState, cfg: RadioFrameConfig) -> np.ndarray:
    """Jacobian of the radio-frame position w.r.t. the pose tangent."""
    h = np.zeros((3, 6))
    h[:, 3:6] = cfg.rotation.T @ state.rotation
    return h


def spherical_from_radio(p_r):
    """(azimuth, elevation, range) of a radio-frame point."""
    px, py, pz = p_r
    rho_h = math.hypot(px, py)
    return math.atan2(py, px), math.atan2(-pz, rho_h), math.sqrt(px * px + py * py + pz * pz)


def radio_from_spherical(azimuth, elevation, rho):
    """Inverse of spherical_from_radio."""
    ce = math.cos(elevation)
    return np.array([rho * ce * math.cos(azimuth),
                     rho * ce * math.sin(azimuth),
                     -rho * math.sin(elevation)])


def aoa_factor(state: NavState, z: AoaMeasurement, cfg: RadioFrameConfig,
               range_floor: float = DEFAULT_RANGE_FLOOR):
    """Azimuth/elevation of the body seen from the phased array.

    The azimuth residual is wrapped to (-pi, pi] so measurements differing
    by full turns are identical.
    """
    p = body_to_radio(state, cfg)
    px, py, pz = p
    rho_h2 = px * px + py * py
    rho_h = math.sqrt(rho_h2)
    if rho_h < range_floor:
        raise UnusableMeasurement(
            f"horizontal range {rho_h:.3f} m below floor {range_floor} m")
    rho2 = rho_h2 + pz * pz

    psi = math.atan2(py, px)
    alpha = math.atan2(-pz, rho_h)
    residual = np.array([wrap_angle(z.azimuth - psi), z.elevation - alpha])

    h_p = radio_position_jacobian(state, cfg)
    row_psi = np.array([-py, px, 0.0]) / rho_h2
    row_alpha = np.array([px * pz / rho_h, py * pz / rho_h, -rho_h]) / rho2
    return residual, np.vstack([row_psi @ h_p, row_alpha @ h_p])


def range_factor(state: NavState, z: RangeMeasurement, cfg: RadioFrameConfig,
                 range_floor: float = DEFAULT_RANGE_FLOOR):
    """Euclidean distance from the array origin to the body."""
    p = body_to_radio(state, cfg)
    rho = np.linalg.norm(p)
    if rho < range_floor:
        raise UnusableMeasurement(f"range {rho:.3f} m below floor {range_floor} m")
    h_p = radio_position_jacobian(state, cfg)
    h = (p / rho) @ h_p
    return np.array([z.range - rho]), h.reshape(1, 6)


def pressure_to_altitude(pressure_kpa: float) -> float:
    """Altitude (m) from static pressure (kPa), troposphere atmosphere model."""
    if not pressure_kpa > 0.0:
        raise ValueError("pressure must be positive")
    t = (pressure_kpa / _ATM_P0) ** _ATM_EXP * _ATM_SCALE
    return (t - _ATM_OFFSET) / _ATM_LAPSE


def pressure_from_altitude(altitude_m: float) -> float:
    """Inverse of pressure_to_altitude, used by the scenario simulator."""
    t = _ATM_OFFSET + _ATM_LAPSE * altitude_m
    return _ATM_P0 * (t / _ATM_SCALE) ** (1.0 / _ATM_EXP)


def baro_factor(state: NavState, baro_bias: float, z: BaroMeasurement):
    """Barometric altitude: h = -(down position) + baro bias.

    Returns (residual, pose Jacobian (1x6), bias Jacobian (1x1)); the pose
    Jacobian is derived from the prediction, finite differences being the
    arbiter of its sign.
    """
    measured = pressure_to_altitude(z.pressure)
    predicted = -state.position[2] + baro_bias
    h_pose = np.zeros((1, 6))
    h_pose[0, 3:6] = np.array([0.0, 0.0, -1.0]) @ state.rotation
    return np.array([measured - predicted]), h_pose, np.array([[1.0]])
