"""Robust M-estimator kernels and the chi-square innovation gate.

Kernels act component-wise on whitened residuals, so a vector measurement
gets an independent weight per scalar component; this keeps the reweighted
normal equations diagonal in the whitened residual space and matches the
per-component scope of the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def tukey_cost(z, c: float):
    """Tukey biweight cost: quadratic near zero, capped at c^2/6 beyond |z| = c."""
    z = np.asarray(z, dtype=float)
    cap = c * c / 6.0
    u = np.clip(1.0 - (z / c) ** 2, 0.0, None)
    return np.where(np.abs(z) <= c, cap * (1.0 - u ** 3), cap)


def tukey_weight(z, c: float):
    """IRLS weight psi(z)/z for the Tukey kernel; exactly 0 beyond the bound."""
    z = np.asarray(z, dtype=float)
    u = 1.0 - (z / c) ** 2
    return np.where(np.abs(z) <= c, u * u, 0.0)


def gm_cost(z, c: float):
    """Geman-McClure cost 0.5 c^2 z^2 / (c^2 + z^2); bounded above by c^2/2."""
    z = np.asarray(z, dtype=float)
    z2 = z * z
    return 0.5 * c * c * z2 / (c * c + z2)


def gm_weight(z, c: float):
    """IRLS weight c^4 / (c^2 + z^2)^2; strictly positive for finite z."""
    z = np.asarray(z, dtype=float)
    return c ** 4 / (c * c + z * z) ** 2


@dataclass(frozen=True)
class RobustKernel:
    """Robust loss applied to whitened scalar residuals.

    kind is one of 'none', 'tukey', 'gm'; bound is the estimator bound c
    (ignored for 'none').
    """

    kind: str = "none"
    bound: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "tukey", "gm"):
            raise ValueError(f"unknown robust kernel kind {self.kind!r}")
        if self.kind != "none" and not self.bound > 0.0:
            raise ValueError("kernel bound must be positive")

    def cost(self, z):
        if self.kind == "none":
            return 0.5 * np.asarray(z, dtype=float) ** 2
        if self.kind == "tukey":
            return tukey_cost(z, self.bound)
        return gm_cost(z, self.bound)

    def weight(self, z):
        if self.kind == "none":
            return np.ones_like(np.asarray(z, dtype=float))
        if self.kind == "tukey":
            return tukey_weight(z, self.bound)
        return gm_weight(z, self.bound)


@dataclass(frozen=True)
class GateConfig:
    """Chi-square gate threshold applied per scalar innovation component."""

    threshold: float = 3.841

    def __post_init__(self):
        if not self.threshold > 0.0:
            raise ValueError("gate threshold must be positive")


def natural_test(innovation, innovation_cov, gate: GateConfig) -> np.ndarray:
    """Per-component chi-square acceptance of an innovation vector.

    Component i is accepted iff nu_i^2 / S_ii <= threshold.  Raises if the
    innovation covariance is not symmetric positive definite.
    """
    nu = np.atleast_1d(np.asarray(innovation, dtype=float))
    s = np.atleast_2d(np.asarray(innovation_cov, dtype=float))
    if s.shape != (nu.size, nu.size):
        raise ValueError("innovation covariance shape mismatch")
    if not np.allclose(s, s.T, atol=1e-9 * max(1.0, np.abs(s).max())):
        raise ValueError("innovation covariance must be symmetric")
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise ValueError("innovation covariance must be positive definite")
    return nu * nu / np.diag(s) <= gate.threshold
