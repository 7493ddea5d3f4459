"""SO(3)/SE(3) exponential maps in closed form.

Poses are stored as a rotation-like 3x3 block plus a translation; the 4x4
homogeneous form is available through :meth:`Pose.matrix`. Everything here
works on plain double-precision numpy arrays. The differentiable twins used
during training live in :mod:`splatdeblur.motionmodel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# below this angle the trigonometric coefficients switch to their Taylor series
SMALL_ANGLE = 1e-7
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class ScrewAxis:
    omega_hat: np.ndarray
    v: np.ndarray
    theta: float

    def __post_init__(self):
        _check_unit(self.omega_hat)


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        # general inverse: CMR-refined blocks are not exactly orthogonal
        Rinv = np.linalg.inv(self.R)
        return Pose(Rinv, -Rinv @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def _check_unit(omega_hat):
    n = float(np.linalg.norm(omega_hat))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"rotation axis must have unit norm, got |w|={n!r}")


def skew(v) -> np.ndarray:
    """Matrix ``K`` with ``K @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _trig_coeffs(theta: float) -> tuple[float, float, float]:
    """(sin t, 1 - cos t, t - sin t), with series evaluation near zero."""
    if abs(theta) < SMALL_ANGLE:
        t2 = theta * theta
        return theta - theta * t2 / 6.0, t2 / 2.0 - t2 * t2 / 24.0, theta * t2 / 6.0 - theta * t2 * t2 / 120.0
    return math.sin(theta), 1.0 - math.cos(theta), theta - math.sin(theta)


def so3_exp(omega_hat, theta: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    omega_hat = np.asarray(omega_hat, dtype=float).reshape(3)
    _check_unit(omega_hat)
    K = skew(omega_hat)
    s, c1, _ = _trig_coeffs(float(theta))
    return np.eye(3) + s * K + c1 * (K @ K)


def se3_G(omega_hat, theta: float) -> np.ndarray:
    """Integral of the rotation exponential from 0 to theta.

    Maps the screw's translation component to the translation of the
    exponentiated pose.
    """
    omega_hat = np.asarray(omega_hat, dtype=float).reshape(3)
    _check_unit(omega_hat)
    K = skew(omega_hat)
    _, c1, c2 = _trig_coeffs(float(theta))
    return float(theta) * np.eye(3) + c1 * K + c2 * (K @ K)


def se3_exp(s: ScrewAxis) -> Pose:
    R = so3_exp(s.omega_hat, s.theta)
    t = se3_G(s.omega_hat, s.theta) @ np.asarray(s.v, dtype=float).reshape(3)
    return Pose(R, t)


def screw_matrix(s: ScrewAxis) -> np.ndarray:
    """4x4 se(3) element ``[S] * theta``."""
    m = np.zeros((4, 4))
    m[:3, :3] = skew(s.omega_hat) * s.theta
    m[:3, 3] = np.asarray(s.v, dtype=float) * s.theta
    return m


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def matrix_exp_oracle(m, terms: int = 60) -> np.ndarray:
    """Truncated power series sum_{n<terms} m^n / n!. Test oracle only."""
    if terms < 1:
        raise ValueError("terms must be >= 1")
    m = np.asarray(m, dtype=float)
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for n in range(1, terms):
        term = term @ m / n
        out = out + term
    return out


def orthogonality_residual(R) -> float:
    """Frobenius norm of ``R^T R - I``."""
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def geodesic_angle(Ra, Rb) -> float:
    """Rotation angle of ``Ra @ Rb^T`` in radians."""
    M = np.asarray(Ra, dtype=float) @ np.asarray(Rb, dtype=float).T
    sin_part = 0.5 * math.hypot(M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1])
    cos_part = 0.5 * (np.trace(M) - 1.0)
    return float(math.atan2(sin_part, cos_part))
