"""Rotation and unit-sphere helpers.

Rotations are plain 3x3 ``numpy`` arrays. Gravity is carried as a unit
direction with a fixed magnitude and is updated through a two-parameter
retraction on the sphere.

Units are centimeters, seconds and radians throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY_MAGNITUDE = 981.0  # cm/s^2

# Below this angle the closed forms lose precision, so Taylor series are used.
SMALL_ANGLE = 1e-4


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
    )


def _exp_coeffs(theta: float) -> tuple[float, float]:
    # sin(t)/t and (1 - cos t)/t^2
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    half = 0.5 * theta
    return np.sin(theta) / theta, 2.0 * (np.sin(half) / theta) ** 2


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula: rotation by ``|phi|`` about ``phi / |phi|``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    a, b = _exp_coeffs(theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` with angle in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = 0.5 * vee(R - R.T)  # sin(theta) * axis
    sin_theta = float(np.linalg.norm(w))
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-3:
        return w * (theta / sin_theta)
    # near a half-turn the antisymmetric part vanishes; use the symmetric part
    S = 0.5 * (R + R.T) - cos_theta * np.eye(3)  # (1 - cos) * axis axis^T
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def so3_right_jacobian(phi) -> np.ndarray:
    """Right Jacobian: ``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        b = 2.0 * (np.sin(0.5 * theta) / theta) ** 2
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - b * K + c * (K @ K)


def so3_left_jacobian(phi) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def se3_exp(xi) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a twist ``(v, w)``; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[:3], xi[3:]
    return so3_exp(w), so3_left_jacobian(w) @ v


def tangent_basis(direction) -> np.ndarray:
    """Orthonormal 3x2 basis of the plane orthogonal to a unit vector.

    The first column is built from the canonical axis least aligned with the
    direction, so the basis is a deterministic function of its input.
    """
    d = np.asarray(direction, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(d)))] = 1.0
    b1 = np.cross(d, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(d, b1)
    return np.column_stack([b1, b2])


@dataclass(frozen=True)
class GravityDir:
    """Gravity as a unit direction plus a fixed magnitude (cm/s^2)."""

    direction: np.ndarray
    magnitude: float = GRAVITY_MAGNITUDE

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("gravity direction must be a finite nonzero vector")
        object.__setattr__(self, "direction", d / n)

    @classmethod
    def from_vector(cls, g) -> "GravityDir":
        return cls(np.asarray(g, dtype=float))

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * self.direction

    @property
    def basis(self) -> np.ndarray:
        return tangent_basis(self.direction)

    def rotated(self, R: np.ndarray) -> "GravityDir":
        return GravityDir(R @ self.direction, self.magnitude)


def gravity_retract(g: GravityDir, delta) -> GravityDir:
    """Move ``g`` on the sphere by the tangent step ``delta`` (2-vector, rad).

    The direction is rotated about the tangent axis ``B @ delta`` by
    ``|delta|`` radians, ``B`` being :func:`tangent_basis` at ``g``.
    """
    delta = np.asarray(delta, dtype=float)
    axis = g.basis @ delta
    return GravityDir(so3_exp(axis) @ g.direction, g.magnitude)


def gravity_retract_jacobian(g: GravityDir) -> np.ndarray:
    """d(direction)/d(delta) of :func:`gravity_retract` at ``delta = 0`` (3x2)."""
    return -skew(g.direction) @ g.basis


def gravity_boxminus(g: GravityDir, ref: GravityDir) -> np.ndarray:
    """Tangent coordinates at ``ref`` of ``g``; inverse of :func:`gravity_retract`."""
    d, r = g.direction, ref.direction
    c = np.cross(r, d)
    s = float(np.linalg.norm(c))
    theta = float(np.arctan2(s, float(r @ d)))
    f = 1.0 + theta * theta / 6.0 if theta < SMALL_ANGLE else theta / np.sin(theta)
    return ref.basis.T @ (f * c)


def gravity_boxminus_jacobian(g: GravityDir, ref: GravityDir) -> np.ndarray:
    """Jacobian of ``gravity_boxminus(retract(g, delta), ref)`` w.r.t. ``delta`` at 0."""
    d, r = g.direction, ref.direction
    c = np.cross(r, d)
    s = float(np.linalg.norm(c))
    co = float(r @ d)
    theta = float(np.arctan2(s, co))
    Kr = skew(r)
    if theta < SMALL_ANGLE:
        dh_dd = (1.0 + theta * theta / 6.0) * Kr
        if s > 0.0:
            dtheta = (co * (c @ Kr) / s - s * r) / (s * s + co * co)
            dh_dd = dh_dd + np.outer(c, dtheta) * (theta / 3.0)
    else:
        sin_t = np.sin(theta)
        f = theta / sin_t
        df = (sin_t - theta * np.cos(theta)) / sin_t**2
        dtheta = (co * (c @ Kr) / s - s * r) / (s * s + co * co)
        dh_dd = f * Kr + df * np.outer(c, dtheta)
    return ref.basis.T @ dh_dd @ gravity_retract_jacobian(g)
