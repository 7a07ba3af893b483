"""IMU measurement model, preintegration and bias/gravity seeding.

Measurements follow

    gyro  = w_body + b_g + n_g
    accel = R_wb^T (a_world - g_world) + b_a + n_a

with accelerations in cm/s^2. Samples use zero-order hold: each sample is
valid from its timestamp until the next one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .geom import (
    GravityDir,
    gravity_retract_jacobian,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
)


class ImuSample(NamedTuple):
    t: float
    gyro: np.ndarray  # rad/s
    accel: np.ndarray  # cm/s^2


@dataclass(frozen=True)
class ImuStream:
    """A time-ordered block of IMU samples stored column-wise."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(t) == len(gyro) == len(accel)):
            raise ValueError("timestamp, gyro and accel lengths differ")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "accel", accel)

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuStream":
        if len(samples) == 0:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.t for s in samples], dtype=float),
            np.array([s.gyro for s in samples], dtype=float),
            np.array([s.accel for s in samples], dtype=float),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k) -> ImuSample:
        return ImuSample(float(self.t[k]), self.gyro[k], self.accel[k])

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.gyro))
                and np.all(np.isfinite(self.accel))):
            raise ValueError("IMU samples contain NaN or infinite values")
        bad = np.flatnonzero(np.diff(self.t) <= 0.0)
        if len(bad):
            k = int(bad[0]) + 1
            raise ValueError(
                f"IMU timestamps not strictly increasing at sample {k}: "
                f"{self.t[k - 1]!r} -> {self.t[k]!r}"
            )


def as_stream(samples) -> ImuStream:
    if isinstance(samples, ImuStream):
        return samples
    return ImuStream.from_samples(list(samples))


@dataclass(frozen=True)
class ImuNoiseParams:
    """Discrete-time measurement covariances (per sample)."""

    sigma_omega: np.ndarray  # rad^2/s^2
    sigma_accel: np.ndarray  # cm^2/s^4

    def __post_init__(self):
        for name in ("sigma_omega", "sigma_accel"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim == 0:
                m = float(m) * np.eye(3)
            if m.shape != (3, 3) or not np.allclose(m, m.T):
                raise ValueError(f"{name} must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(m).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)

    @classmethod
    def from_densities(cls, gyro_density: float, accel_density: float, rate: float):
        """Convert white-noise densities (unit/sqrt(Hz)) to per-sample covariances."""
        return cls(gyro_density**2 * rate * np.eye(3), accel_density**2 * rate * np.eye(3))

    @property
    def sigma_eta(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.sigma_omega
        out[3:, 3:] = self.sigma_accel
        return out


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("gyro", "accel"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"bias {name} must be finite")
            object.__setattr__(self, name, v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative motion deltas between two instants with their 9x9 covariance.

    The covariance is ordered (rotation, velocity, position). The bias
    Jacobians allow first-order correction of the deltas when the bias moves
    away from ``bias_lin``.
    """

    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    delta_t: float
    cov: np.ndarray
    bias_lin: ImuBias
    J_R_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @property
    def cov_dv(self) -> np.ndarray:
        return self.cov[3:6, 3:6]

    def corrected_R(self, bias_gyro) -> np.ndarray:
        dbg = np.asarray(bias_gyro) - self.bias_lin.gyro
        return self.delta_R @ so3_exp(self.J_R_bg @ dbg)

    def corrected_v(self, bias: ImuBias) -> np.ndarray:
        dbg = bias.gyro - self.bias_lin.gyro
        dba = bias.accel - self.bias_lin.accel
        return self.delta_v + self.J_v_bg @ dbg + self.J_v_ba @ dba

    def corrected_p(self, bias: ImuBias) -> np.ndarray:
        dbg = bias.gyro - self.bias_lin.gyro
        dba = bias.accel - self.bias_lin.accel
        return self.delta_p + self.J_p_bg @ dbg + self.J_p_ba @ dba


def transition_matrices(delta_R_step, delta_R_accum, accel_corrected, dt: float):
    """Noise transition ``(A, B)`` of one preintegration step.

    ``delta_R_step`` is the rotation over this step, ``delta_R_accum`` the
    rotation accumulated from the start of the interval up to this step and
    ``accel_corrected`` the bias-corrected accelerometer sample.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    Rs = np.asarray(delta_R_step, dtype=float)
    Ra = np.asarray(delta_R_accum, dtype=float)
    a_hat = skew(accel_corrected)
    I3 = np.eye(3)

    A = np.eye(9)
    A[0:3, 0:3] = Rs.T
    A[3:6, 0:3] = -Ra @ a_hat * dt
    A[6:9, 0:3] = -0.5 * Ra @ a_hat * dt**2
    A[6:9, 3:6] = I3 * dt

    B = np.zeros((9, 6))
    B[0:3, 0:3] = so3_right_jacobian(so3_log(Rs)) * dt
    B[3:6, 3:6] = Ra * dt
    B[6:9, 3:6] = 0.5 * Ra * dt**2
    return A, B


def preintegrate(samples, bias: ImuBias, noise: ImuNoiseParams,
                 t_end: float | None = None) -> PreintegratedImu:
    """Preintegrate a sample stream.

    Each sample holds until the next timestamp; the last one holds until
    ``t_end`` when given, otherwise it only closes the interval.
    """
    stream = as_stream(samples)
    stream.validate()
    n = len(stream)
    if n == 0:
        return PreintegratedImu(np.eye(3), np.zeros(3), np.zeros(3), 0.0,
                                np.zeros((9, 9)), bias)
    dts = np.diff(stream.t)
    if t_end is not None:
        if t_end < stream.t[-1]:
            raise ValueError("t_end precedes the last sample")
        dts = np.append(dts, t_end - stream.t[-1])

    sigma_eta = noise.sigma_eta
    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    cov = np.zeros((9, 9))
    J_R_bg = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))

    for k, dt in enumerate(dts):
        if dt == 0.0:
            continue
        w = stream.gyro[k] - bias.gyro
        a = stream.accel[k] - bias.accel
        dR = so3_exp(w * dt)
        Jr = so3_right_jacobian(w * dt)
        a_hat = skew(a)
        Ra_hat = R @ a_hat

        A, B = transition_matrices(dR, R, a, dt)
        cov = A @ cov @ A.T + B @ sigma_eta @ B.T
        cov = 0.5 * (cov + cov.T)

        J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * R * dt**2
        J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * Ra_hat @ J_R_bg * dt**2
        J_v_ba = J_v_ba - R * dt
        J_v_bg = J_v_bg - Ra_hat @ J_R_bg * dt
        J_R_bg = dR.T @ J_R_bg - Jr * dt

        p = p + v * dt + 0.5 * R @ a * dt**2
        v = v + R @ a * dt
        R = R @ dR

    return PreintegratedImu(R, v, p, float(dts.sum()), cov, bias,
                            J_R_bg, J_v_bg, J_v_ba, J_p_bg, J_p_ba)


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two consecutive preintegrations computed at the same bias."""
    R1, v1, p1 = first.delta_R, first.delta_v, first.delta_p
    R2, v2, p2 = second.delta_R, second.delta_v, second.delta_p
    dt2 = second.delta_t

    # error-state maps of the composed deltas w.r.t. each part's errors
    F = np.eye(9)
    F[0:3, 0:3] = R2.T
    F[3:6, 0:3] = -R1 @ skew(v2)
    F[6:9, 0:3] = -R1 @ skew(p2)
    F[6:9, 3:6] = np.eye(3) * dt2
    G = np.zeros((9, 9))
    G[0:3, 0:3] = np.eye(3)
    G[3:6, 3:6] = R1
    G[6:9, 6:9] = R1
    cov = F @ first.cov @ F.T + G @ second.cov @ G.T

    J_R_bg = R2.T @ first.J_R_bg + second.J_R_bg
    J_v_bg = first.J_v_bg + R1 @ second.J_v_bg - R1 @ skew(v2) @ first.J_R_bg
    J_v_ba = first.J_v_ba + R1 @ second.J_v_ba
    J_p_bg = (first.J_p_bg + first.J_v_bg * dt2 + R1 @ second.J_p_bg
              - R1 @ skew(p2) @ first.J_R_bg)
    J_p_ba = first.J_p_ba + first.J_v_ba * dt2 + R1 @ second.J_p_ba
    return PreintegratedImu(
        R1 @ R2, v1 + R1 @ v2, p1 + v1 * dt2 + R1 @ p2,
        first.delta_t + dt2, 0.5 * (cov + cov.T), first.bias_lin,
        J_R_bg, J_v_bg, J_v_ba, J_p_bg, J_p_ba,
    )


def interval_samples(stream: ImuStream, t0: float, t1: float) -> ImuStream | None:
    """Samples covering ``[t0, t1]`` with a linearly interpolated first sample.

    Returns None when the stream does not cover the interval.
    """
    if len(stream) == 0 or not t1 > t0:
        return None
    t = stream.t
    if t[0] > t0 + 1e-9 or t[-1] < t0:
        return None
    if len(t) > 1:
        gap = float(np.median(np.diff(t)))
        if t[-1] < t1 - 2.0 * gap:
            return None
    k = int(np.searchsorted(t, t0, side="right")) - 1
    if k + 1 < len(t) and t[k] < t0:
        f = (t0 - t[k]) / (t[k + 1] - t[k])
        g0 = (1.0 - f) * stream.gyro[k] + f * stream.gyro[k + 1]
        a0 = (1.0 - f) * stream.accel[k] + f * stream.accel[k + 1]
    else:
        g0, a0 = stream.gyro[k], stream.accel[k]
    inside = (t > t0) & (t < t1)
    return ImuStream(
        np.concatenate([[t0], t[inside]]),
        np.vstack([g0, stream.gyro[inside]]),
        np.vstack([a0, stream.accel[inside]]),
    )


def gyro_at(stream: ImuStream, t: float) -> np.ndarray | None:
    """Gyro reading at time ``t``.

    A held sample describes the interval up to the next timestamp, so the
    readings are interpolated between interval midpoints.
    """
    if len(stream) < 2 or t < stream.t[0] or t > stream.t[-1]:
        return None
    mids = 0.5 * (stream.t[:-1] + stream.t[1:])
    vals = stream.gyro[:-1]
    return np.array([np.interp(t, mids, vals[:, i]) for i in range(3)])


def seed_gyro_bias(omega_est, omega_meas) -> np.ndarray:
    """Initial gyro bias: measured rate minus the visually estimated rate."""
    return np.asarray(omega_meas, dtype=float) - np.asarray(omega_est, dtype=float)


def seed_gravity(v_i, v_j, R_i, preint: PreintegratedImu) -> np.ndarray:
    """First gravity estimate from two velocities and a preintegrated interval."""
    dt = preint.delta_t
    if not dt > 0.0:
        raise ValueError("preintegration interval must be positive")
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    return (v_j - v_i) / dt - np.asarray(R_i) @ preint.delta_v / dt


def residual_delta_v(v_i, v_j, R_i, g: GravityDir, preint: PreintegratedImu,
                     bias: ImuBias) -> np.ndarray:
    """Preintegrated velocity residual.

    ``v_i``, ``v_j`` and ``g`` are expressed in a common reference frame and
    ``R_i`` is the orientation of frame ``i`` in that frame.
    """
    R_i = np.asarray(R_i)
    dv = np.asarray(v_j, dtype=float) - np.asarray(v_i, dtype=float) - g.vector * preint.delta_t
    return R_i.T @ dv - preint.corrected_v(bias)


def residual_delta_v_jacobians(R_i, g: GravityDir, preint: PreintegratedImu) -> dict:
    """Jacobians of :func:`residual_delta_v`.

    Keys: ``v_i``, ``v_j`` (3x3), ``g`` (3x2 tangent), ``bg``, ``ba`` (3x3).
    """
    R_i = np.asarray(R_i)
    return {
        "v_i": -R_i.T,
        "v_j": R_i.T.copy(),
        "g": -g.magnitude * preint.delta_t * R_i.T @ gravity_retract_jacobian(g),
        "bg": -preint.J_v_bg,
        "ba": -preint.J_v_ba,
    }


def read_imu_csv(path) -> ImuStream:
    """Read ``t, wx, wy, wz, ax, ay, az`` lines (header optional, ``#`` comments)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                if not rows:  # header line
                    continue
                raise ValueError(f"{path}:{lineno}: unparsable IMU row") from None
            if len(vals) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 columns, got {len(vals)}")
            if rows and vals[0] <= rows[-1][0]:
                raise ValueError(
                    f"{path}:{lineno}: IMU timestamps not strictly increasing"
                )
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, 7)
    return ImuStream(data[:, 0], data[:, 1:4], data[:, 4:7])


def write_imu_csv(path, stream: ImuStream) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("# t, wx, wy, wz, ax, ay, az  [s, rad/s, cm/s^2]\n")
        for k in range(len(stream)):
            vals = [stream.t[k], *stream.gyro[k], *stream.accel[k]]
            fh.write(",".join(f"{x:.9g}" for x in vals) + "\n")
