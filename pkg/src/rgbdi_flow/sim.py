"""Synthetic ground truth: spline trajectories, IMU streams and depth rendering.

Poses are camera-to-world: ``X_world = R @ X_cam + p``. The world frame has
z pointing up, so gravity is ``(0, 0, -981)`` cm/s^2 unless stated otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .geom import GRAVITY_MAGNITUDE, so3_exp, so3_log, so3_right_jacobian
from .imu import ImuBias, ImuNoiseParams, ImuStream
from .rangeflow import DepthFrame, Intrinsics

WORLD_GRAVITY = np.array([0.0, 0.0, -GRAVITY_MAGNITUDE])

IMU_RATE = 200.0
CAMERA_RATE = 30.0
GYRO_NOISE_DENSITY = 1.7e-4  # rad/s/sqrt(Hz)
ACCEL_NOISE_DENSITY = 2.0  # cm/s^2/sqrt(Hz)

# camera looking along world +x, image x to world -y, image y to world -z
LEVEL_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


def _batch_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobians of an ``(n, 3)`` array of rotation vectors."""
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * (np.sin(0.5 * safe) / safe) ** 2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    K = np.zeros(phi.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -phi[..., 2], phi[..., 1]
    K[..., 1, 0], K[..., 1, 2] = phi[..., 2], -phi[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -phi[..., 1], phi[..., 0]
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


class CumulativeRotationSpline:
    """C1 orientation interpolant in cumulative axis-angle form.

    On ``[t_k, t_k+1]`` the rotation is ``R_k Exp(theta(s))``, where
    ``theta`` is a cubic Hermite curve from 0 to ``Log(R_k^T R_k+1)``. The
    end tangents are chosen so the body rate equals the knot rates, which
    are three-point estimates from the neighbouring segments.
    """

    def __init__(self, times: np.ndarray, rotations: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.rotations = np.asarray(rotations, dtype=float)
        h = np.diff(self.times)
        delta = np.array([so3_log(a.T @ b) for a, b in zip(self.rotations[:-1],
                                                           self.rotations[1:])])
        rates = delta / h[:, None]
        # a segment's rotation vector reads the same in both end frames
        w = np.empty((len(self.times), 3))
        w[1:-1] = (h[1:, None] * rates[:-1] + h[:-1, None] * rates[1:]) / (h[:-1] + h[1:])[:, None]
        if len(rates) > 1:
            w[0] = 2.0 * rates[0] - w[1]
            w[-1] = 2.0 * rates[-1] - w[-2]
        else:
            w[0] = w[-1] = rates[0]
        self._h = h
        self._delta = delta
        self._m0 = h[:, None] * w[:-1]
        self._m1 = np.array([h[k] * np.linalg.solve(so3_right_jacobian(delta[k]), w[k + 1])
                             for k in range(len(h))])

    def _segment(self, t: np.ndarray):
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self._h) - 1)
        s = (t - self.times[k]) / self._h[k]
        return k, s[..., None]

    def _theta(self, k, s):
        s2, s3 = s * s, s * s * s
        theta = ((s3 - 2 * s2 + s) * self._m0[k] + (3 * s2 - 2 * s3) * self._delta[k]
                 + (s3 - s2) * self._m1[k])
        dtheta = ((3 * s2 - 4 * s + 1) * self._m0[k] + (6 * s - 6 * s2) * self._delta[k]
                  + (3 * s2 - 2 * s) * self._m1[k])
        return theta, dtheta

    def rotation(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k, s = self._segment(t.reshape(-1))
        theta, _ = self._theta(k, s)
        R = self.rotations[k] @ Rotation.from_rotvec(theta).as_matrix()
        return R.reshape(t.shape + (3, 3))

    def angular_velocity(self, t) -> np.ndarray:
        """Body-frame rate ``Jr(theta) dtheta/dt``."""
        t = np.asarray(t, dtype=float)
        k, s = self._segment(t.reshape(-1))
        theta, dtheta = self._theta(k, s)
        w = np.einsum("nij,nj->ni", _batch_right_jacobian(theta), dtheta) / self._h[k][:, None]
        return w.reshape(t.shape + (3,))


@dataclass
class TrajectorySpline:
    """Interpolating camera trajectory.

    Position is a not-a-knot cubic spline (C2); orientation is a C1
    cumulative axis-angle spline.
    """

    times: np.ndarray
    _pos: CubicSpline
    _rot: CumulativeRotationSpline

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t0 - 1e-9) or np.any(t > self.t1 + 1e-9):
            raise ValueError(f"time outside trajectory span [{self.t0}, {self.t1}]")
        return np.clip(t, self.t0, self.t1)

    def position(self, t) -> np.ndarray:
        return self._pos(self._check(t))

    def velocity(self, t) -> np.ndarray:
        """World-frame linear velocity (cm/s)."""
        return self._pos(self._check(t), 1)

    def acceleration(self, t) -> np.ndarray:
        return self._pos(self._check(t), 2)

    def rotation(self, t) -> np.ndarray:
        return self._rot.rotation(self._check(t))

    def angular_velocity(self, t) -> np.ndarray:
        """Body-frame angular velocity (rad/s)."""
        return self._rot.angular_velocity(self._check(t))

    def body_velocity(self, t) -> np.ndarray:
        """Camera twist ``(v, w)`` with both parts in the camera frame."""
        R = self.rotation(t)
        v = self.velocity(t)
        w = self.angular_velocity(t)
        if R.ndim == 2:
            return np.concatenate([R.T @ v, w])
        return np.concatenate([np.einsum("nji,nj->ni", R, v), w], axis=1)


def fit_spline(times, positions, rotations) -> TrajectorySpline:
    """Interpolate timestamped poses (``rotations`` as 3x3 matrices)."""
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    rotations = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    if len(times) < 4:
        raise ValueError("at least 4 poses are needed to fit a trajectory")
    if not (len(times) == len(positions) == len(rotations)):
        raise ValueError("times, positions and rotations differ in length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("pose timestamps must be strictly increasing")
    return TrajectorySpline(times, CubicSpline(times, positions, axis=0),
                            CumulativeRotationSpline(times, rotations))


def sample_times(t0: float, t1: float, rate: float) -> np.ndarray:
    if not rate > 0:
        raise ValueError("rate must be positive")
    n = int(np.floor((t1 - t0) * rate + 1e-9))
    return t0 + np.arange(n + 1) / rate


def synthesize_imu(traj: TrajectorySpline, rate: float = IMU_RATE,
                   noise: ImuNoiseParams | None = None, bias: ImuBias | None = None,
                   gravity=WORLD_GRAVITY, rng: np.random.Generator | None = None,
                   sampling: str = "interval") -> ImuStream:
    """Gyro and accelerometer samples along a trajectory.

    ``sampling="instant"`` evaluates the body rate and specific force at each
    sample time. ``sampling="interval"`` reports the mean rate and specific
    force over the interval until the next sample (the last interval is
    extrapolated from its predecessor), which is what a zero-order-hold
    integrator needs to reproduce the trajectory exactly.
    """
    bias = ImuBias() if bias is None else bias
    gravity = np.asarray(gravity, dtype=float)
    t = sample_times(traj.t0, traj.t1, rate)
    if sampling == "instant":
        R = traj.rotation(t)
        gyro = traj.angular_velocity(t)
        f_world = traj.acceleration(t) - gravity
        accel = np.einsum("nji,nj->ni", R, f_world)
    elif sampling == "interval":
        R = traj.rotation(t)
        v = traj.velocity(t)
        dt = np.diff(t)
        gyro = np.array([so3_log(R[k].T @ R[k + 1]) / dt[k] for k in range(len(dt))])
        dv = np.diff(v, axis=0) / dt[:, None] - gravity
        accel = np.einsum("nji,nj->ni", R[:-1], dv)
        if len(t) > 1:
            gyro = np.vstack([gyro, gyro[-1:]])
            accel = np.vstack([accel, accel[-1:]])
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    gyro = gyro + bias.gyro
    accel = accel + bias.accel
    if noise is not None:
        rng = np.random.default_rng() if rng is None else rng
        gyro = gyro + rng.multivariate_normal(np.zeros(3), noise.sigma_omega, size=len(t))
        accel = accel + rng.multivariate_normal(np.zeros(3), noise.sigma_accel, size=len(t))
    return ImuStream(t, gyro, accel)


@dataclass(frozen=True)
class Plane:
    """Points with ``normal @ X = offset``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and full side lengths."""

    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        e = np.asarray(self.extent, dtype=float).reshape(3)
        if np.any(e <= 0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extent", e)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = self.center - 0.5 * self.extent
        hi = self.center + 0.5 * self.extent
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        # a ray parallel to a slab is inside it or misses it entirely
        parallel = dirs == 0
        inside = (origin >= lo) & (origin <= hi)
        tmin_axis = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax_axis = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tmin = tmin_axis.max(axis=-1)
        tmax = tmax_axis.min(axis=-1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.inf)


@dataclass
class SceneModel:
    planes: list[Plane] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self):
        if not self.planes and not self.boxes:
            raise ValueError("scene must contain at least one primitive")

    @property
    def primitives(self):
        return [*self.planes, *self.boxes]


def parse_scene(text: str) -> SceneModel:
    """Read ``plane nx ny nz d`` and ``box cx cy cz ex ey ez`` lines."""
    planes, boxes = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *vals = line.split()
        try:
            nums = [float(x) for x in vals]
        except ValueError:
            raise ValueError(f"scene line {lineno}: non-numeric value") from None
        if kind == "plane" and len(nums) == 4:
            planes.append(Plane(nums[:3], nums[3]))
        elif kind == "box" and len(nums) == 6:
            boxes.append(Box(nums[:3], nums[3:]))
        else:
            raise ValueError(f"scene line {lineno}: cannot parse {raw!r}")
    return SceneModel(planes, boxes)


def format_scene(scene: SceneModel) -> str:
    lines = [f"plane {p.normal[0]:.9g} {p.normal[1]:.9g} {p.normal[2]:.9g} {p.offset:.9g}"
             for p in scene.planes]
    lines += ["box " + " ".join(f"{x:.9g}" for x in (*b.center, *b.extent)) for b in scene.boxes]
    return "\n".join(lines) + "\n"


def load_scene(path) -> SceneModel:
    return parse_scene(Path(path).read_text())


def default_scene() -> SceneModel:
    """A desk-scale room: floor, ceiling, three walls and a few boxes."""
    return SceneModel(
        planes=[
            Plane([0, 0, 1], 0.0),
            Plane([0, 0, 1], 260.0),
            Plane([1, 0, 0], 350.0),
            Plane([0, 1, 0], 200.0),
            Plane([0, 1, 0], -200.0),
        ],
        boxes=[
            Box([220, -60, 40], [60, 80, 80]),
            Box([260, 90, 60], [50, 50, 120]),
            Box([160, 20, 15], [40, 40, 30]),
            Box([300, 0, 150], [30, 120, 40]),
        ],
    )


def camera_rays(K: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions in the camera frame with unit z component."""
    uu, vv = K.pixel_grid()
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)


def render_depth(scene: SceneModel, R: np.ndarray, p, K: Intrinsics, timestamp: float = 0.0,
                 max_range: float = 1000.0, noise_std: float = 0.0,
                 rng: np.random.Generator | None = None) -> DepthFrame:
    """Z-depth image of ``scene`` seen from camera pose ``(R, p)``.

    Pixels with no hit or a hit beyond ``max_range`` are 0.
    """
    dirs = camera_rays(K) @ np.asarray(R, dtype=float).T
    origin = np.asarray(p, dtype=float)
    depth = np.full(dirs.shape[:2], np.inf)
    for prim in scene.primitives:
        depth = np.minimum(depth, prim.intersect(origin, dirs))
    # with a unit-z camera ray the ray parameter equals the z-depth
    depth[~np.isfinite(depth) | (depth > max_range)] = 0.0
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        hit = depth > 0
        depth[hit] = np.maximum(depth[hit] + rng.normal(0.0, noise_std, hit.sum()), 1e-3)
    return DepthFrame(timestamp, depth, K)


@dataclass(frozen=True)
class TrajectoryParams:
    """Sinusoidal camera motion around a nominal pose."""

    center: np.ndarray
    base_rotation: np.ndarray
    pos_amp: np.ndarray
    pos_freq: np.ndarray
    pos_phase: np.ndarray
    ang_amp: np.ndarray
    ang_freq: np.ndarray
    ang_phase: np.ndarray

    def pose(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        arg = 2 * np.pi * self.pos_freq * t + self.pos_phase
        p = self.center + self.pos_amp * np.sin(arg)
        ang = self.ang_amp * np.sin(2 * np.pi * self.ang_freq * t + self.ang_phase)
        return self.base_rotation @ so3_exp(ang), p


def desk_camera(pitch: float = 0.35) -> np.ndarray:
    """Level camera looking along +x, pitched down by ``pitch`` rad."""
    return LEVEL_CAMERA @ so3_exp([-pitch, 0.0, 0.0])


def random_trajectory_params(rng: np.random.Generator) -> TrajectoryParams:
    return TrajectoryParams(
        center=np.array([0.0, 0.0, 120.0]) + rng.uniform(-10, 10, 3),
        base_rotation=desk_camera(rng.uniform(0.25, 0.45)),
        pos_amp=rng.uniform(3.0, 8.0, 3),
        pos_freq=rng.uniform(0.3, 0.9, 3),
        pos_phase=rng.uniform(0, 2 * np.pi, 3),
        ang_amp=rng.uniform(0.03, 0.1, 3),
        ang_freq=rng.uniform(0.3, 0.9, 3),
        ang_phase=rng.uniform(0, 2 * np.pi, 3),
    )


def trajectory_from_params(params: TrajectoryParams, duration: float,
                           knot_rate: float = 100.0) -> TrajectorySpline:
    t = sample_times(0.0, duration, knot_rate)
    poses = [params.pose(tk) for tk in t]
    return fit_spline(t, [p for _, p in poses], [R for R, _ in poses])


def random_trajectory(rng: np.random.Generator, duration: float) -> TrajectorySpline:
    return trajectory_from_params(random_trajectory_params(rng), duration)


def stationary_trajectory(duration: float, R=None, p=(0.0, 0.0, 120.0)) -> TrajectorySpline:
    R = desk_camera() if R is None else np.asarray(R, dtype=float)
    t = np.linspace(0.0, duration, 5)
    return fit_spline(t, np.tile(np.asarray(p, dtype=float), (5, 1)), np.tile(R, (5, 1, 1)))


@dataclass
class SimulatedSequence:
    frames: list[DepthFrame]
    imu: ImuStream
    traj: TrajectorySpline
    gt_times: np.ndarray
    gt_positions: np.ndarray
    gt_rotations: np.ndarray
    gravity_world: np.ndarray
    bias: ImuBias
    seed: int | None = None


def simulate_sequence(n_frames: int, seed: int | None = 0, scene: SceneModel | None = None,
                      K: Intrinsics | None = None, camera_rate: float = CAMERA_RATE,
                      imu_rate: float = IMU_RATE, depth_noise: float = 0.1,
                      gyro_density: float = GYRO_NOISE_DENSITY,
                      accel_density: float = ACCEL_NOISE_DENSITY,
                      bias: ImuBias | None = None, traj: TrajectorySpline | None = None,
                      sampling: str = "interval") -> SimulatedSequence:
    """Render a depth sequence with a matching IMU stream and ground truth.

    Frame ``k`` is taken at ``k / camera_rate``. With ``bias=None`` a random
    bias is drawn (about 0.01 rad/s gyro, 2 cm/s^2 accel).
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    scene = default_scene() if scene is None else scene
    K = default_intrinsics() if K is None else K
    duration = (n_frames - 1) / camera_rate + 0.1
    if traj is None:
        traj = random_trajectory(rng, duration)
    if bias is None:
        bias = ImuBias(rng.normal(0.0, 0.01, 3), rng.normal(0.0, 2.0, 3))
    noise = None
    if gyro_density > 0 or accel_density > 0:
        noise = ImuNoiseParams.from_densities(gyro_density, accel_density, imu_rate)
    imu = synthesize_imu(traj, imu_rate, noise, bias, WORLD_GRAVITY, rng, sampling=sampling)
    times = np.arange(n_frames) / camera_rate + traj.t0
    frames = [render_depth(scene, traj.rotation(t), traj.position(t), K, float(t),
                           noise_std=depth_noise, rng=rng) for t in times]
    gt_t = sample_times(traj.t0, traj.t1, imu_rate)
    return SimulatedSequence(frames, imu, traj, gt_t, traj.position(gt_t), traj.rotation(gt_t),
                             WORLD_GRAVITY.copy(), bias, seed)


def orbit_trajectory(duration: float, radius: float = 30.0, rate: float = 0.5,
                     center=(0.0, 0.0, 120.0)) -> TrajectorySpline:
    """Camera circling ``center`` in a horizontal plane, always facing +x."""
    t = sample_times(0.0, duration, 100.0)
    c = np.asarray(center, dtype=float)
    pos = c + radius * np.stack([np.cos(rate * t), np.sin(rate * t), 0 * t], axis=1)
    return fit_spline(t, pos, np.tile(desk_camera(), (len(t), 1, 1)))

