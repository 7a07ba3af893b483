"""Reading and writing depth + IMU sequences with ground truth.

Directory layout (TUM-compatible)::

    calib.txt        fx fy cx cy width height depth_scale
    depth.txt        "t filename" per frame, filename relative to the root
    depth/<t>.png    16-bit depth, value / depth_scale = meters
    imu.csv          t, wx, wy, wz, ax, ay, az   (s, rad/s, cm/s^2)
    groundtruth.txt  t px py pz qx qy qz qw      (meters, camera-to-world)
    simulation.json  optional: seed, world gravity and true IMU biases

Text files are whitespace-delimited with ``#`` comments.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .imu import ImuBias, ImuStream, read_imu_csv, write_imu_csv
from .rangeflow import DepthFrame, Intrinsics
from .sim import SimulatedSequence, fit_spline

log = logging.getLogger(__name__)

TUM_DEPTH_SCALE = 5000.0  # PNG units per meter
CM_PER_M = 100.0

CALIB_FILE = "calib.txt"
DEPTH_INDEX = "depth.txt"
IMU_FILE = "imu.csv"
GT_FILE = "groundtruth.txt"
SIM_FILE = "simulation.json"


@dataclass
class GroundTruth:
    times: np.ndarray
    positions: np.ndarray  # (n, 3) cm
    rotations: np.ndarray  # (n, 3, 3) camera-to-world

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class SequenceBundle:
    frames: list[DepthFrame]
    intrinsics: Intrinsics
    imu: ImuStream | None = None
    gt: GroundTruth | None = None
    gravity_world: np.ndarray | None = None
    bias: ImuBias | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.array([f.timestamp for f in self.frames])
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            k = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1
            raise ValueError(f"frame timestamps not strictly increasing at frame {k}")

    @property
    def times(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @classmethod
    def from_simulation(cls, seq: SimulatedSequence) -> "SequenceBundle":
        gt = GroundTruth(seq.gt_times, seq.gt_positions, seq.gt_rotations)
        return cls(list(seq.frames), seq.frames[0].intrinsics, seq.imu, gt,
                   seq.gravity_world.copy(), seq.bias, {"seed": seq.seed})


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.replace(",", " ").split()


def read_calib(path) -> tuple[Intrinsics, float]:
    path = Path(path)
    for lineno, parts in _data_lines(path):
        if len(parts) not in (6, 7):
            raise ValueError(f"{path}:{lineno}: expected fx fy cx cy width height [depth_scale]")
        fx, fy, cx, cy = (float(x) for x in parts[:4])
        K = Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))
        return K, float(parts[6]) if len(parts) == 7 else TUM_DEPTH_SCALE
    raise ValueError(f"{path}: no calibration line")


def read_depth_index(path) -> list[tuple[float, str]]:
    path = Path(path)
    out: list[tuple[float, str]] = []
    for lineno, parts in _data_lines(path):
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected 't filename'")
        t = float(parts[0])
        if out and not t > out[-1][0]:
            raise ValueError(f"{path}:{lineno}: depth timestamps not strictly increasing")
        out.append((t, parts[1]))
    return out


def read_groundtruth(path) -> GroundTruth:
    path = Path(path)
    rows = []
    for lineno, parts in _data_lines(path):
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected t px py pz qx qy qz qw")
        vals = [float(x) for x in parts]
        if rows and not vals[0] > rows[-1][0]:
            raise ValueError(f"{path}:{lineno}: ground-truth timestamps not strictly increasing")
        rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, 8)
    return GroundTruth(data[:, 0], data[:, 1:4] * CM_PER_M,
                       Rotation.from_quat(data[:, 4:8]).as_matrix())


def write_groundtruth(path, gt: GroundTruth) -> None:
    q = Rotation.from_matrix(gt.rotations).as_quat()
    with open(path, "w") as fh:
        fh.write("# t px py pz qx qy qz qw  [s, m]\n")
        for t, p, qq in zip(gt.times, gt.positions / CM_PER_M, q):
            fh.write(" ".join(f"{x:.9f}" for x in (t, *p, *qq)) + "\n")


def ray_to_z(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Convert distances along the pixel rays into z-depth."""
    uu, vv = K.pixel_grid()
    norm = np.sqrt(((uu - K.cx) / K.fx) ** 2 + ((vv - K.cy) / K.fy) ** 2 + 1.0)
    return depth / norm


def read_depth_png(path, K: Intrinsics, depth_scale: float = TUM_DEPTH_SCALE,
                   depth_is_range: bool = False) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            raw = np.array(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read depth image {path}: {exc}") from None
    if raw.shape != (K.height, K.width):
        raise ValueError(f"{path}: image is {raw.shape[1]}x{raw.shape[0]}, "
                         f"calibration says {K.width}x{K.height}")
    depth = raw.astype(float) / depth_scale * CM_PER_M
    if depth_is_range:
        depth = ray_to_z(depth, K)
    return depth


def depth_to_png_values(depth: np.ndarray, depth_scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    vals = np.rint(np.asarray(depth) / CM_PER_M * depth_scale)
    if vals.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("depth exceeds the 16-bit PNG range")
    return vals.astype(np.uint16)


def write_depth_png(path, depth: np.ndarray, depth_scale: float = TUM_DEPTH_SCALE) -> None:
    Image.fromarray(depth_to_png_values(depth, depth_scale)).save(path)


def load_sequence(root, depth_is_range: bool = False, load_imu: bool = True) -> SequenceBundle:
    """Load a sequence directory; depth is converted to cm z-depth.

    ``depth_is_range`` marks exports that store distance along the ray
    rather than z-depth. With ``load_imu=False`` the IMU file is never
    opened.
    """
    root = Path(root)
    if not (root / DEPTH_INDEX).is_file():
        raise FileNotFoundError(f"missing depth index {root / DEPTH_INDEX}")
    if not (root / CALIB_FILE).is_file():
        raise FileNotFoundError(f"missing calibration {root / CALIB_FILE}")
    K, scale = read_calib(root / CALIB_FILE)
    frames = [DepthFrame(t, read_depth_png(root / name, K, scale, depth_is_range), K)
              for t, name in read_depth_index(root / DEPTH_INDEX)]
    imu = None
    if load_imu and (root / IMU_FILE).is_file():
        imu = read_imu_csv(root / IMU_FILE)
    gt = read_groundtruth(root / GT_FILE) if (root / GT_FILE).is_file() else None
    gravity = bias = None
    meta: dict = {"root": str(root)}
    if (root / SIM_FILE).is_file():
        info = json.loads((root / SIM_FILE).read_text())
        gravity = np.array(info["gravity_world"], dtype=float)
        bias = ImuBias(info["bias_gyro"], info["bias_accel"])
        meta["seed"] = info.get("seed")
    return SequenceBundle(frames, K, imu, gt, gravity, bias, meta)


def save_sequence(bundle: SequenceBundle, root, depth_scale: float = TUM_DEPTH_SCALE) -> Path:
    root = Path(root)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    K = bundle.intrinsics
    (root / CALIB_FILE).write_text(
        "# fx fy cx cy width height depth_scale\n"
        f"{K.fx:.9g} {K.fy:.9g} {K.cx:.9g} {K.cy:.9g} {K.width} {K.height} {depth_scale:.9g}\n"
    )
    lines = ["# t filename"]
    for f in bundle.frames:
        name = f"depth/{f.timestamp:.6f}.png"
        write_depth_png(root / name, f.depth, depth_scale)
        lines.append(f"{f.timestamp:.6f} {name}")
    (root / DEPTH_INDEX).write_text("\n".join(lines) + "\n")
    if bundle.imu is not None:
        write_imu_csv(root / IMU_FILE, bundle.imu)
    if bundle.gt is not None:
        write_groundtruth(root / GT_FILE, bundle.gt)
    if bundle.gravity_world is not None and bundle.bias is not None:
        info = {
            "seed": bundle.meta.get("seed"),
            "gravity_world": [float(x) for x in bundle.gravity_world],
            "bias_gyro": [float(x) for x in bundle.bias.gyro],
            "bias_accel": [float(x) for x in bundle.bias.accel],
        }
        (root / SIM_FILE).write_text(json.dumps(info, indent=2) + "\n")
    return root


def associate(times_a, times_b, max_dt: float) -> tuple[list[tuple[int, int]], int]:
    """Greedy one-to-one timestamp matching, closest pairs first.

    Returns index pairs sorted by the first list and the number of entries
    of the first list left unmatched.
    """
    a = np.asarray(times_a, dtype=float)
    b = np.asarray(times_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return [], len(a)
    cand = []
    for i, t in enumerate(a):
        lo = np.searchsorted(b, t - max_dt, side="left")
        hi = np.searchsorted(b, t + max_dt, side="right")
        for j in range(lo, hi):
            d = abs(b[j] - t)
            if d <= max_dt:
                cand.append((d, i, j))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs, len(a) - len(pairs)


@dataclass
class ReferenceStates:
    """Ground-truth quantities at frame times, in the estimator's conventions."""

    times: np.ndarray
    twists: np.ndarray  # (n, 6) body-frame (v, w)
    gravity: np.ndarray  # (n, 3) gravity in each frame's camera frame
    bias: ImuBias | None


def gt_window_states(gt: GroundTruth, frame_times, gravity_world=None,
                     bias: ImuBias | None = None) -> ReferenceStates:
    """Body-frame twists and camera-frame gravity at the given frame times."""
    frame_times = np.asarray(frame_times, dtype=float)
    if len(gt) < 4:
        raise ValueError("ground truth needs at least 4 poses")
    if frame_times.min() < gt.times[0] or frame_times.max() > gt.times[-1]:
        raise ValueError("frame times fall outside the ground-truth span")
    traj = fit_spline(gt.times, gt.positions, gt.rotations)
    twists = traj.body_velocity(frame_times).reshape(-1, 6)
    if gravity_world is None:
        gravity = np.full((len(frame_times), 3), np.nan)
    else:
        R = traj.rotation(frame_times).reshape(-1, 3, 3)
        gravity = np.einsum("nji,j->ni", R, np.asarray(gravity_world, dtype=float))
    return ReferenceStates(frame_times, twists, gravity, bias)


def subsequence_starts(n_frames: int, window: int, stride: int = 2, first: int = 0) -> list[int]:
    """Start indices of evaluation windows: every ``stride`` frames."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    return list(range(first, n_frames - window + 1, stride))
