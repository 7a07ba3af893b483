"""Evaluation runs: per-subsequence estimation and metric aggregation."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimator as est
from .datasets import ReferenceStates, SequenceBundle, gt_window_states, subsequence_starts
from .imu import ImuBias, ImuNoiseParams, gyro_at, interval_samples, preintegrate
from .metrics import MetricsReport, SubsequenceMetrics, aggregate, gravity_angle, rmse
from .rangeflow import DegenerateSystemError, DepthFrame, PairEstimate, estimate_pair
from .sim import ACCEL_NOISE_DENSITY, GYRO_NOISE_DENSITY

log = logging.getLogger(__name__)

WINDOW_SIZES = (2, 3, 4, 5)
DEFAULT_VISUAL_SIGMA = 10.0  # cm/s per weighted range-flow row


@dataclass
class RunConfig:
    frames: int = 2
    imu: bool = True
    marginalize: bool = False
    stride: int = 2
    pyramid: int | None = None
    seed: int = 0
    workers: int = 1
    visual_sigma: float = DEFAULT_VISUAL_SIGMA
    gyro_noise_density: float = GYRO_NOISE_DENSITY
    accel_noise_density: float = ACCEL_NOISE_DENSITY
    depth_is_range: bool = False

    def validate(self) -> "RunConfig":
        if self.frames not in WINDOW_SIZES:
            raise ValueError(f"window size must be one of {WINDOW_SIZES}, got {self.frames}")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.marginalize and not self.imu:
            raise ValueError("marginalization needs the inertial terms (imu on)")
        if self.marginalize and self.frames < 3:
            raise ValueError("marginalization needs a window of at least 3 frames")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.pyramid is not None and self.pyramid < 1:
            raise ValueError("pyramid levels must be at least 1")
        if not self.visual_sigma > 0:
            raise ValueError("visual_sigma must be positive")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def _pair_job(args) -> PairEstimate | None:
    prev, nxt, levels = args
    try:
        return estimate_pair(prev, nxt, levels)
    except DegenerateSystemError:
        return None


def estimate_pairs(frames: list[DepthFrame], indices, levels: int | None = None,
                   workers: int = 1) -> dict[int, PairEstimate | None]:
    """Visual twist of each pair ``(k, k + 1)``; None where no pixel survives."""
    indices = sorted(set(indices))
    jobs = [(frames[k], frames[k + 1], levels) for k in indices]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pair_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_pair_job(j) for j in jobs]
    return dict(zip(indices, results))


def imu_noise_for(bundle: SequenceBundle, config: RunConfig) -> ImuNoiseParams:
    rate = 1.0 / float(np.median(np.diff(bundle.imu.t)))
    return ImuNoiseParams.from_densities(config.gyro_noise_density,
                                         config.accel_noise_density, rate)


@dataclass
class SubsequenceResult:
    start: int
    times: np.ndarray
    twists: np.ndarray | None
    gravity: np.ndarray | None = None
    bias: ImuBias | None = None
    metrics: SubsequenceMetrics | None = None
    degenerate: bool = False
    reason: str = ""


@dataclass
class RunResult:
    config: RunConfig
    results: list[SubsequenceResult]
    report: MetricsReport | None = None
    starts: list[int] = field(default_factory=list)


class SequenceRunner:
    """Evaluates windows of one sequence, caching pair estimates and
    preintegrations so several configurations can share them."""

    def __init__(self, bundle: SequenceBundle, levels: int | None = None, workers: int = 1):
        self.bundle = bundle
        self.levels = levels
        self.workers = workers
        self._pairs: dict[int, PairEstimate | None] = {}
        self._preints: dict[tuple, object] = {}
        self._reference: ReferenceStates | None = None

    @property
    def n_frames(self) -> int:
        return len(self.bundle.frames)

    def pairs(self, indices) -> dict[int, PairEstimate | None]:
        missing = [k for k in indices if k not in self._pairs]
        if missing:
            self._pairs.update(estimate_pairs(self.bundle.frames, missing, self.levels,
                                              self.workers))
        return {k: self._pairs[k] for k in indices}

    def preint(self, k: int, noise: ImuNoiseParams):
        key = (k, noise.sigma_omega[0, 0], noise.sigma_accel[0, 0])
        if key not in self._preints:
            t0 = self.bundle.frames[k].timestamp
            t1 = self.bundle.frames[k + 1].timestamp
            samples = interval_samples(self.bundle.imu, t0, t1)
            self._preints[key] = None if samples is None else preintegrate(
                samples, ImuBias(), noise, t_end=t1)
        return self._preints[key]

    def reference(self) -> ReferenceStates | None:
        if self._reference is None and self.bundle.gt is not None:
            self._reference = gt_window_states(self.bundle.gt, self.bundle.times,
                                               self.bundle.gravity_world, self.bundle.bias)
        return self._reference

    def starts(self, config: RunConfig) -> list[int]:
        # start at 1 so every mode, with or without marginalization,
        # evaluates the same windows
        return subsequence_starts(self.n_frames, config.frames, config.stride, first=1)

    def run(self, config: RunConfig) -> RunResult:
        config.validate()
        if config.imu and self.bundle.imu is None:
            raise ValueError("sequence has no IMU data; run with imu off")
        starts = self.starts(config)
        if not starts:
            raise ValueError(f"sequence of {self.n_frames} frames is too short for "
                             f"{config.frames}-frame windows")
        first = starts[0] - 1 if config.marginalize else starts[0]
        self.pairs(range(first, starts[-1] + config.frames - 1))
        results = [self.run_window(s, config) for s in starts]
        ref = self.reference()
        report = None
        if ref is not None:
            for r in results:
                r.metrics = evaluate(r, ref)
            report = aggregate([r.metrics for r in results])
        return RunResult(config, results, report, starts)

    def run_window(self, s: int, config: RunConfig) -> SubsequenceResult:
        N = config.frames
        frames = self.bundle.frames
        times = np.array([frames[l].timestamp for l in range(s, s + N)])
        if not config.imu:
            pairs = self.pairs(range(s, s + N - 1))
            if any(p is None for p in pairs.values()):
                return SubsequenceResult(s, times, None, degenerate=True,
                                         reason="no valid range-flow pixels")
            if any(p.degenerate for p in pairs.values()):
                return SubsequenceResult(s, times, None, degenerate=True,
                                         reason="unobservable twist directions")
            twists = est.initial_twists([pairs[k].twist for k in range(s, s + N - 1)])
            return SubsequenceResult(s, times, twists)

        noise = imu_noise_for(self.bundle, config)
        start = s - 1 if config.marginalize else s
        pairs = self.pairs(range(start, s + N - 1))
        if any(p is None for p in pairs.values()):
            return SubsequenceResult(s, times, None, degenerate=True,
                                     reason="no valid range-flow pixels")
        window = est.SlidingWindowEstimator(N, noise, config.marginalize, config.visual_sigma)
        try:
            for l in range(start, s + N):
                f = frames[l]
                visual = pairs[l - 1].system if l > start else None
                pre = self.preint(l - 1, noise) if l > start else None
                window.add_frame(f.timestamp, visual, pre, gyro_at(self.bundle.imu, f.timestamp))
                if config.marginalize and l == s + N - 2:
                    window.solve()
            result = window.solve()
        except est.DegenerateGeometryError as exc:
            return SubsequenceResult(s, times, None, degenerate=True, reason=str(exc))
        st = result.state
        return SubsequenceResult(s, st.times.copy(), st.twists.copy(),
                                 st.gravity.vector.copy(), st.bias)


def evaluate(result: SubsequenceResult, ref: ReferenceStates) -> SubsequenceMetrics:
    if result.degenerate:
        nan = float("nan")
        return SubsequenceMetrics(result.start, nan, nan, degenerate=True)
    idx = [int(np.argmin(np.abs(ref.times - t))) for t in result.times]
    gt = ref.twists[idx]
    m = SubsequenceMetrics(
        result.start,
        rmse(result.twists[:, :3] - gt[:, :3]),
        rmse(result.twists[:, 3:] - gt[:, 3:]),
    )
    if result.bias is not None and ref.bias is not None:
        m.rmse_bg = rmse([result.bias.gyro - ref.bias.gyro])
        m.rmse_ba = rmse([result.bias.accel - ref.bias.accel])
    if result.gravity is not None and np.all(np.isfinite(ref.gravity[idx[0]])):
        m.theta_g = gravity_angle(result.gravity, ref.gravity[idx[0]])
    return m


def run_sequences(bundles: list[SequenceBundle], config: RunConfig) -> tuple[MetricsReport | None,
                                                                            list[RunResult]]:
    """Run every sequence and pool their subsequences into one report."""
    runs = [SequenceRunner(b, config.pyramid, config.workers).run(config) for b in bundles]
    metrics = [r.metrics for run in runs for r in run.results if r.metrics is not None]
    return (aggregate(metrics) if metrics else None), runs
