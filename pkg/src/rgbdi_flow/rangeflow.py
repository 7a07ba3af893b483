"""Dense range-flow constraints between two depth images.

Every valid pixel of a frame pair gives one linear equation in the camera
twist ``x = [v_x, v_y, v_z, w_x, w_y, w_z]`` (cm/s, rad/s, camera frame
x-right / y-down / z-forward):

    -Z_t = (1 + x f_x Z_u / z^2 + y f_y Z_v / z^2) (v_z + y w_x - x w_y)
           + f_x Z_u / z (-v_x + y w_z - z w_y)
           + f_y Z_v / z (-v_y - x w_z + z w_x)

Rows are masked around depth discontinuities and weighted by a per-pixel
uncertainty score. Large motions are handled coarse-to-fine: the second
frame is warped by the current twist and only the residual motion is
linearized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .geom import se3_exp

log = logging.getLogger(__name__)

# adaptive edge mask
MASK_KAPPA = 5.0
MASK_KAPPA_ABS = 4.0  # cm/px

# weight model
WEIGHT_GRAD = 0.01
WEIGHT_TEMPORAL = 0.01
WEIGHT_DEPTH = 1e-6

# occlusion filter on the depth change left after warping
OCCLUSION_KAPPA = 6.0
OCCLUSION_ABS = 0.5  # cm

MIN_PYRAMID_WIDTH = 40
DEGENERATE_COND = 1e8


class DegenerateSystemError(RuntimeError):
    """No pixel survives masking, so a frame pair gives no constraint."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def downsampled(self) -> "Intrinsics":
        """Intrinsics after keeping every second row and column."""
        return Intrinsics(self.fx / 2, self.fy / 2, self.cx / 2, self.cy / 2,
                          (self.width + 1) // 2, (self.height + 1) // 2)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(np.arange(self.width, dtype=float),
                           np.arange(self.height, dtype=float))

    def backproject(self, u, v, z) -> np.ndarray:
        return np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)


@dataclass(frozen=True)
class DepthFrame:
    """Z-depth image in cm; 0 marks an invalid pixel."""

    timestamp: float
    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        d = np.array(self.depth, dtype=float)
        d[~np.isfinite(d)] = 0.0
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"depth shape {d.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )
        if (d < 0).any():
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "depth", d)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


class DepthDerivatives(NamedTuple):
    du: np.ndarray  # cm/px
    dv: np.ndarray  # cm/px
    dt: np.ndarray  # cm/s
    depth: np.ndarray  # averaged depth the spatial derivatives refer to
    valid: np.ndarray


@dataclass
class FlowLinearSystem:
    """Weighted constraints ``W A x = W B`` of one frame pair.

    ``rhs`` is expressed for the absolute twist: when the rows were
    linearized around a nonzero twist, that twist has been folded in.
    """

    coeff: np.ndarray  # (M, 6)
    rhs: np.ndarray  # (M,)
    weights: np.ndarray  # (M,)
    pixel_index: np.ndarray  # (M, 2) as (u, v) at the system's level
    dt: float = 0.0
    level: int = 0
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __len__(self) -> int:
        return len(self.rhs)

    def weighted(self) -> tuple[np.ndarray, np.ndarray]:
        return self.coeff * self.weights[:, None], self.rhs * self.weights

    def residual(self, x) -> np.ndarray:
        WA, WB = self.weighted()
        return WA @ np.asarray(x, dtype=float) - WB

    def normal_equations(self) -> tuple[np.ndarray, np.ndarray]:
        WA, WB = self.weighted()
        return WA.T @ WA, WA.T @ WB

    def solve(self) -> "TwistSolution":
        return solve_twist(self)


class TwistSolution(NamedTuple):
    twist: np.ndarray
    condition: float
    unobservable: np.ndarray  # (k, 6) orthonormal directions with no support

    @property
    def degenerate(self) -> bool:
        return len(self.unobservable) > 0


def solve_twist(system: FlowLinearSystem, cond_limit: float = DEGENERATE_COND) -> TwistSolution:
    """Weighted least-squares twist; unsupported directions get zero weight."""
    H, b = system.normal_equations()
    evals, evecs = np.linalg.eigh(H)
    top = evals[-1]
    if top <= 0:
        return TwistSolution(np.zeros(6), np.inf, np.eye(6))
    keep = evals > top / cond_limit
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    x = evecs @ (inv * (evecs.T @ b))
    cond = top / evals[0] if evals[0] > 0 else np.inf
    return TwistSolution(x, float(cond), evecs[:, ~keep].T)


def _check_pair(prev: DepthFrame, nxt: DepthFrame) -> float:
    if prev.depth.shape != nxt.depth.shape:
        raise ValueError("depth frames have different dimensions")
    dt = nxt.timestamp - prev.timestamp
    if not dt > 0:
        raise ValueError("frames must be strictly increasing in time")
    return dt


def _derivatives(z0: np.ndarray, z1: np.ndarray, dt: float) -> DepthDerivatives:
    valid = (z0 > 0) & (z1 > 0)
    zavg = 0.5 * (z0 + z1)
    du = np.zeros_like(zavg)
    dv = np.zeros_like(zavg)
    du[:, 1:-1] = 0.5 * (zavg[:, 2:] - zavg[:, :-2])
    dv[1:-1, :] = 0.5 * (zavg[2:, :] - zavg[:-2, :])
    stencil = valid.copy()
    stencil[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    stencil[1:-1, :] &= valid[2:, :] & valid[:-2, :]
    stencil[0, :] = stencil[-1, :] = False
    stencil[:, 0] = stencil[:, -1] = False
    zt = (z1 - z0) / dt
    for arr in (du, dv, zt):
        arr[~stencil] = 0.0
    return DepthDerivatives(du, dv, zt, zavg, stencil)


def depth_derivatives(prev: DepthFrame, nxt: DepthFrame) -> DepthDerivatives:
    """Spatial derivatives of the averaged frame and the temporal derivative.

    A pixel is valid only if every sample of its 3x1 / 1x3 stencil is valid
    in both frames.
    """
    dt = _check_pair(prev, nxt)
    return _derivatives(prev.depth, nxt.depth, dt)


def adaptive_mask(frame: DepthFrame, derivs: DepthDerivatives,
                  threshold: float | None = None,
                  kappa: float = MASK_KAPPA, kappa_abs: float = MASK_KAPPA_ABS) -> np.ndarray:
    """Pixels usable for range flow: valid stencil and no depth edge.

    The gradient threshold defaults to ``max(kappa * median|grad Z|, kappa_abs)``.
    """
    valid = derivs.valid & (frame.depth > 0)
    grad = np.hypot(derivs.du, derivs.dv)
    if threshold is None:
        med = float(np.median(grad[valid])) if valid.any() else 0.0
        threshold = max(kappa * med, kappa_abs)
    mask = valid & (grad < threshold)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def occlusion_filter(change: np.ndarray, mask: np.ndarray, kappa: float = OCCLUSION_KAPPA,
                     floor: float = OCCLUSION_ABS) -> np.ndarray:
    """Drop pixels whose depth change between the frames is an outlier.

    After warping by a good twist the remaining change is small on visible
    surfaces; large values mark occluded or disoccluded pixels.
    """
    if not mask.any():
        return mask
    mag = np.abs(change)
    limit = max(kappa * float(np.median(mag[mask])), floor)
    return mask & (mag < limit)


def compute_weight(depth, du, dv, dz_dt, dt: float) -> np.ndarray:
    """Unnormalized inverse-uncertainty weight (works elementwise on arrays)."""
    depth = np.asarray(depth, dtype=float)
    score = (WEIGHT_GRAD * (np.square(du) + np.square(dv))
             + WEIGHT_TEMPORAL * np.square(dz_dt) * dt**2
             + WEIGHT_DEPTH * np.square(depth))
    return 1.0 / (1.0 + score)


def compute_weights(depth, du, dv, dz_dt, dt: float) -> np.ndarray:
    """Per-pixel weights of one frame pair, normalized to a maximum of 1."""
    w = compute_weight(depth, du, dv, dz_dt, dt)
    if w.size == 0:
        return w
    return w / w.max()


def constraint_rows(u, v, Z, Zu, Zv, Zt, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized range-flow rows over ``[v_x, v_y, v_z, w_x, w_y, w_z]`` and rhs."""
    u, v, Z, Zu, Zv, Zt = (np.asarray(a, dtype=float) for a in (u, v, Z, Zu, Zv, Zt))
    if np.any(Z <= 0):
        raise ValueError("constraint rows need positive depth")
    z = Z
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    c = 1.0 + x * K.fx * Zu / z**2 + y * K.fy * Zv / z**2
    a = K.fx * Zu / z
    b = K.fy * Zv / z
    rows = np.stack([-a, -b, c, c * y + b * z, -c * x - a * z, a * y - b * x], axis=-1)
    return rows, -Zt


def constraint_row(pixel, Z: float, derivs, K: Intrinsics) -> tuple[np.ndarray, float]:
    """Single-pixel form of :func:`constraint_rows`; ``derivs = (Zu, Zv, Zt)``."""
    if not Z > 0:
        raise ValueError("depth must be positive")
    Zu, Zv, Zt = derivs
    row, rhs = constraint_rows(pixel[0], pixel[1], Z, Zu, Zv, Zt, K)
    return row, float(rhs)


def downsample(depth: np.ndarray) -> np.ndarray:
    """Validity-aware Gaussian blur followed by 2x decimation."""
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    valid = (depth > 0).astype(float)
    num = ndimage.convolve1d(ndimage.convolve1d(depth * valid, kernel, axis=0, mode="nearest"),
                             kernel, axis=1, mode="nearest")
    den = ndimage.convolve1d(ndimage.convolve1d(valid, kernel, axis=0, mode="nearest"),
                             kernel, axis=1, mode="nearest")
    out = np.zeros_like(depth)
    ok = den > 0.999
    out[ok] = num[ok] / den[ok]
    return out[::2, ::2]


def pyramid_levels(width: int, requested: int | None = None) -> int:
    """Number of levels such that the coarsest is at least 40 px wide."""
    levels = 1
    w = width
    while (w + 1) // 2 >= MIN_PYRAMID_WIDTH:
        w = (w + 1) // 2
        levels += 1
    if requested is not None:
        levels = max(1, min(levels, int(requested)))
    return levels


def build_pyramid(frame: DepthFrame, levels: int) -> list[DepthFrame]:
    out = [frame]
    for _ in range(levels - 1):
        f = out[-1]
        out.append(DepthFrame(f.timestamp, downsample(f.depth), f.intrinsics.downsampled()))
    return out


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    inside = (u0 >= 0) & (v0 >= 0) & (u0 + 1 < w) & (v0 + 1 < h)
    exact_u = (u == u0) & (u0 == w - 1)
    exact_v = (v == v0) & (v0 == h - 1)
    inside |= (u0 >= 0) & (v0 >= 0) & (u0 < w) & (v0 < h) & (exact_u | (u0 + 1 < w)) & (exact_v | (v0 + 1 < h))
    u0c = np.clip(u0, 0, w - 1)
    v0c = np.clip(v0, 0, h - 1)
    u1c = np.clip(u0 + 1, 0, w - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    fu = u - u0
    fv = v - v0
    z00, z01 = img[v0c, u0c], img[v0c, u1c]
    z10, z11 = img[v1c, u0c], img[v1c, u1c]
    valid = inside & (z00 > 0) & (z01 > 0) & (z10 > 0) & (z11 > 0)
    val = (1 - fv) * ((1 - fu) * z00 + fu * z01) + fv * ((1 - fu) * z10 + fu * z11)
    return np.where(valid, val, 0.0), valid


def warp_next(prev: DepthFrame, nxt: DepthFrame, twist, dt: float) -> np.ndarray:
    """Second depth image resampled on the first frame's pixel grid.

    With the camera moving by ``twist`` over ``dt``, the returned image minus
    the first one is the depth change left unexplained by that motion.
    """
    K = prev.intrinsics
    twist = np.asarray(twist, dtype=float)
    if not np.any(twist):
        return nxt.depth.copy()
    R, t = se3_exp(twist * dt)
    uu, vv = K.pixel_grid()
    z0 = prev.depth
    P = K.backproject(uu, vv, z0)
    Q = (P - t) @ R  # R^T (P - t), row-wise
    zq = Q[..., 2]
    ok = (z0 > 0) & (zq > 1e-6)
    zq_safe = np.where(ok, zq, 1.0)
    up = K.fx * Q[..., 0] / zq_safe + K.cx
    vp = K.fy * Q[..., 1] / zq_safe + K.cy
    sampled, valid = _bilinear(nxt.depth, up, vp)
    valid &= ok
    out = np.where(valid, sampled - zq + z0, 0.0)
    out[out < 0] = 0.0
    return out


def assemble(prev: DepthFrame, nxt: DepthFrame, level: int = 0, twist=None,
             mask_threshold: float | None = None) -> FlowLinearSystem:
    """Range-flow system of a frame pair at a pyramid level.

    ``twist`` is the linearization point: the second frame is warped by it
    and the returned ``rhs`` already accounts for it, so the system constrains
    the absolute twist.
    """
    dt = _check_pair(prev, nxt)
    twist = np.zeros(6) if twist is None else np.asarray(twist, dtype=float)
    if level > 0:
        prev = build_pyramid(prev, level + 1)[-1]
        nxt = build_pyramid(nxt, level + 1)[-1]
    return _assemble_level(prev, nxt, dt, twist, level, mask_threshold)


def _assemble_level(prev: DepthFrame, nxt: DepthFrame, dt: float, twist: np.ndarray,
                    level: int, mask_threshold: float | None = None,
                    occlusion: bool = False) -> FlowLinearSystem:
    K = prev.intrinsics
    z1 = warp_next(prev, nxt, twist, dt)
    derivs = _derivatives(prev.depth, z1, dt)
    avg = DepthFrame(prev.timestamp, derivs.depth * derivs.valid, K)
    mask = adaptive_mask(avg, derivs, threshold=mask_threshold)
    if occlusion:
        mask = occlusion_filter(derivs.dt * dt, mask)
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise DegenerateSystemError("no pixel passes the range-flow mask")
    Z = derivs.depth[vs, us]
    Zu, Zv, Zt = derivs.du[vs, us], derivs.dv[vs, us], derivs.dt[vs, us]
    rows, rhs = constraint_rows(us, vs, Z, Zu, Zv, Zt, K)
    weights = compute_weights(Z, Zu, Zv, Zt, dt)
    rhs = rhs + rows @ twist
    return FlowLinearSystem(rows, rhs, weights, np.column_stack([us, vs]),
                            dt=dt, level=level, twist=twist.copy())


@dataclass
class PairEstimate:
    """Visual-only twist of a frame pair and its finest-level system."""

    twist: np.ndarray
    system: FlowLinearSystem
    condition: float
    unobservable: np.ndarray

    @property
    def degenerate(self) -> bool:
        return len(self.unobservable) > 0


def estimate_pair(prev: DepthFrame, nxt: DepthFrame, levels: int | None = None,
                  iterations: int = 3, init=None, tol: float = 1e-5) -> PairEstimate:
    """Coarse-to-fine visual odometry between two depth frames.

    At every level the second frame is warped by the running estimate and
    the residual twist is solved in weighted least squares. The returned
    system is relinearized at the final estimate.
    """
    dt = _check_pair(prev, nxt)
    n_levels = pyramid_levels(prev.intrinsics.width, levels)
    pyr0 = build_pyramid(prev, n_levels)
    pyr1 = build_pyramid(nxt, n_levels)
    twist = np.zeros(6) if init is None else np.asarray(init, dtype=float).copy()
    for level in reversed(range(n_levels)):
        for _ in range(iterations):
            try:
                system = _assemble_level(pyr0[level], pyr1[level], dt, twist, level)
            except DegenerateSystemError:
                if level == 0:
                    raise
                break
            sol = solve_twist(system)
            step = sol.twist - twist
            twist = sol.twist
            if np.linalg.norm(step) < tol:
                break
    # occluded pixels only stand out once the warp explains the motion
    system = _assemble_level(pyr0[0], pyr1[0], dt, twist, 0, occlusion=True)
    sol = solve_twist(system)
    if sol.degenerate:
        log.debug("degenerate pair at t=%.3f: %d unobservable directions",
                  prev.timestamp, len(sol.unobservable))
    # keep the linearization point at the returned estimate
    system = replace(system, twist=sol.twist.copy())
    return PairEstimate(sol.twist, system, sol.condition, sol.unobservable)


def rigid_flow(points: np.ndarray, twist) -> np.ndarray:
    """Per-point velocity ``v + w x p`` induced by a rigid twist."""
    twist = np.asarray(twist, dtype=float)
    return twist[:3] + np.cross(twist[3:], np.asarray(points, dtype=float))
