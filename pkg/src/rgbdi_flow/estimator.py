"""Sliding-window fusion of range-flow constraints and preintegrated IMU.

State of an N-frame window (6N + 8 parameters)::

    [v_0, w_0, ..., v_{N-1}, w_{N-1}, dg (2), b_g (3), b_a (3)]

Velocities are body-frame twists of each frame. Gravity is expressed in the
camera frame of the oldest frame and moves on the sphere through a
two-parameter retraction. Orientations of later frames relative to the
oldest one are bookkeeping: they are dead-reckoned from the bias-corrected
gyro deltas and held fixed while a Jacobian is evaluated.

Costs are written ``sum r^T Omega r`` (plus ``2 l^T r`` for the
marginalization prior); the normal equations drop the common factor 2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (
    GRAVITY_MAGNITUDE,
    GravityDir,
    gravity_boxminus,
    gravity_boxminus_jacobian,
    gravity_retract,
    so3_exp,
)
from .imu import (
    ImuBias,
    ImuNoiseParams,
    PreintegratedImu,
    residual_delta_v,
    residual_delta_v_jacobians,
    seed_gravity,
)
from .rangeflow import FlowLinearSystem

log = logging.getLogger(__name__)

FRAME_DIM = 6
GLOBAL_DIM = 8

LAMBDA_INIT = 1e-4
LAMBDA_UP = 10.0
LAMBDA_DOWN = 2.0
MAX_ESCALATIONS = 10
MAX_ITERATIONS = 50
STEP_TOL = 1e-6
SCHUR_REG = 1e-8

# camera y axis points down, so gravity seen by a level camera
DEFAULT_GRAVITY_DIR = np.array([0.0, 1.0, 0.0])


class DegenerateGeometryError(RuntimeError):
    """The normal equations stay singular even under heavy damping."""


def param_dim(n_frames: int) -> int:
    return FRAME_DIM * n_frames + GLOBAL_DIM


def v_slot(l: int) -> slice:
    return slice(FRAME_DIM * l, FRAME_DIM * l + 3)


def w_slot(l: int) -> slice:
    return slice(FRAME_DIM * l + 3, FRAME_DIM * l + 6)


def twist_slot(l: int) -> slice:
    return slice(FRAME_DIM * l, FRAME_DIM * (l + 1))


def g_slot(n: int) -> slice:
    return slice(FRAME_DIM * n, FRAME_DIM * n + 2)


def bg_slot(n: int) -> slice:
    return slice(FRAME_DIM * n + 2, FRAME_DIM * n + 5)


def ba_slot(n: int) -> slice:
    return slice(FRAME_DIM * n + 5, FRAME_DIM * n + 8)


@dataclass
class WindowState:
    times: np.ndarray
    twists: np.ndarray  # (N, 6) body-frame (v, w)
    gravity: GravityDir
    bias: ImuBias
    rotations: np.ndarray = None  # (N, 3, 3), frame l to oldest frame

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.twists = np.asarray(self.twists, dtype=float).reshape(-1, 6)
        if len(self.times) != len(self.twists):
            raise ValueError("one twist per frame time is required")
        if self.rotations is None:
            self.rotations = np.tile(np.eye(3), (len(self.times), 1, 1))

    @property
    def n_frames(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return param_dim(self.n_frames)

    def retract(self, dx) -> "WindowState":
        dx = np.asarray(dx, dtype=float)
        n = self.n_frames
        return WindowState(
            self.times.copy(),
            self.twists + dx[: FRAME_DIM * n].reshape(n, 6),
            gravity_retract(self.gravity, dx[g_slot(n)]),
            ImuBias(self.bias.gyro + dx[bg_slot(n)], self.bias.accel + dx[ba_slot(n)]),
            self.rotations.copy(),
        )

    def boxminus(self, ref: "WindowState") -> np.ndarray:
        if ref.n_frames != self.n_frames:
            raise ValueError("states have different frame counts")
        return np.concatenate([
            (self.twists - ref.twists).reshape(-1),
            gravity_boxminus(self.gravity, ref.gravity),
            self.bias.gyro - ref.bias.gyro,
            self.bias.accel - ref.bias.accel,
        ])

    def copy(self) -> "WindowState":
        return WindowState(self.times.copy(), self.twists.copy(), self.gravity,
                           self.bias, self.rotations.copy())

    def drop_oldest(self) -> "WindowState":
        return WindowState(self.times[1:].copy(), self.twists[1:].copy(), self.gravity,
                           self.bias, self.rotations[1:].copy())


@dataclass
class ResidualBlock:
    """One residual family term; cost is ``r^T Omega r + 2 l^T r``."""

    kind: str
    residual: np.ndarray
    jacobian: np.ndarray
    information: np.ndarray
    linear: np.ndarray | None = None

    def cost(self) -> float:
        r = self.residual
        c = float(r @ self.information @ r)
        if self.linear is not None:
            c += 2.0 * float(self.linear @ r)
        return c


@dataclass
class MarginalPrior:
    """Quadratic prior ``d^T H d + 2 b^T d`` with ``d = x [-] x_beta``.

    It covers the first ``x_beta.n_frames`` frames of a window plus the
    gravity and bias parameters.
    """

    H_star: np.ndarray
    b_star: np.ndarray
    x_beta: WindowState
    reference_time: float
    regularized: bool = False

    @property
    def n_frames(self) -> int:
        return self.x_beta.n_frames

    def embed(self, n_frames: int) -> np.ndarray:
        """Column indices of the prior's parameters in an ``n_frames`` window."""
        k = self.n_frames
        if n_frames < k:
            raise ValueError("window shorter than the prior")
        return np.concatenate([np.arange(FRAME_DIM * k),
                               FRAME_DIM * n_frames + np.arange(GLOBAL_DIM)])


@dataclass
class VisualFactor:
    """Least-squares equivalent of a pair's range-flow system.

    ``|W A x - W B|^2 = |R x - y|^2 + rest`` for the upper-triangular
    ``R`` of a QR factorization, so six rows carry all the information.
    """

    R: np.ndarray
    y: np.ndarray
    rest: float
    twist: np.ndarray

    @classmethod
    def from_system(cls, system: FlowLinearSystem) -> "VisualFactor":
        WA, WB = system.weighted()
        if len(WB) < 6:
            Rm = np.zeros((6, 6))
            Rm[: len(WB)] = WA
            y = np.zeros(6)
            y[: len(WB)] = WB
            return cls(Rm, y, 0.0, system.twist.copy())
        Q, R = np.linalg.qr(np.column_stack([WA, WB]), mode="reduced")
        return cls(R[:6, :6], R[:6, 6], float(R[6, 6] ** 2) if R.shape[0] > 6 else 0.0,
                   system.twist.copy())


@dataclass
class WindowProblem:
    """Everything needed to evaluate the window cost apart from the state.

    Lists are indexed by pair (``visual``, ``preints``) or by frame
    (``gyro``); ``None`` marks a missing measurement.
    """

    visual: list[VisualFactor | FlowLinearSystem | None] = field(default_factory=list)
    preints: list[PreintegratedImu | None] = field(default_factory=list)
    gyro: list[np.ndarray | None] = field(default_factory=list)
    noise: ImuNoiseParams | None = None
    visual_sigma: float = 1.0
    bias_prior: ImuBias | None = None
    prior: MarginalPrior | None = None


def _pair_columns(J_pair: np.ndarray, pair: int, n_frames: int) -> np.ndarray:
    # the pair constrains the mean twist of its two frames
    J = np.zeros((J_pair.shape[0], param_dim(n_frames)))
    J[:, twist_slot(pair)] = 0.5 * J_pair
    J[:, twist_slot(pair + 1)] = 0.5 * J_pair
    return J


def build_visual_block(system: FlowLinearSystem | VisualFactor, pair: int,
                       state: WindowState, sigma: float = 1.0) -> ResidualBlock | None:
    """Range-flow residual of frame pair ``(pair, pair + 1)``.

    The pair's twist is taken as the mean of the two frame twists. The
    per-pixel weights are already applied; ``sigma`` is the remaining noise
    level of a weighted row (cm/s), so the information is ``I / sigma^2``.
    """
    if pair < 0 or pair + 1 >= state.n_frames:
        raise IndexError(f"pair {pair} outside a {state.n_frames}-frame window")
    x = 0.5 * (state.twists[pair] + state.twists[pair + 1])
    if isinstance(system, VisualFactor):
        A, B = system.R, system.y
    else:
        if len(system) == 0:
            log.warning("empty range-flow system for pair %d; block omitted", pair)
            return None
        A, B = system.weighted()
    r = A @ x - B
    return ResidualBlock("visual", r, _pair_columns(A, pair, state.n_frames),
                         np.eye(len(r)) / sigma**2)


def delta_v_block(preint: PreintegratedImu, pair: int, state: WindowState) -> ResidualBlock:
    """Preintegrated velocity residual between frames ``pair`` and ``pair + 1``."""
    n = state.n_frames
    i, j = pair, pair + 1
    Ri, Rj = state.rotations[i], state.rotations[j]
    vi, vj = state.twists[i, :3], state.twists[j, :3]
    r = residual_delta_v(Ri @ vi, Rj @ vj, Ri, state.gravity, preint, state.bias)
    jac = residual_delta_v_jacobians(Ri, state.gravity, preint)
    J = np.zeros((3, param_dim(n)))
    J[:, v_slot(i)] = jac["v_i"] @ Ri
    J[:, v_slot(j)] = jac["v_j"] @ Rj
    J[:, g_slot(n)] = jac["g"]
    J[:, bg_slot(n)] = jac["bg"]
    J[:, ba_slot(n)] = jac["ba"]
    return ResidualBlock("delta_v", r, J, np.linalg.inv(preint.cov_dv))


def angular_velocity_block(gyro, frame: int, state: WindowState,
                           noise: ImuNoiseParams) -> ResidualBlock:
    """Frame angular velocity against the bias-corrected gyro reading."""
    n = state.n_frames
    r = state.twists[frame, 3:] - (np.asarray(gyro, dtype=float) - state.bias.gyro)
    J = np.zeros((3, param_dim(n)))
    J[:, w_slot(frame)] = np.eye(3)
    J[:, bg_slot(n)] = np.eye(3)
    return ResidualBlock("ang_vel", r, J, np.linalg.inv(noise.sigma_omega))


def bias_blocks(bias_prior: ImuBias, state: WindowState,
                noise: ImuNoiseParams) -> list[ResidualBlock]:
    """Penalties on moving the biases away from their initial seed."""
    n = state.n_frames
    Jg = np.zeros((3, param_dim(n)))
    Jg[:, bg_slot(n)] = -np.eye(3)
    Ja = np.zeros((3, param_dim(n)))
    Ja[:, ba_slot(n)] = -np.eye(3)
    return [
        ResidualBlock("bias_g", bias_prior.gyro - state.bias.gyro, Jg,
                      np.linalg.inv(noise.sigma_omega)),
        ResidualBlock("bias_a", bias_prior.accel - state.bias.accel, Ja,
                      np.linalg.inv(noise.sigma_accel)),
    ]


def build_inertial_blocks(state: WindowState, preints, gyro, noise: ImuNoiseParams,
                          bias_prior: ImuBias | None = None) -> list[ResidualBlock]:
    """Velocity-increment, angular-velocity and bias residuals of a window.

    Pairs without a preintegration and frames without a gyro reading simply
    contribute no inertial term.
    """
    blocks = []
    for p, pre in enumerate(preints):
        if pre is not None:
            blocks.append(delta_v_block(pre, p, state))
    for l, w in enumerate(gyro):
        if w is not None:
            blocks.append(angular_velocity_block(w, l, state, noise))
    if bias_prior is not None:
        blocks.extend(bias_blocks(bias_prior, state, noise))
    return blocks


def _prior_delta(prior: MarginalPrior, state: WindowState) -> tuple[np.ndarray, np.ndarray]:
    k, n = prior.n_frames, state.n_frames
    xb = prior.x_beta
    d = np.concatenate([
        (state.twists[:k] - xb.twists).reshape(-1),
        gravity_boxminus(state.gravity, xb.gravity),
        state.bias.gyro - xb.bias.gyro,
        state.bias.accel - xb.bias.accel,
    ])
    J = np.zeros((len(d), param_dim(n)))
    cols = prior.embed(n)
    J[:, cols] = np.eye(len(d))
    gk = slice(FRAME_DIM * k, FRAME_DIM * k + 2)
    J[gk, g_slot(n)] = gravity_boxminus_jacobian(state.gravity, xb.gravity)
    return d, J


def prior_block(prior: MarginalPrior, state: WindowState) -> ResidualBlock:
    d, J = _prior_delta(prior, state)
    return ResidualBlock("prior", d, J, prior.H_star, prior.b_star)


def prior_cost(prior: MarginalPrior, state: WindowState) -> float:
    return prior_block(prior, state).cost()


def dead_reckon(state: WindowState, preints) -> np.ndarray:
    """Orientations of every frame relative to the oldest one.

    Pairs with a preintegration use its bias-corrected rotation; others
    integrate the mean of the two frames' angular velocities.
    """
    n = state.n_frames
    R = np.empty((n, 3, 3))
    R[0] = np.eye(3)
    for p in range(n - 1):
        pre = preints[p] if p < len(preints) else None
        if pre is not None:
            dR = pre.corrected_R(state.bias.gyro)
        else:
            dt = state.times[p + 1] - state.times[p]
            dR = so3_exp(0.5 * (state.twists[p, 3:] + state.twists[p + 1, 3:]) * dt)
        R[p + 1] = R[p] @ dR
    return R


def refresh(state: WindowState, problem: WindowProblem) -> WindowState:
    state.rotations = dead_reckon(state, problem.preints)
    return state


def linearize(state: WindowState, problem: WindowProblem,
              touching_oldest: bool = False) -> list[ResidualBlock]:
    """Residual blocks at ``state``.

    With ``touching_oldest`` only the terms involving frame 0 are returned.
    """
    blocks: list[ResidualBlock] = []
    pairs = range(1) if touching_oldest else range(len(problem.visual))
    for p in pairs:
        if p < len(problem.visual) and problem.visual[p] is not None:
            b = build_visual_block(problem.visual[p], p, state, problem.visual_sigma)
            if b is not None:
                blocks.append(b)
        if p < len(problem.preints) and problem.preints[p] is not None:
            blocks.append(delta_v_block(problem.preints[p], p, state))
    frames = range(1) if touching_oldest else range(len(problem.gyro))
    for l in frames:
        if l < len(problem.gyro) and problem.gyro[l] is not None and problem.noise is not None:
            blocks.append(angular_velocity_block(problem.gyro[l], l, state, problem.noise))
    if not touching_oldest and problem.bias_prior is not None and problem.noise is not None:
        blocks.extend(bias_blocks(problem.bias_prior, state, problem.noise))
    if problem.prior is not None:
        blocks.append(prior_block(problem.prior, state))
    return blocks


def normal_equations(blocks, dim: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Gauss-Newton information ``H``, half-gradient ``g`` and cost."""
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    cost = 0.0
    for b in blocks:
        JtO = b.jacobian.T @ b.information
        H += JtO @ b.jacobian
        rhs = b.information @ b.residual
        if b.linear is not None:
            rhs = rhs + b.linear
        g += b.jacobian.T @ rhs
        cost += b.cost()
    return 0.5 * (H + H.T), g, cost


def total_cost(state: WindowState, problem: WindowProblem) -> float:
    return sum(b.cost() for b in linearize(state, problem))


@dataclass
class SolveResult:
    state: WindowState
    cost: float
    iterations: int
    converged: bool
    history: list[tuple[float, float]]  # accepted (cost, |g|) pairs


def solve(state: WindowState, problem: WindowProblem, max_iterations: int = MAX_ITERATIONS,
          step_tol: float = STEP_TOL, lambda_init: float = LAMBDA_INIT) -> SolveResult:
    """Levenberg-Marquardt minimization of the window cost."""
    if not any(v is not None for v in problem.visual):
        raise ValueError("at least one visual term is required")
    x = refresh(state.copy(), problem)
    blocks = linearize(x, problem)
    H, g, cost = normal_equations(blocks, x.dim)
    history = [(cost, float(np.linalg.norm(x.gravity.vector)))]
    lam = lambda_init
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        diag = np.diag(H).copy()
        floor = 1e-9 * max(float(diag.max()), 1e-12)
        damp = np.maximum(diag, floor)
        step = None
        for _ in range(MAX_ESCALATIONS + 1):
            try:
                L = np.linalg.cholesky(H + lam * np.diag(damp))
            except np.linalg.LinAlgError:
                lam *= LAMBDA_UP
                continue
            dx = -np.linalg.solve(L.T, np.linalg.solve(L, g))
            x_new = refresh(x.retract(dx), problem)
            new_cost = total_cost(x_new, problem)
            if np.isfinite(new_cost) and new_cost <= cost:
                step = dx
                break
            if np.linalg.norm(dx) < step_tol:
                # no decrease is measurable at this step size
                converged = True
                break
            lam *= LAMBDA_UP
        else:
            raise DegenerateGeometryError(
                "normal equations remain singular or non-descending after "
                f"{MAX_ESCALATIONS} damping escalations"
            )
        if step is None:
            break
        x = x_new
        lam = max(lam / LAMBDA_DOWN, 1e-12)
        blocks = linearize(x, problem)
        H, g, cost = normal_equations(blocks, x.dim)
        history.append((cost, float(np.linalg.norm(x.gravity.vector))))
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
    return SolveResult(x, cost, it, converged, history)


def schur_complement(H: np.ndarray, g: np.ndarray, n_alpha: int,
                     reg: float = SCHUR_REG) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eliminate the first ``n_alpha`` variables of ``d^T H d + 2 g^T d``.

    Returns ``(H_star, b_star, regularized)``; a singular ``H_aa`` is
    regularized with ``reg * I``.
    """
    Haa = H[:n_alpha, :n_alpha]
    Hab = H[:n_alpha, n_alpha:]
    Hbb = H[n_alpha:, n_alpha:]
    regularized = False
    try:
        L = np.linalg.cholesky(Haa)
        if np.min(np.diag(L)) ** 2 < reg * max(1.0, float(np.max(np.diag(Haa)))) * 1e-6:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        regularized = True
        L = np.linalg.cholesky(Haa + reg * np.eye(n_alpha))
    X = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Hab, g[:n_alpha]])))
    H_star = Hbb - Hab.T @ X[:, :-1]
    b_star = g[n_alpha:] - Hab.T @ X[:, -1]
    return 0.5 * (H_star + H_star.T), b_star, regularized


def marginalize_oldest(state: WindowState, problem: WindowProblem
                       ) -> tuple[WindowState, MarginalPrior]:
    """Fold the oldest frame's twist into a prior on the remaining parameters.

    Only the terms touching that twist are linearized; the others stay in
    the problem. Gravity is still expressed in the old reference frame.
    """
    if state.n_frames < 2:
        raise ValueError("need at least two frames to marginalize")
    blocks = linearize(state, problem, touching_oldest=True)
    H, g, _ = normal_equations(blocks, state.dim)
    H_star, b_star, reg = schur_complement(H, g, FRAME_DIM)
    if reg:
        log.warning("oldest-frame information singular; regularized the Schur complement")
    kept = state.drop_oldest()
    prior = MarginalPrior(H_star, b_star, kept.copy(), float(kept.times[0]), reg)
    return kept, prior


def slide_reference(state: WindowState, prior: MarginalPrior | None,
                    R_new: np.ndarray) -> tuple[WindowState, MarginalPrior | None]:
    """Re-express gravity in a new reference frame.

    ``R_new`` is the orientation of the new reference frame in the old one.
    Twists are body-frame quantities and do not change; only gravity and the
    prior's gravity coordinates rotate.
    """
    R_new = np.asarray(R_new, dtype=float)
    out = state.copy()
    out.gravity = state.gravity.rotated(R_new.T)
    out.rotations = np.einsum("ji,njk->nik", R_new, state.rotations)
    if prior is None:
        return out, None
    xb = prior.x_beta.copy()
    g_old = xb.gravity
    xb.gravity = g_old.rotated(R_new.T)
    xb.rotations = np.einsum("ji,njk->nik", R_new, xb.rotations)
    T = xb.gravity.basis.T @ R_new.T @ g_old.basis
    k = prior.n_frames
    Q = np.eye(len(prior.b_star))
    gk = slice(FRAME_DIM * k, FRAME_DIM * k + 2)
    Q[gk, gk] = T
    H = Q @ prior.H_star @ Q.T
    return out, replace(prior, H_star=0.5 * (H + H.T), b_star=Q @ prior.b_star, x_beta=xb)


def initial_twists(pair_twists) -> np.ndarray:
    """Per-frame twists from pair twists: mean of the adjacent pairs."""
    pair_twists = np.asarray(pair_twists, dtype=float).reshape(-1, 6)
    m = len(pair_twists)
    out = np.empty((m + 1, 6))
    out[0] = pair_twists[0]
    out[-1] = pair_twists[-1]
    for l in range(1, m):
        out[l] = 0.5 * (pair_twists[l - 1] + pair_twists[l])
    return out


def seed_state(times, twists, problem: WindowProblem, gravity: GravityDir | None = None,
               bias: ImuBias | None = None) -> WindowState:
    """Initial state: visual twists, gyro bias from the gyro readings, gravity
    from the velocity increments. Given ``gravity`` or ``bias`` are kept."""
    twists = np.asarray(twists, dtype=float)
    if bias is None:
        diffs = [w - twists[l, 3:] for l, w in enumerate(problem.gyro) if w is not None]
        bg = np.mean(diffs, axis=0) if diffs else np.zeros(3)
        bias = ImuBias(bg, np.zeros(3))
    state = WindowState(times, twists, GravityDir(DEFAULT_GRAVITY_DIR), bias)
    refresh(state, problem)
    if gravity is None:
        seeds = []
        for p, pre in enumerate(problem.preints):
            if pre is None:
                continue
            Ri, Rj = state.rotations[p], state.rotations[p + 1]
            corrected = replace(pre, delta_v=pre.corrected_v(bias))
            seeds.append(seed_gravity(Ri @ twists[p, :3], Rj @ twists[p + 1, :3], Ri, corrected))
        if seeds and np.linalg.norm(np.mean(seeds, axis=0)) > 0:
            gravity = GravityDir(np.mean(seeds, axis=0))
        else:
            gravity = GravityDir(DEFAULT_GRAVITY_DIR)
    state.gravity = GravityDir(gravity.direction, GRAVITY_MAGNITUDE)
    return state


class SlidingWindowEstimator:
    """Frame-by-frame window manager.

    Frames arrive with the range-flow system linking them to the previous
    frame, an optional preintegration over the same interval and an
    optional gyro reading at the frame time. When the window is full the
    oldest frame is either marginalized into a prior or simply dropped.
    """

    def __init__(self, n_max: int, noise: ImuNoiseParams | None = None,
                 marginalize: bool = False, visual_sigma: float = 1.0):
        if n_max < 2:
            raise ValueError("window must hold at least two frames")
        self.n_max = n_max
        self.marginalize = marginalize
        if not visual_sigma > 0:
            raise ValueError("visual_sigma must be positive")
        self.problem = WindowProblem(noise=noise, visual_sigma=visual_sigma)
        self.times: list[float] = []
        self.state: WindowState | None = None
        self._pending: list[np.ndarray] = []  # twists of frames not yet solved
        self.gravity: GravityDir | None = None
        self.bias: ImuBias | None = None
        self.last_result: SolveResult | None = None

    @property
    def n_frames(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return param_dim(self.n_frames)

    def add_frame(self, t: float, visual: FlowLinearSystem | None = None,
                  preint: PreintegratedImu | None = None, gyro=None) -> None:
        if self.times and not t > self.times[-1]:
            raise ValueError(f"frame at t={t} does not follow t={self.times[-1]}")
        if self.times and visual is None:
            raise ValueError("every frame after the first needs a range-flow system")
        if (preint is not None or gyro is not None) and self.problem.noise is None:
            raise ValueError("inertial terms need IMU noise parameters")
        if self.n_frames == self.n_max:
            self._drop_oldest()
        if self.times:
            factor = visual if isinstance(visual, VisualFactor) else VisualFactor.from_system(visual)
            self.problem.visual.append(factor)
            self.problem.preints.append(preint)
        self.problem.gyro.append(None if gyro is None else np.asarray(gyro, dtype=float))
        self.times.append(float(t))

    def _drop_oldest(self) -> None:
        state = self._current_state()
        R1 = dead_reckon(state, self.problem.preints)[1]
        prior = None
        if self.marginalize:
            state, prior = marginalize_oldest(state, self.problem)
        else:
            state = state.drop_oldest()
        state, prior = slide_reference(state, prior, R1)
        self.problem.visual.pop(0)
        self.problem.preints.pop(0)
        self.problem.gyro.pop(0)
        self.problem.prior = prior
        self.times.pop(0)
        self.state = state
        self.gravity = state.gravity
        self.bias = state.bias

    def _current_state(self) -> WindowState:
        pair_twists = [f.twist for f in self.problem.visual]
        init = initial_twists(pair_twists)
        if self.state is not None:
            k = self.state.n_frames
            init[:k] = self.state.twists[: len(init)]
            # newly appended frames start from their pair estimate
            for l in range(k, len(init)):
                init[l] = pair_twists[l - 1]
        state = seed_state(self.times, init, self.problem, self.gravity, self.bias)
        if self.problem.bias_prior is None and self.problem.noise is not None:
            self.problem.bias_prior = state.bias
        return state

    def solve(self) -> SolveResult:
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        state = self._current_state()
        result = solve(state, self.problem)
        self.state = result.state
        self.gravity = result.state.gravity
        self.bias = result.state.bias
        self.last_result = result
        return result
