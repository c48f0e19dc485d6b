"""6-DoF tracking of a semi-dense point cloud against a negated time surface.

The relative pose ``theta_rel`` is the current camera expressed in the
reference keyframe.  A reference point ``P`` lands in the current image at
``pi(T_rel^-1 P)``.  Each iteration solves for an increment ``d`` that is
applied on the reference side, ``T_rel <- T(d) @ T_rel``, i.e. the point is
first moved by ``T(d)^-1`` and then by ``T_rel^-1``.  At ``d = 0`` the
derivative of ``T(d)^-1 P`` is ``[-I | [P]x]``, which depends only on the map
point and is fixed for the life of a keyframe.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from .errors import DegenerateProblemError, ParameterError, TrackingLost
from .events import (
    DEFAULT_DELTA, DEFAULT_TAU_US, SCALE, EventCursor, EventStream, TimeSurfaceBuilder,
    TimeSurfaceMap, negate_tsm,
)
from .evaluation import Trajectory
from .geometry import PinholeCamera, PoseSE3, rodrigues_to_matrix
from .mapping import SemiDensePointCloud, should_create_keyframe

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    huber: float = 10.0
    max_iters: int = 50
    eps: float = 1e-6
    min_points: int = 50
    max_cond: float = 1e8
    lambda_init: float = 1e-2
    # relative cost-reduction tolerance; 0 leaves only the step-size test
    ftol: float = 1e-4


def huber_loss(r, k):
    a = np.abs(r)
    return np.where(a <= k, 0.5 * a * a, k * a - 0.5 * k * k)


def huber_weight(r, k):
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, k))


def compose_increment(delta, theta: PoseSE3) -> PoseSE3:
    """``T(delta) @ theta`` for a 6-vector increment ``[dt, dq]``."""
    dR = rodrigues_to_matrix(delta[3:])
    return PoseSE3.from_Rt(dR @ theta.R, dR @ theta.t + delta[:3])


def _canonical_order(cloud: SemiDensePointCloud):
    order = cloud.__dict__.get("_canonical_order")
    if order is None:
        P = cloud.points
        order = np.lexsort((P[:, 2], P[:, 1], P[:, 0], cloud.pixels[:, 0], cloud.pixels[:, 1]))
        cloud.__dict__["_canonical_order"] = order
    return order


@dataclass(eq=False)
class TrackingProblem:
    cloud: SemiDensePointCloud
    field: object
    cam_e: PinholeCamera
    theta_rel_init: PoseSE3 = field(default_factory=PoseSE3.identity)

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ParameterError("tracking problem needs a nonempty cloud")
        if tuple(self.field.sensor_size) != (self.cam_e.width, self.cam_e.height):
            raise ParameterError("potential field size does not match the event camera")
        # fixed point order makes every reduction independent of the input order
        self.points = np.ascontiguousarray(self.cloud.points[_canonical_order(self.cloud)])


@dataclass
class Linearization:
    r: np.ndarray
    J: np.ndarray | None
    valid: np.ndarray
    cost: float
    loss: np.ndarray | None = None
    Pc: np.ndarray | None = None
    uv: np.ndarray | None = None

    @property
    def n_valid(self):
        return len(self.r)

    def shared_cost(self, mask):
        """Cost restricted to the points selected by ``mask`` (all valid here)."""
        return float(self.loss[mask[self.valid]].sum())


@dataclass
class TrackingResult:
    theta_rel: PoseSE3
    final_cost: float
    iterations: int
    inlier_fraction: float
    converged: bool
    residual_rms: float
    n_valid: int = 0
    costs: list = field(default_factory=list)
    first_step_norm: float = float("nan")


def linearize(problem: TrackingProblem, theta: PoseSE3, huber: float = 10.0,
              jacobian: bool = True) -> Linearization:
    """Residuals, robust cost and (optionally) the Jacobian at ``theta``."""
    P = problem.points
    R = theta.R
    Pc = P @ R
    Pc -= theta.t @ R
    front = Pc[:, 2] > 0
    all_front = bool(front.all())
    Pf = Pc if all_front else Pc[front]
    uv, _ = problem.cam_e.project_points(Pf)
    vals, inb = problem.field.sample(uv)
    all_in = bool(inb.all())
    if all_in:
        valid = front
        r = vals
    else:
        valid = front.copy()
        valid[front] = inb
        r = vals[inb]
        Pf = Pf[inb]
        uv = uv[inb]
    loss = huber_loss(r, huber)
    n_out = len(P) - len(r)
    # excluded points are charged the loss of the field maximum so that the
    # reported cost does not drop when points leave the image
    cost = float(loss.sum()) + n_out * float(huber_loss(SCALE, huber))
    lin = Linearization(r, None, valid, cost, loss, Pf, uv)
    if jacobian:
        add_jacobian(problem, theta, lin)
    return lin


GRAD_FLOOR = 1e-9  # field units (0..255)


def add_jacobian(problem: TrackingProblem, theta: PoseSE3, lin: Linearization) -> Linearization:
    """Fill ``lin.J`` (rows: valid points; columns: ``[dt, dq]`` increment)."""
    _, Jp = problem.cam_e.project_jacobian(lin.Pc)
    _, g, _ = problem.field.sample_with_gradient(lin.uv)
    # float round-off in the field (e.g. exp of equal ages) is not signal
    g = np.where(np.abs(g) < GRAD_FLOOR, 0.0, g)
    gM = (g[:, 0:1] * Jp[:, 0, :] + g[:, 1:2] * Jp[:, 1, :]) @ theta.R.T
    J = np.empty((len(lin.r), 6))
    J[:, :3] = -gM
    J[:, 3:] = np.cross(gM, problem.points[lin.valid])
    lin.J = J
    return lin


def residuals(problem: TrackingProblem, theta_rel: PoseSE3) -> np.ndarray:
    """Field samples at the warped map points (in the problem's point order)."""
    lin = linearize(problem, theta_rel, jacobian=False)
    if lin.n_valid == 0:
        raise DegenerateProblemError("no map point projects into the current view")
    return lin.r


def solve(problem: TrackingProblem, cfg: SolverConfig | None = None) -> TrackingResult:
    """Robust Levenberg-Marquardt over forward-compositional increments."""
    cfg = cfg or SolverConfig()
    k = cfg.huber
    if len(problem.points) < cfg.min_points:
        raise TrackingLost(f"only {len(problem.points)} map points (< {cfg.min_points})")
    theta = problem.theta_rel_init
    lin = linearize(problem, theta, k)
    if lin.n_valid < cfg.min_points:
        raise TrackingLost(f"only {lin.n_valid} map points in view (< {cfg.min_points})")
    lam = cfg.lambda_init
    nu = 2.0
    costs = [lin.cost]
    converged = False
    first_step = float("nan")
    it = 0
    while it < cfg.max_iters:
        it += 1
        w = huber_weight(lin.r, k)
        JW = lin.J * w[:, None]
        H = JW.T @ lin.J
        g = JW.T @ lin.r
        if not np.any(H):
            # zero field gradient at every point: theta is stationary, step is zero
            if math.isnan(first_step):
                first_step = 0.0
            converged = True
            break
        d = np.sqrt(np.diag(H))
        if np.any(d == 0) or np.linalg.cond(H / np.outer(d, d)) > cfg.max_cond:
            raise TrackingLost("normal equations are degenerate")
        stop = False
        while True:
            A = H + lam * np.diag(np.diag(H))
            delta = np.linalg.solve(A, -g)
            step = float(np.linalg.norm(delta))
            if math.isnan(first_step):
                first_step = step
            if step < cfg.eps:
                converged = True
                stop = True
                break
            cand = compose_increment(delta, theta)
            new = linearize(problem, cand, k, jacobian=False)
            # compare on the points valid at both poses so that points crossing
            # the image border do not make the objective jump
            shared = lin.valid & new.valid
            actual = lin.shared_cost(shared) - new.shared_cost(shared)
            pred = -(delta @ g + 0.5 * delta @ H @ delta)
            tiny = pred <= cfg.ftol * lin.cost
            if actual > 0 and new.n_valid >= cfg.min_points:
                rho = actual / pred if pred > 0 else 0.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                theta, lin = cand, add_jacobian(problem, cand, new)
                costs.append(lin.cost)
                if tiny and actual <= cfg.ftol * costs[-2]:
                    converged = stop = True
                break
            if tiny:
                # the model promises nothing measurable; shrinking further won't help
                converged = stop = True
                break
            lam *= nu
            nu *= 2.0
            if not np.isfinite(lam) or lam > 1e30:
                stop = True
                break
        if stop:
            break
    r = lin.r
    return TrackingResult(
        theta_rel=theta,
        final_cost=lin.cost,
        iterations=it,
        inlier_fraction=float(np.mean(np.abs(r) <= k)) if len(r) else 0.0,
        converged=converged,
        residual_rms=float(np.sqrt(np.mean(r * r))) if len(r) else 0.0,
        n_valid=lin.n_valid,
        costs=costs,
        first_step_norm=first_step,
    )


@dataclass
class TrackerConfig:
    rate_hz: float = 100.0
    tau_us: float = DEFAULT_TAU_US
    delta: float = DEFAULT_DELTA
    window_policy: str = "sliding"
    window_min_us: int = 10_000
    window_events: int = 30_000
    bootstrap_delay_us: int = 50_000
    constant_velocity: bool = True
    trans_thresh: float = 0.05
    rot_thresh: float = math.radians(3.0)
    solver: SolverConfig = field(default_factory=SolverConfig)


class KeyframeSource(Protocol):
    def latest(self) -> SemiDensePointCloud | None: ...

    def request(self, t_us: int, pose: PoseSE3, tsm: TimeSurfaceMap) -> bool: ...


class StaticKeyframes:
    """A keyframe source that only ever serves the clouds it was given."""

    def __init__(self, cloud: SemiDensePointCloud):
        self.cloud = cloud

    def latest(self):
        return self.cloud

    def request(self, t_us, pose, tsm):
        return False


def _window_start(policy, cursor: EventCursor, t, t_prev, cfg: TrackerConfig):
    if policy == "since_last_tick":
        return None if t_prev is None else t_prev + 1
    if policy == "sliding":
        start = t - cfg.window_min_us
        nth = cursor.nth_recent_time()
        if nth is not None:
            start = min(start, nth)
        else:
            return None
        return start
    if policy == "all":
        return None
    raise ParameterError(f"unknown event window policy {policy!r}")


def track_stream(events, keyframes: KeyframeSource, cam_e: PinholeCamera,
                 cfg: TrackerConfig | None = None, diagnostics: list | None = None) -> Trajectory:
    """Track at a fixed cadence; returns world-from-camera poses.

    ``events`` is an :class:`EventStream` or an iterable of time-ordered
    chunks.  Before any keyframe exists the source is asked to bootstrap one
    at the identity pose.  A tracking loss sets ``lost_at`` on the returned
    trajectory; tracking resumes only if the source publishes a newer keyframe.
    """
    cfg = cfg or TrackerConfig()
    period = int(round(1e6 / cfg.rate_hz))
    cursor = EventCursor(events, keep=cfg.window_events if cfg.window_policy == "sliding" else 0)
    builder = TimeSurfaceBuilder(cam_e.size, cfg.tau_us, cfg.delta)
    stamps: list[int] = []
    poses: list[PoseSE3] = []
    lost_at = None
    t_first = cursor.peek_first_time()
    if t_first is None:
        return Trajectory.from_microseconds([], [])
    t = -(-(t_first + cfg.bootstrap_delay_us) // period) * period
    t_prev = None
    kf = None
    lost_kf = None
    while True:
        chunks = cursor.advance(t)
        if cursor.exhausted and cursor.t_last_seen is not None and t > cursor.t_last_seen:
            break
        for c in chunks:
            builder.add(c)
        t0 = time.perf_counter()
        tsm = builder.snapshot(t, _window_start(cfg.window_policy, cursor, t, t_prev, cfg))
        tsm_ms = (time.perf_counter() - t0) * 1e3
        row = {"t_us": t, "n_points": 0, "n_valid": 0, "iterations": 0, "inlier_fraction": "",
               "cost": "", "converged": "", "solve_ms": "", "tsm_ms": round(tsm_ms, 3),
               "keyframe": 0, "keyframe_build_ms": "", "status": ""}
        latest = keyframes.latest()
        if latest is None and not poses:
            # bootstrap: first keyframe defines the world frame
            if keyframes.request(t, PoseSE3.identity(), tsm):
                wait = getattr(keyframes, "wait_for_keyframe", None)
                latest = keyframes.latest() if wait is None else wait()
            if latest is None:
                row["status"] = "bootstrap"
            else:
                kf = latest
                stamps.append(t)
                poses.append(kf.pose_ref)
                row.update(keyframe=1, keyframe_build_ms=round(kf.build_ms, 3),
                           n_points=len(kf), status="bootstrap_keyframe")
        elif latest is not None and latest is not lost_kf:
            if latest is not kf:
                kf = latest
                lost_kf = None
                row.update(keyframe=1, keyframe_build_ms=round(kf.build_ms, 3))
            if len(poses) >= 2 and cfg.constant_velocity:
                vel = poses[-2].inverse() @ poses[-1]
                pred = poses[-1] @ vel
            else:
                pred = poses[-1] if poses else kf.pose_ref
            problem = TrackingProblem(kf, negate_tsm(tsm), cam_e, kf.pose_ref.inverse() @ pred)
            row["n_points"] = len(kf)
            t1 = time.perf_counter()
            try:
                res = solve(problem, cfg.solver)
            except (TrackingLost, DegenerateProblemError) as exc:
                row["solve_ms"] = round((time.perf_counter() - t1) * 1e3, 3)
                row["status"] = "lost"
                log.warning("tracking lost at t=%d us: %s", t, exc)
                if lost_at is None:
                    lost_at = t
                lost_kf = kf
            else:
                row.update(solve_ms=round((time.perf_counter() - t1) * 1e3, 3),
                           n_valid=res.n_valid, iterations=res.iterations,
                           inlier_fraction=round(res.inlier_fraction, 6),
                           cost=round(res.final_cost, 6), converged=int(res.converged),
                           status="ok")
                pose = kf.pose_ref @ res.theta_rel
                stamps.append(t)
                poses.append(pose)
                if should_create_keyframe(pose, kf.pose_ref, cfg.trans_thresh, cfg.rot_thresh):
                    if keyframes.request(t, pose, tsm):
                        row["status"] = "keyframe_requested"
        else:
            row["status"] = "lost"
        if diagnostics is not None:
            diagnostics.append(row)
        t_prev = t
        t += period
    traj = Trajectory.from_microseconds(stamps, poses)
    traj.lost_at = None if lost_at is None else lost_at * 1e-6
    return traj
