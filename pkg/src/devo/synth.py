"""Synthetic depth-event scenes with known ground truth.

Events come from a geometric model: edge points are sampled densely in 3D,
and a point fires whenever its projection has travelled one pixel since its
previous event.  Depth frames are ray-cast z-depths of textured planes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream
from .evaluation import Trajectory
from .geometry import ExtrinsicCalib, PinholeCamera, PoseSE3, rodrigues_to_matrix
from .mapping import DepthFrame, _pixel_rays


@dataclass
class Plane:
    """Finite rectangle: ``center + a*axis_u + b*axis_v`` with ``|a|<=half_u, |b|<=half_v``."""

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.axis_u, dtype=np.float64)
        u = u - (u @ self.normal) * self.normal
        self.axis_u = u / np.linalg.norm(u)

    @property
    def axis_v(self):
        return np.cross(self.normal, self.axis_u)

    def point(self, a, b):
        return self.center + np.multiply.outer(a, self.axis_u) + np.multiply.outer(b, self.axis_v)

    def ray_hits(self, origin, dirs):
        """Ray parameter ``s`` of the hit for rays ``origin + s*dir`` (inf on miss)."""
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.center - origin) @ self.normal) / denom
        hit = origin + s[:, None] * dirs
        rel = hit - self.center
        inside = ((np.abs(rel @ self.axis_u) <= self.half_u + 1e-9)
                  & (np.abs(rel @ self.axis_v) <= self.half_v + 1e-9))
        ok = np.isfinite(s) & (s > 0) & inside
        return np.where(ok, s, np.inf)


@dataclass
class LineSegment:
    p0: np.ndarray
    p1: np.ndarray

    def sample(self, spacing):
        p0 = np.asarray(self.p0, dtype=np.float64)
        p1 = np.asarray(self.p1, dtype=np.float64)
        n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / spacing)) + 1)
        s = np.linspace(0.0, 1.0, n)
        return p0 + np.multiply.outer(s, p1 - p0)


@dataclass
class Circle:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def sample(self, spacing):
        c = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        k = max(8, int(math.ceil(2 * math.pi * self.radius / spacing)))
        ang = np.linspace(0.0, 2 * math.pi, k, endpoint=False)
        return c + self.radius * (np.multiply.outer(np.cos(ang), a) + np.multiply.outer(np.sin(ang), b))


@dataclass
class ConstantVelocityTrajectory:
    """World-from-camera pose with constant linear and angular velocity.

    ``p(t) = p0 + v t``, ``R(t) = R0 @ Exp(w t)`` with ``w`` in the body frame.
    Time is in seconds.
    """

    p0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def pose(self, t) -> PoseSE3:
        R = rodrigues_to_matrix(self.q0) @ rodrigues_to_matrix(np.asarray(self.w) * t)
        return PoseSE3.from_Rt(R, np.asarray(self.p0) + np.asarray(self.v) * t)


@dataclass
class NoiseConfig:
    bg_rate: float = 0.0
    jitter_px: float = 0.0
    seed: int = 0


@dataclass
class SyntheticScene:
    edges: list
    planes: list
    trajectory: ConstantVelocityTrajectory
    cam_e: PinholeCamera
    cam_d: PinholeCamera
    calib: ExtrinsicCalib
    edge_spacing: float = 0.002

    def edge_points(self) -> np.ndarray:
        pts = [e.sample(self.edge_spacing) for e in self.edges]
        return np.concatenate(pts) if pts else np.zeros((0, 3))

    def nearest_surface(self, origin, dirs) -> np.ndarray:
        s = np.full(len(dirs), np.inf)
        for plane in self.planes:
            s = np.minimum(s, plane.ray_hits(origin, dirs))
        return s


def _project_edges(scene: SyntheticScene, pose: PoseSE3, pts_w: np.ndarray):
    P_c = (pts_w - pose.t) @ pose.R
    uv, front = scene.cam_e.project_points(P_c)
    front &= (P_c[:, 2] >= 0.3) & (P_c[:, 2] <= 15.0)
    return uv, front


def _unoccluded(scene: SyntheticScene, pose: PoseSE3, pts_w: np.ndarray, tol: float = 1e-6):
    vis = np.ones(len(pts_w), dtype=bool)
    if scene.planes:
        s = scene.nearest_surface(pose.t, pts_w - pose.t)
        vis = s >= 1.0 - tol
    return vis


def render_events(scene: SyntheticScene, t0_us: int, t1_us: int, noise: NoiseConfig | None = None,
                  step_us: int = 1000, occlusion_every: int = 10,
                  events_per_crossing: int = 1) -> EventStream:
    """Geometric edge-crossing events plus optional background noise.

    Each one-pixel crossing emits ``events_per_crossing`` events at the same
    time and sub-pixel location (before jitter), mimicking a sensor whose
    contrast threshold is crossed several times by a strong edge.
    """
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(noise.seed)
    W, H = scene.cam_e.size
    pts = scene.edge_points()
    n = len(pts)
    polarity = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    out_t, out_uv, out_p = [], [], []
    if n:
        traj = scene.trajectory
        anchor, _ = _project_edges(scene, traj.pose(t0_us * 1e-6), pts)
        prev_uv = anchor.copy()
        prev_d = np.zeros(n)
        t_prev = t0_us
        t = t0_us
        k = 0
        while t < t1_us:
            t = min(t + step_us, t1_us)
            pose = traj.pose(t * 1e-6)
            uv, vis = _project_edges(scene, pose, pts)
            # occlusion changes slowly; refresh it on a coarser cadence
            if k % occlusion_every == 0:
                unocc = _unoccluded(scene, pose, pts)
            k += 1
            vis &= unocc
            d = np.hypot(uv[:, 0] - anchor[:, 0], uv[:, 1] - anchor[:, 1])
            fire = np.flatnonzero(d >= 1.0)
            if len(fire):
                frac = (1.0 - prev_d[fire]) / np.maximum(d[fire] - prev_d[fire], 1e-12)
                frac = np.clip(frac, 0.0, 1.0)
                pos = prev_uv[fire] + frac[:, None] * (uv[fire] - prev_uv[fire])
                anchor[fire] = pos
                emit = vis[fire]
                tc = np.rint(t_prev + frac * (t - t_prev)).astype(np.int64)
                out_t.append(tc[emit])
                out_uv.append(pos[emit])
                out_p.append(polarity[fire][emit])
                d[fire] = np.hypot(uv[fire, 0] - pos[:, 0], uv[fire, 1] - pos[:, 1])
            prev_uv = uv
            prev_d = d
            t_prev = t
    if out_t:
        ts = np.concatenate(out_t)
        uv = np.concatenate(out_uv)
        ps = np.concatenate(out_p)
    else:
        ts, uv, ps = np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0, np.int8)
    if events_per_crossing > 1:
        ts = np.repeat(ts, events_per_crossing)
        uv = np.repeat(uv, events_per_crossing, axis=0)
        ps = np.repeat(ps, events_per_crossing)
    if noise.jitter_px > 0 and len(ts):
        uv = uv + rng.normal(0.0, noise.jitter_px, size=uv.shape)
    xs = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    ys = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    keep = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    ts, xs, ys, ps = ts[keep], xs[keep], ys[keep], ps[keep]
    if noise.bg_rate > 0:
        lam = noise.bg_rate * W * H * (t1_us - t0_us) * 1e-6
        k = int(rng.poisson(lam))
        ts = np.concatenate([ts, rng.integers(t0_us, t1_us + 1, size=k)])
        xs = np.concatenate([xs, rng.integers(0, W, size=k)])
        ys = np.concatenate([ys, rng.integers(0, H, size=k)])
        ps = np.concatenate([ps, np.where(rng.random(k) < 0.5, 1, -1).astype(np.int8)])
    order = np.argsort(ts, kind="stable")
    return EventStream(ts[order], xs[order], ys[order], ps[order], (W, H), validate=False)


def render_depth(scene: SyntheticScene, t_us: int) -> DepthFrame:
    """Nearest-surface z-depth in the depth camera (0 where no surface is hit)."""
    cam = scene.cam_d
    pose_d = scene.trajectory.pose(t_us * 1e-6) @ scene.calib.T_ed
    rays = _pixel_rays(cam)
    dirs = rays @ pose_d.R.T
    s = scene.nearest_surface(pose_d.t, dirs)
    # rays have unit z in the camera frame, so the ray parameter is the z-depth
    depth = np.where(np.isfinite(s), s, 0.0).reshape(cam.height, cam.width)
    return DepthFrame(depth, int(t_us), cam, min_depth=0.0, max_depth=np.inf)


def distance_field(uv_points, sensor_size, sigma: float = 2.0, scale: float = 255.0) -> np.ndarray:
    """Grid field ``scale * (1 - exp(-d^2 / 2 sigma^2))`` of the distance to ``uv_points``."""
    from scipy.spatial import cKDTree

    W, H = sensor_size
    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    tree = cKDTree(np.asarray(uv_points, dtype=np.float64))
    d, _ = tree.query(np.stack([xs.ravel(), ys.ravel()], axis=1), k=1)
    return (scale * (1.0 - np.exp(-0.5 * (d / sigma) ** 2))).reshape(H, W)


# default scenario ---------------------------------------------------------

def default_cameras():
    cam_e = PinholeCamera(400.0, 400.0, 319.5, 239.5, 640, 480)
    cam_d = PinholeCamera(210.0, 210.0, 159.5, 143.5, 320, 288)
    T_ed = PoseSE3([-0.04, 0.01, 0.005], [0.01, -0.02, 0.005])
    return cam_e, cam_d, ExtrinsicCalib(T_ed)


def _plane_frame(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.cross(n, [0.0, 1.0, 0.0] if abs(n[1]) < 0.9 else [1.0, 0.0, 0.0])
    return n, a / np.linalg.norm(a)


def _panel(center, half_u, half_v, yaw_deg=0.0, pitch_deg=0.0):
    """Camera-facing rectangle, optionally turned about the vertical and horizontal axes."""
    R = rodrigues_to_matrix([0.0, math.radians(yaw_deg), 0.0]) @ rodrigues_to_matrix(
        [math.radians(pitch_deg), 0.0, 0.0])
    return Plane(center, R @ [0.0, 0.0, -1.0], R @ [1.0, 0.0, 0.0], half_u, half_v)


def _outline(plane: Plane):
    hu, hv = plane.half_u, plane.half_v
    quad = [plane.point(-hu, -hv), plane.point(hu, -hv), plane.point(hu, hv), plane.point(-hu, hv)]
    return [LineSegment(quad[i], quad[(i + 1) % 4]) for i in range(4)]


def default_scene(seed: int = 0, edge_spacing: float = 0.0012,
                  velocity=(0.10, -0.03, 0.08), angular=(0.02, -0.05, 0.03)) -> SyntheticScene:
    """Desk-scale room: a textured back wall over a floor, with panels at 1-2.5 m."""
    rng = np.random.default_rng(seed)
    cam_e, cam_d, calib = default_cameras()
    wall = Plane([0.0, 0.0, 3.2], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], 5.0, 3.5)
    floor = Plane([0.0, 0.9, 2.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], 5.0, 1.8)
    panels = [
        _panel([0.55, -0.15, 1.5], 0.25, 0.20, yaw_deg=25.0, pitch_deg=-10.0),
        _panel([-0.55, 0.10, 1.2], 0.20, 0.25, yaw_deg=-20.0),
        _panel([0.05, 0.45, 2.0], 0.30, 0.15, pitch_deg=30.0),
        _panel([-0.35, -0.55, 2.4], 0.25, 0.18, yaw_deg=10.0, pitch_deg=15.0),
    ]
    edges = []
    for _ in range(6):
        c = np.array([rng.uniform(-2.2, 2.2), rng.uniform(-1.7, 0.7), 0.0])
        ang = rng.uniform(0, math.pi)
        half = rng.uniform(0.15, 0.5)
        d = np.array([math.cos(ang), math.sin(ang), 0.0]) * half
        edges.append(LineSegment(wall.center + c - d, wall.center + c + d))
    for _ in range(2):
        c = np.array([rng.uniform(-2.2, 2.2), rng.uniform(-1.7, 0.7), 0.0])
        edges.append(Circle(wall.center + c, wall.normal, rng.uniform(0.08, 0.25)))
    for panel in panels:
        edges.extend(_outline(panel))
        a = rng.uniform(-0.6, 0.6, size=2)
        edges.append(LineSegment(panel.point(-panel.half_u * 0.8, a[0] * panel.half_v),
                                 panel.point(panel.half_u * 0.8, a[1] * panel.half_v)))
    for x in (-0.6, 0.6):
        edges.append(LineSegment(floor.point(x, -0.6), floor.point(x, 1.2)))
    for z in (0.3,):
        edges.append(LineSegment(floor.point(-1.8, z), floor.point(1.8, z)))
    traj = ConstantVelocityTrajectory(v=np.array(velocity, dtype=float),
                                      w=np.array(angular, dtype=float))
    return SyntheticScene(edges, [wall, floor, *panels], traj, cam_e, cam_d, calib, edge_spacing)


def groundtruth(scene: SyntheticScene, t0_us: int, t1_us: int, rate_hz: float = 200.0) -> Trajectory:
    step = int(round(1e6 / rate_hz))
    stamps = np.arange(t0_us, t1_us + 1, step, dtype=np.int64)
    return Trajectory.from_microseconds(stamps, [scene.trajectory.pose(t * 1e-6) for t in stamps])


def depth_timestamps(t0_us, t1_us, rate_hz, offset_us=50_000):
    step = 1e6 / rate_hz
    n = int(math.floor((t1_us - t0_us - offset_us) / step)) + 1
    return [int(round(t0_us + offset_us + k * step)) for k in range(max(n, 0))]


def write_dataset(root, scene: SyntheticScene, duration_s: float = 5.0, depth_rate: float = 30.0,
                  noise: NoiseConfig | None = None, gt_rate: float = 200.0, step_us: int = 1000,
                  events_per_crossing: int = 1):
    """Render a full dataset directory readable by :func:`devo.io.load_dataset`."""
    from . import io

    root = io.ensure_dir(root)
    t1 = int(round(duration_s * 1e6))
    events = render_events(scene, 0, t1, noise, step_us=step_us,
                           events_per_crossing=events_per_crossing)
    io.write_events(root / "events.txt", events)
    depth_dir = io.ensure_dir(root / "depth")
    entries = []
    for t in depth_timestamps(0, t1, depth_rate):
        name = f"depth/{t:010d}.pgm"
        io.write_pgm16(root / name, io.depth_to_mm(render_depth(scene, t).values))
        entries.append((t, name))
    io.write_depth_index(root / "depth.txt", entries)
    io.write_calibration(root / "calibration.json", scene.cam_e, scene.cam_d, scene.calib)
    io.write_trajectory(root / "groundtruth.txt", groundtruth(scene, 0, t1, gt_rate))
    io.write_manifest(root, groundtruth="groundtruth.txt")
    return Path(root), len(events)
