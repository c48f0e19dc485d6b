"""Semi-dense reference point clouds from a thresholded time surface and a depth frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .events import TimeSurfaceMap, threshold_mask
from .geometry import ExtrinsicCalib, PinholeCamera, PoseSE3
from .errors import ParameterError


@dataclass
class MappingConfig:
    radius: float = 1.5
    cluster_gap: float = 0.3
    trans_thresh: float = 0.05
    rot_thresh: float = math.radians(3.0)
    max_depth_skew_us: int = 20_000
    min_depth: float = 0.1
    max_depth: float = 20.0


@dataclass(eq=False)
class DepthFrame:
    """Z-depth image in meters; 0 marks an invalid pixel."""

    values: np.ndarray
    timestamp: int
    camera: PinholeCamera
    min_depth: float = 0.1
    max_depth: float = 20.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.camera.height, self.camera.width):
            raise ParameterError(
                f"depth frame shape {self.values.shape} does not match camera "
                f"{self.camera.width}x{self.camera.height}")
        if np.any(self.values < 0):
            raise ParameterError("negative depth")

    def valid_mask(self):
        v = self.values
        return (v >= self.min_depth) & (v <= self.max_depth)


@dataclass
class WarpedSamples:
    uv: np.ndarray
    z: np.ndarray
    dropped_invalid: int = 0
    dropped_behind: int = 0
    dropped_out_of_bounds: int = 0

    def __len__(self):
        return len(self.z)


@dataclass(eq=False)
class SemiDensePointCloud:
    pixels: np.ndarray
    points: np.ndarray
    depths: np.ndarray
    t_ref: int = 0
    pose_ref: PoseSE3 = field(default_factory=PoseSE3.identity)
    build_ms: float = 0.0

    def __len__(self):
        return len(self.depths)


@lru_cache(maxsize=8)
def _pixel_rays(cam: PinholeCamera):
    xs, ys = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                         np.arange(cam.height, dtype=np.float64))
    xn, yn = cam.undistort((xs.ravel() - cam.cx) / cam.fx, (ys.ravel() - cam.cy) / cam.fy)
    rays = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    rays.flags.writeable = False
    return rays


def scatter_depth(depth: DepthFrame, calib: ExtrinsicCalib, cam_e: PinholeCamera) -> WarpedSamples:
    """Warp every valid depth pixel into the event camera (sub-pixel, with z)."""
    z_d = depth.values.ravel()
    valid = depth.valid_mask().ravel()
    n_invalid = int((~valid).sum())
    P_d = _pixel_rays(depth.camera)[valid] * z_d[valid, None]
    P_e = calib.T_ed.transform(P_d)
    uv, front = cam_e.project_points(P_e)
    inb = front & cam_e.contains(uv)
    return WarpedSamples(
        uv=uv[inb], z=P_e[inb, 2],
        dropped_invalid=n_invalid,
        dropped_behind=int((~front).sum()),
        dropped_out_of_bounds=int((front & ~inb).sum()),
    )


def _neighbor_offsets(radius):
    # a sample binned at integer pixel b lies within 0.5 px (per axis) of b
    reach = int(math.floor(radius + 0.5))
    offs = []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            gx = max(abs(dx) - 0.5, 0.0)
            gy = max(abs(dy) - 0.5, 0.0)
            if gx * gx + gy * gy <= radius * radius:
                offs.append((dx, dy))
    return np.array(offs, dtype=np.int64)


def assign_depths(region, samples: WarpedSamples, cam_e: PinholeCamera, radius=1.5,
                  cluster_gap=0.3, t_ref=0, pose_ref: PoseSE3 | None = None) -> SemiDensePointCloud:
    """Give each region pixel the depth of its nearest (foreground) sample cluster.

    Samples within ``radius`` px of the pixel center are sorted by depth and
    split wherever consecutive depths differ by more than ``cluster_gap``; the
    closest cluster wins and its depths are blended by inverse distance.  The
    pixel is then lifted along its own ray.  Pixels with no nearby sample are
    dropped.
    """
    if not radius > 0 or not cluster_gap > 0:
        raise ParameterError("radius and cluster_gap must be positive")
    pose_ref = PoseSE3.identity() if pose_ref is None else pose_ref
    region = np.asarray(region, dtype=np.int64).reshape(-1, 2)
    empty = SemiDensePointCloud(np.zeros((0, 2), np.int64), np.zeros((0, 3)), np.zeros(0),
                                t_ref, pose_ref)
    if len(region) == 0 or len(samples) == 0:
        return empty
    W, H = cam_e.width, cam_e.height
    # canonical raster order so output never depends on input order
    region = region[np.lexsort((region[:, 0], region[:, 1]))]
    offsets = _neighbor_offsets(radius)
    reach = int(np.abs(offsets).max())

    bx = np.floor(samples.uv[:, 0] + 0.5).astype(np.int64)
    by = np.floor(samples.uv[:, 1] + 0.5).astype(np.int64)
    inside = (bx >= 0) & (bx < W) & (by >= 0) & (by < H)
    near = np.zeros((H + 2 * reach, W + 2 * reach), dtype=bool)
    for dx, dy in offsets:
        near[region[:, 1] + reach + dy, region[:, 0] + reach + dx] = True
    keep = inside.copy()
    keep[inside] = near[by[inside] + reach, bx[inside] + reach]
    su = samples.uv[keep, 0]
    sv = samples.uv[keep, 1]
    sz = samples.z[keep]
    slin = by[keep] * W + bx[keep]
    order = np.lexsort((sz, sv, su, slin))
    su, sv, sz, slin = su[order], sv[order], sz[order], slin[order]
    if len(sz) == 0:
        return empty

    # candidate (pixel, bucket) pairs
    px = region[:, 0][:, None] + offsets[None, :, 0]
    py = region[:, 1][:, None] + offsets[None, :, 1]
    ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    blin = np.where(ok, py * W + px, -1)
    start = np.searchsorted(slin, blin, side="left")
    stop = np.searchsorted(slin, blin, side="right")
    counts = np.where(ok, stop - start, 0).ravel()
    total = int(counts.sum())
    if total == 0:
        return empty
    pair = np.repeat(np.arange(counts.size), counts)
    first = np.cumsum(counts) - counts
    sidx = np.repeat(start.ravel(), counts) + (np.arange(total) - first[pair])
    pid = pair // len(offsets)

    du = su[sidx] - region[pid, 0]
    dv = sv[sidx] - region[pid, 1]
    dist = np.hypot(du, dv)
    within = dist <= radius
    pid, sidx, dist = pid[within], sidx[within], dist[within]
    if len(pid) == 0:
        return empty
    z = sz[sidx]
    o = np.lexsort((sidx, z, pid))
    pid, z, dist = pid[o], z[o], dist[o]

    group_start = np.ones(len(pid), dtype=bool)
    group_start[1:] = pid[1:] != pid[:-1]
    brk = group_start.copy()
    brk[1:] |= (z[1:] - z[:-1]) > cluster_gap
    cluster = np.cumsum(brk)
    gidx = np.cumsum(group_start) - 1
    first_cluster = cluster[group_start][gidx]
    fg = cluster == first_cluster
    pid, z, dist, gidx = pid[fg], z[fg], dist[fg], gidx[fg]

    exact = dist < 1e-9
    seg = np.flatnonzero(np.r_[True, pid[1:] != pid[:-1]])
    has_exact = np.add.reduceat(exact.astype(np.int64), seg) > 0
    seg_id = np.cumsum(np.r_[True, pid[1:] != pid[:-1]]) - 1
    w = np.where(has_exact[seg_id], exact.astype(np.float64), 1.0 / np.maximum(dist, 1e-9))
    depth = np.add.reduceat(w * z, seg) / np.add.reduceat(w, seg)
    # the blend is convex, clamp away last-ulp excursions
    depth = np.clip(depth, np.minimum.reduceat(z, seg), np.maximum.reduceat(z, seg))

    pixels = region[pid[seg]]
    points = cam_e.backproject_points(pixels.astype(np.float64), depth)
    return SemiDensePointCloud(pixels, points, depth, t_ref, pose_ref)


def should_create_keyframe(pose_cur: PoseSE3, pose_ref: PoseSE3, trans_thresh=0.05,
                           rot_thresh=math.radians(3.0)) -> bool:
    """Baseline test against the reference frame (strict inequalities).

    The angle comparison carries a 1e-12 relative slack so that rounding in
    the relative-pose product cannot push an exactly-at-threshold rotation
    over the boundary.
    """
    rel = pose_ref.inverse() @ pose_cur
    if np.linalg.norm(rel.t) > trans_thresh:
        return True
    return rel.angle > rot_thresh * (1.0 + 1e-12)


def build_keyframe(tsm: TimeSurfaceMap, depth: DepthFrame, calib: ExtrinsicCalib,
                   cam_e: PinholeCamera, pose_ref: PoseSE3, cfg: MappingConfig | None = None,
                   delta=None) -> SemiDensePointCloud:
    cfg = cfg or MappingConfig()
    region = threshold_mask(tsm, delta)
    samples = scatter_depth(depth, calib, cam_e)
    return assign_depths(region, samples, cam_e, cfg.radius, cfg.cluster_gap,
                         tsm.t_query, pose_ref)
