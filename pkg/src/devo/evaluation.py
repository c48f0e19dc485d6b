"""ATE / RPE trajectory metrics and the rigid alignment they rely on."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, AssociationError, EvaluationError, ParameterError
from .geometry import PoseSE3, matrix_to_rodrigues


@dataclass(eq=False)
class Trajectory:
    """World-from-camera poses with strictly increasing timestamps (seconds)."""

    times: np.ndarray
    poses: list = field(default_factory=list)
    lost_at: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.poses = list(self.poses)
        if len(self.times) != len(self.poses):
            raise ParameterError("times and poses differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ParameterError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_microseconds(cls, stamps_us, poses):
        return cls(np.asarray(stamps_us, dtype=np.int64) * 1e-6, poses)

    def __len__(self):
        return len(self.times)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.t for p in self.poses])

    def transformed(self, T: PoseSE3) -> "Trajectory":
        """Left-multiply every pose by ``T`` (change of world frame)."""
        return Trajectory(self.times.copy(), [T @ p for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching.

    Candidate pairs within ``max_dt`` are taken in order of increasing time
    offset (ties broken by index); each sample on either side is used once.
    Returned pairs are sorted by estimate index.
    """
    if len(est) == 0 or len(gt) == 0:
        raise AssociationError("cannot associate an empty trajectory")
    te, tg = est.times, gt.times
    lo = np.searchsorted(tg, te - max_dt, side="left")
    hi = np.searchsorted(tg, te + max_dt, side="right")
    counts = hi - lo
    ei = np.repeat(np.arange(len(te)), counts)
    first = np.cumsum(counts) - counts
    gi = np.repeat(lo, counts) + (np.arange(int(counts.sum())) - np.repeat(first, counts))
    dt = np.abs(te[ei] - tg[gi])
    ok = dt <= max_dt
    ei, gi, dt = ei[ok], gi[ok], dt[ok]
    order = np.lexsort((gi, ei, dt))
    used_e = np.zeros(len(te), dtype=bool)
    used_g = np.zeros(len(tg), dtype=bool)
    pairs = []
    for k in order.tolist():
        a, b = int(ei[k]), int(gi[k])
        if not used_e[a] and not used_g[b]:
            used_e[a] = used_g[b] = True
            pairs.append((a, b))
    if not pairs:
        raise AssociationError("no timestamps could be associated")
    pairs.sort()
    return pairs


def align_rigid(src, dst):
    """Least-squares ``R, t`` with ``R @ src_i + t ~ dst_i`` (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise AlignmentError("need at least 3 associated positions")
    ms, md = src.mean(0), dst.mean(0)
    A = src - ms
    B = dst - md
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentError("positions are degenerate (collinear or coincident)")
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ D @ Vt
    return R, md - R @ ms


def _paired_positions(est, gt, max_dt):
    pairs = associate(est, gt, max_dt)
    ie = [a for a, _ in pairs]
    ig = [b for _, b in pairs]
    return est.positions()[ie], gt.positions()[ig]


def ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> float:
    """Absolute trajectory error (RMSE after rigid alignment), in cm."""
    pe, pg = _paired_positions(est, gt, max_dt)
    R, t = align_rigid(pe, pg)
    err = pe @ R.T + t - pg
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1)))) * 100.0


@dataclass
class RPEIntervals:
    t_start: np.ndarray
    t_end: np.ndarray
    rot_deg_s: np.ndarray
    trans_cm_s: np.ndarray

    @property
    def rmse(self):
        return (float(np.sqrt(np.mean(self.rot_deg_s ** 2))),
                float(np.sqrt(np.mean(self.trans_cm_s ** 2))))


def rpe_intervals(est: Trajectory, gt: Trajectory, delta_t: float = 1.0,
                  max_dt: float = 0.02) -> RPEIntervals:
    if delta_t <= 0:
        raise ParameterError("delta_t must be positive")
    pairs = associate(est, gt, max_dt)
    pairs.sort(key=lambda p: p[1])
    tg = np.array([gt.times[b] for _, b in pairs])
    starts, ends, rot, trans = [], [], [], []
    # intervals must fit inside the associated span; tolerance absorbs float stamps
    t_last = tg[-1] + 1e-9
    for a in range(len(pairs)):
        target = tg[a] + delta_t
        if target > t_last:
            break
        k = int(np.searchsorted(tg, target))
        best = None
        for c in (k - 1, k):
            if a < c < len(tg) and abs(tg[c] - target) <= max_dt:
                if best is None or abs(tg[c] - target) < abs(tg[best] - target):
                    best = c
        if best is None:
            continue
        (ei, gi), (ej, gj) = pairs[a], pairs[best]
        d_gt = gt.poses[gi].inverse() @ gt.poses[gj]
        d_est = est.poses[ei].inverse() @ est.poses[ej]
        E = d_gt.inverse() @ d_est
        angle = np.linalg.norm(matrix_to_rodrigues(E.R))
        span = tg[best] - tg[a]
        starts.append(tg[a])
        ends.append(tg[best])
        rot.append(np.degrees(angle) / span)
        trans.append(np.linalg.norm(E.t) * 100.0 / span)
    if not rot:
        raise EvaluationError(f"no pose pairs {delta_t} s apart")
    return RPEIntervals(np.array(starts), np.array(ends), np.array(rot), np.array(trans))


def rpe(est: Trajectory, gt: Trajectory, delta_t: float = 1.0, max_dt: float = 0.02):
    """Relative pose error as ``(deg/s, cm/s)`` RMS over all intervals."""
    return rpe_intervals(est, gt, delta_t, max_dt).rmse
