"""Tracking + mapping orchestration over a dataset.

Two mapping workers are available.  :class:`SyncMapper` builds keyframes
inline and is fully deterministic.  :class:`ThreadedMapper` builds them on a
background thread and hands finished snapshots to the tracker through a
single "latest wins" slot, so the tracker never waits on it after bootstrap.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, ParseError
from .events import TimeSurfaceMap
from .geometry import ExtrinsicCalib, PinholeCamera, PoseSE3
from .mapping import MappingConfig, SemiDensePointCloud, build_keyframe
from .tracking import SolverConfig, TrackerConfig, track_stream
from . import io

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_LOST = 4

WINDOW_POLICIES = ("sliding", "since_last_tick", "all")


@dataclass
class PipelineConfig:
    tau_us: float = 30_000.0
    delta: float = 25.0
    rate_hz: float = 100.0
    window_policy: str = "sliding"
    window_min_us: int = 10_000
    window_events: int = 30_000
    bootstrap_delay_us: int = 50_000
    constant_velocity: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    seed: int = 0

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.tau_us > 0, "tau_us must be > 0")
        need(0 <= self.delta <= 255, "delta must lie in [0, 255]")
        need(self.rate_hz > 0, "rate_hz must be > 0")
        need(self.window_policy in WINDOW_POLICIES,
             f"window_policy must be one of {', '.join(WINDOW_POLICIES)}")
        need(self.window_min_us > 0, "window_min_us must be > 0")
        need(self.window_events > 0, "window_events must be > 0")
        need(self.bootstrap_delay_us >= 0, "bootstrap_delay_us must be >= 0")
        s = self.solver
        need(s.huber > 0, "solver.huber must be > 0")
        need(s.max_iters >= 1, "solver.max_iters must be >= 1")
        need(s.eps > 0, "solver.eps must be > 0")
        need(s.min_points >= 6, "solver.min_points must be >= 6")
        need(s.max_cond > 1, "solver.max_cond must be > 1")
        need(s.lambda_init > 0, "solver.lambda_init must be > 0")
        m = self.mapping
        need(m.radius > 0, "mapping.radius must be > 0")
        need(m.cluster_gap > 0, "mapping.cluster_gap must be > 0")
        need(m.trans_thresh > 0, "mapping.trans_thresh must be > 0")
        need(0 < m.rot_thresh < math.pi, "mapping.rot_thresh must lie in (0, pi)")
        need(m.max_depth_skew_us >= 0, "mapping.max_depth_skew_us must be >= 0")
        need(0 <= m.min_depth < m.max_depth, "mapping depth window is empty")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        try:
            solver = SolverConfig(**data.pop("solver", {}))
            mapping = MappingConfig(**data.pop("mapping", {}))
            cfg = cls(solver=solver, mapping=mapping, **data)
        except TypeError as exc:
            raise ConfigError(f"unknown or malformed config field: {exc}") from None
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(
            rate_hz=self.rate_hz, tau_us=self.tau_us, delta=self.delta,
            window_policy=self.window_policy, window_min_us=self.window_min_us,
            window_events=self.window_events, bootstrap_delay_us=self.bootstrap_delay_us,
            constant_velocity=self.constant_velocity, trans_thresh=self.mapping.trans_thresh,
            rot_thresh=self.mapping.rot_thresh, solver=self.solver)


class InMemoryDepth:
    """Depth frames held in memory, with the same lookup as :class:`io.DepthSequence`."""

    def __init__(self, frames):
        self.frames = sorted(frames, key=lambda f: f.timestamp)
        self.timestamps = np.array([f.timestamp for f in self.frames], dtype=np.int64)

    def __len__(self):
        return len(self.frames)

    def nearest_index(self, t_us):
        if not len(self.frames):
            return None
        k = int(np.searchsorted(self.timestamps, t_us))
        cands = [c for c in (k - 1, k) if 0 <= c < len(self.frames)]
        return min(cands, key=lambda c: (abs(int(self.timestamps[c]) - t_us), c))

    def nearest(self, t_us, max_skew_us=None):
        i = self.nearest_index(t_us)
        if i is None:
            return None
        if max_skew_us is not None and abs(int(self.timestamps[i]) - t_us) > max_skew_us:
            return None
        return self.frames[i]


class _MapperBase:
    def __init__(self, depth, calib: ExtrinsicCalib, cam_e: PinholeCamera, cfg: PipelineConfig):
        self.depth = depth
        self.calib = calib
        self.cam_e = cam_e
        self.cfg = cfg
        self.built = 0

    def _build(self, t_us, pose, tsm, frame) -> SemiDensePointCloud | None:
        t0 = time.perf_counter()
        cloud = build_keyframe(tsm, frame, self.calib, self.cam_e, pose, self.cfg.mapping,
                               self.cfg.delta)
        cloud.build_ms = (time.perf_counter() - t0) * 1e3
        if len(cloud) < self.cfg.solver.min_points:
            log.info("keyframe at t=%d us rejected: %d points", t_us, len(cloud))
            return None
        self.built += 1
        log.debug("keyframe at t=%d us: %d points in %.1f ms", t_us, len(cloud), cloud.build_ms)
        return cloud

    def _frame(self, t_us):
        return self.depth.nearest(t_us, self.cfg.mapping.max_depth_skew_us)


class SyncMapper(_MapperBase):
    """Builds keyframes inline on request."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._latest = None

    def latest(self):
        return self._latest

    def request(self, t_us: int, pose: PoseSE3, tsm: TimeSurfaceMap) -> bool:
        frame = self._frame(t_us)
        if frame is None:
            return False
        cloud = self._build(t_us, pose, tsm, frame)
        if cloud is None:
            return False
        self._latest = cloud
        return True

    def close(self):
        pass


class ThreadedMapper(_MapperBase):
    """Builds keyframes on a worker thread; publishes through a single slot."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._slot = None
        self._lock = threading.Lock()
        self._done = threading.Condition(self._lock)
        self._jobs: queue.Queue = queue.Queue(maxsize=1)
        self._busy = False
        self._finished = 0
        self._thread = threading.Thread(target=self._work, name="devo-mapping", daemon=True)
        self._thread.start()

    def latest(self):
        with self._lock:
            return self._slot

    def request(self, t_us, pose, tsm) -> bool:
        with self._lock:
            if self._busy:
                return False
        frame = self._frame(t_us)
        if frame is None:
            return False
        with self._lock:
            self._busy = True
        self._jobs.put((t_us, pose, tsm, frame))
        return True

    def wait_for_keyframe(self, timeout=None):
        with self._done:
            target = self._finished + (1 if self._busy else 0)
            self._done.wait_for(lambda: self._finished >= target, timeout)
            return self._slot

    def _work(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            try:
                cloud = self._build(*job)
            except Exception:
                log.exception("keyframe build failed")
                cloud = None
            with self._done:
                if cloud is not None:
                    self._slot = cloud
                self._busy = False
                self._finished += 1
                self._done.notify_all()

    def close(self):
        self._jobs.put(None)
        self._thread.join()


class CsvAppender:
    """List-like sink that appends each row to a CSV file as it arrives."""

    FIELDS = ["t_us", "n_points", "n_valid", "iterations", "inlier_fraction", "cost", "converged",
              "solve_ms", "tsm_ms", "keyframe", "keyframe_build_ms", "status"]

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.FIELDS, lineterminator="\n")
        self._writer.writeheader()
        self.rows = []

    def append(self, row):
        self._writer.writerow(row)
        self.rows.append(row)

    def close(self):
        self._fh.close()


@dataclass
class RunResult:
    exit_code: int
    message: str = ""
    trajectory_path: Path | None = None
    diagnostics_path: Path | None = None
    trajectory: object = None
    diagnostics: list = field(default_factory=list)
    lost_at: float | None = None


def run(dataset_root, config: PipelineConfig | None = None, output_dir="devo_out",
        deterministic: bool = True) -> RunResult:
    """Track a whole dataset and write ``trajectory.txt`` and ``diagnostics.csv``."""
    try:
        cfg = (config or PipelineConfig()).validate()
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, str(exc))
    try:
        ds = io.load_dataset(dataset_root, cfg.mapping.min_depth, cfg.mapping.max_depth)
    except (DatasetError, ParseError, ValueError) as exc:
        return RunResult(EXIT_DATASET, f"dataset error: {exc}")

    out = io.ensure_dir(output_dir)
    traj_path = out / "trajectory.txt"
    diag_path = out / "diagnostics.csv"
    mapper_cls = SyncMapper if deterministic else ThreadedMapper
    mapper = mapper_cls(ds.depth, ds.calib, ds.cam_e, cfg)
    diag = CsvAppender(diag_path)
    try:
        traj = track_stream(ds.event_chunks(), mapper, ds.cam_e, cfg.tracker(), diag)
    except (ParseError, DatasetError) as exc:
        return RunResult(EXIT_DATASET, f"dataset error: {exc}", diagnostics_path=diag_path)
    finally:
        mapper.close()
        diag.close()
    io.write_trajectory(traj_path, traj)
    result = RunResult(EXIT_OK, "ok", traj_path, diag_path, traj, diag.rows, traj.lost_at)
    if len(traj) == 0:
        result.exit_code = EXIT_DATASET
        result.message = "bootstrap failed: no valid first keyframe (events/depth missing?)"
    elif traj.lost_at is not None:
        result.exit_code = EXIT_LOST
        result.message = f"tracking lost at t={traj.lost_at:.6f} s"
    return result
