"""Readers and writers for the on-disk dataset layout.

A dataset directory holds a ``dataset.json`` manifest naming:

* ``events``       text file, header ``# width height`` then ``t_us x y p`` lines (p in {0,1})
* ``depth_index``  text file of ``timestamp_us filename`` pairs pointing at 16-bit P5 PGMs (mm)
* ``calibration``  JSON with ``event_camera``, ``depth_camera`` and row-major ``T_ed``
* ``groundtruth``  optional trajectory, ``timestamp_s tx ty tz qx qy qz qw`` per line
"""
from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import CalibrationError, DatasetError, ParameterError, ParseError
from .evaluation import Trajectory
from .events import EventStream
from .geometry import ExtrinsicCalib, PinholeCamera, PoseSE3
from .mapping import DepthFrame

log = logging.getLogger(__name__)

MANIFEST = "dataset.json"


# events -------------------------------------------------------------------

def read_events_header(path) -> tuple[int, int]:
    with open(path, "r") as fh:
        first = fh.readline()
    parts = first.strip().split()
    if len(parts) != 3 or parts[0] != "#":
        raise ParseError("missing '# width height' header", path, 1)
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError:
        raise ParseError("bad sensor size in header", path, 1) from None
    if w <= 0 or h <= 0:
        raise ParseError("sensor size must be positive", path, 1)
    return w, h


def _locate_bad_line(path, first_line):
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno < first_line:
                continue
            parts = line.split()
            if len(parts) != 4:
                return lineno, f"expected 4 fields, got {len(parts)}"
            try:
                [int(p) for p in parts]
            except ValueError:
                return lineno, f"non-integer field in {line.strip()!r}"
    return None, "unreadable event data"


def iter_event_chunks(path, chunk_size: int = 1_000_000) -> Iterator[EventStream]:
    """Stream an events file in bounded-size chunks, validating as it goes."""
    path = Path(path)
    w, h = read_events_header(path)
    reader = pd.read_csv(path, sep=" ", header=None, skiprows=1, names=["t", "x", "y", "p"],
                         dtype=np.int64, chunksize=chunk_size, engine="c")
    row0 = 0
    t_prev = None
    try:
        for df in reader:
            t = df["t"].to_numpy()
            x = df["x"].to_numpy()
            y = df["y"].to_numpy()
            p = df["p"].to_numpy()
            bad = (x < 0) | (x >= w) | (y < 0) | (y >= h) | ((p != 0) & (p != 1)) | (t < 0)
            if bad.any():
                i = int(np.argmax(bad))
                raise ParseError(f"event ({t[i]} {x[i]} {y[i]} {p[i]}) out of range for "
                                 f"sensor {w}x{h}", path, row0 + i + 2)
            if len(t):
                back = np.flatnonzero(np.diff(t) < 0)
                if len(back):
                    raise ParseError("timestamps decrease", path, row0 + int(back[0]) + 3)
                if t_prev is not None and t[0] < t_prev:
                    raise ParseError("timestamps decrease", path, row0 + 2)
                t_prev = int(t[-1])
            yield EventStream(t, x, y, np.where(p == 1, 1, -1), (w, h), validate=False)
            row0 += len(df)
    except (ValueError, pd.errors.ParserError) as exc:
        if isinstance(exc, ParseError):
            raise
        line, msg = _locate_bad_line(path, row0 + 2)
        raise ParseError(msg, path, line) from None


def read_events(path) -> EventStream:
    w, h = read_events_header(path)
    chunks = list(iter_event_chunks(path))
    if not chunks:
        return EventStream.empty((w, h))
    return EventStream.concatenate(chunks) if len(chunks) > 1 else chunks[0]


def write_events(path, stream: EventStream):
    w, h = stream.sensor_size
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {w} {h}\n")
        if len(stream):
            df = pd.DataFrame({"t": stream.t, "x": stream.x, "y": stream.y,
                               "p": (stream.p > 0).astype(np.int8)})
            df.to_csv(fh, sep=" ", header=False, index=False, lineterminator="\n")


# depth --------------------------------------------------------------------

def write_pgm16(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint16:
        raise ValueError("expected a uint16 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ParseError("not a binary PGM (P5)", path)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 65535:
        raise ParseError(f"expected maxval 65535, got {maxval}", path)
    raw = data[pos:pos + 2 * w * h]
    if len(raw) != 2 * w * h:
        raise ParseError("truncated PGM pixel data", path)
    return np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.uint16)


def depth_to_mm(values) -> np.ndarray:
    mm = np.rint(np.asarray(values) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


class DepthSequence:
    """Random access to depth frames by timestamp (nearest lookup)."""

    def __init__(self, index_path, camera: PinholeCamera, min_depth=0.1, max_depth=20.0,
                 cache_size: int = 4):
        self.index_path = Path(index_path)
        self.camera = camera
        self.min_depth = min_depth
        self.max_depth = max_depth
        stamps, names = [], []
        with open(self.index_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                s = line.strip()
                if not s or s.startswith("#"):
                    continue
                parts = s.split()
                if len(parts) != 2:
                    raise ParseError("expected 'timestamp_us filename'", self.index_path, lineno)
                try:
                    stamps.append(int(parts[0]))
                except ValueError:
                    raise ParseError("bad timestamp", self.index_path, lineno) from None
                names.append(parts[1])
        self.timestamps = np.array(stamps, dtype=np.int64)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ParseError("depth timestamps must increase", self.index_path)
        self.filenames = names
        self._cache: OrderedDict[int, DepthFrame] = OrderedDict()
        self._cache_size = cache_size

    def __len__(self):
        return len(self.timestamps)

    def path(self, i) -> Path:
        return self.index_path.parent / self.filenames[i]

    def frame(self, i) -> DepthFrame:
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        img = read_pgm16(self.path(i))
        if img.shape != (self.camera.height, self.camera.width):
            raise DatasetError(f"{self.path(i)}: size {img.shape[::-1]} does not match depth camera")
        frame = DepthFrame(img.astype(np.float64) / 1000.0, int(self.timestamps[i]), self.camera,
                           self.min_depth, self.max_depth)
        self._cache[i] = frame
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return frame

    def nearest_index(self, t_us):
        if not len(self):
            return None
        k = int(np.searchsorted(self.timestamps, t_us))
        cands = [c for c in (k - 1, k) if 0 <= c < len(self)]
        return min(cands, key=lambda c: (abs(int(self.timestamps[c]) - t_us), c))

    def nearest(self, t_us, max_skew_us=None) -> DepthFrame | None:
        i = self.nearest_index(t_us)
        if i is None:
            return None
        if max_skew_us is not None and abs(int(self.timestamps[i]) - t_us) > max_skew_us:
            return None
        return self.frame(i)


def write_depth_index(path, entries):
    with open(path, "w", newline="\n") as fh:
        for t, name in entries:
            fh.write(f"{int(t)} {name}\n")


# calibration --------------------------------------------------------------

def camera_to_dict(cam: PinholeCamera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "dist": list(cam.dist)}


def camera_from_dict(d: dict) -> PinholeCamera:
    try:
        return PinholeCamera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                             int(d["width"]), int(d["height"]),
                             tuple(d.get("dist", (0.0, 0.0, 0.0, 0.0))))
    except KeyError as exc:
        raise CalibrationError(f"camera block is missing {exc}") from None


def read_calibration(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    for key in ("event_camera", "depth_camera", "T_ed"):
        if key not in data:
            raise CalibrationError(f"{path}: missing '{key}'")
    T = np.asarray(data["T_ed"], dtype=np.float64)
    if T.size != 16:
        raise CalibrationError(f"{path}: T_ed needs 16 numbers")
    return (camera_from_dict(data["event_camera"]), camera_from_dict(data["depth_camera"]),
            ExtrinsicCalib.from_matrix(T.reshape(4, 4)))


def write_calibration(path, cam_e: PinholeCamera, cam_d: PinholeCamera, calib: ExtrinsicCalib):
    data = {"event_camera": camera_to_dict(cam_e), "depth_camera": camera_to_dict(cam_d),
            "T_ed": [float(v) for v in calib.T_ed.matrix().ravel()]}
    with open(path, "w", newline="\n") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


# trajectories -------------------------------------------------------------

def write_trajectory(path, traj: Trajectory):
    lines = []
    for t, pose in zip(traj.times.tolist(), traj.poses):
        q = pose.quaternion()
        vals = " ".join(f"{v:.9f}" for v in (*pose.t, *q))
        lines.append(f"{t:.6f} {vals}\n")
    with open(path, "w", newline="\n") as fh:
        fh.writelines(lines)


def read_trajectory(path) -> Trajectory:
    times, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", path, lineno)
            try:
                v = [float(p) for p in parts]
            except ValueError:
                raise ParseError("non-numeric field", path, lineno) from None
            times.append(v[0])
            poses.append(PoseSE3.from_quaternion(v[1:4], v[4:8]))
    try:
        return Trajectory(np.array(times), poses)
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


# dataset ------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    events_path: Path
    depth: DepthSequence
    cam_e: PinholeCamera
    cam_d: PinholeCamera
    calib: ExtrinsicCalib
    groundtruth: Trajectory | None

    @property
    def sensor_size(self):
        return self.cam_e.size

    def event_chunks(self, chunk_size: int = 1_000_000):
        return iter_event_chunks(self.events_path, chunk_size)

    def events(self) -> EventStream:
        return read_events(self.events_path)


def write_manifest(root, events="events.txt", depth_index="depth.txt",
                   calibration="calibration.json", groundtruth=None):
    data = {"events": str(events), "depth_index": str(depth_index),
            "calibration": str(calibration)}
    if groundtruth is not None:
        data["groundtruth"] = str(groundtruth)
    with open(Path(root) / MANIFEST, "w", newline="\n") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def load_dataset(root, min_depth=0.1, max_depth=20.0) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{manifest} not found")
    try:
        fields = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", manifest, exc.lineno) from None

    def resolve(key, required=True):
        if key not in fields or fields[key] is None:
            if required:
                raise DatasetError(f"{manifest}: missing '{key}'")
            return None
        p = Path(fields[key])
        p = p if p.is_absolute() else root / p
        if not p.is_file():
            raise DatasetError(f"{manifest}: '{key}' file {p} does not exist")
        return p

    events_path = resolve("events")
    cam_e, cam_d, calib = read_calibration(resolve("calibration"))
    size = read_events_header(events_path)
    if size != cam_e.size:
        raise DatasetError(f"events header size {size} does not match calibration {cam_e.size}")
    depth = DepthSequence(resolve("depth_index"), cam_d, min_depth, max_depth)
    gt_path = resolve("groundtruth", required=False)
    gt = read_trajectory(gt_path) if gt_path is not None else None
    return Dataset(root, events_path, depth, cam_e, cam_d, calib, gt)


def decimate_depth(src_root, dst_root, keep_every: int) -> Path:
    """Write a dataset at ``dst_root`` that keeps every ``keep_every``-th depth frame.

    Only the manifest and the depth index are written; every other file is
    referenced by absolute path.
    """
    if keep_every < 1:
        raise ParameterError("keep_every must be >= 1")
    src = load_dataset(src_root)
    dst = ensure_dir(dst_root)
    depth = src.depth
    entries = [(depth.timestamps[i], depth.path(i).resolve())
               for i in range(0, len(depth), keep_every)]
    write_depth_index(dst / "depth.txt", entries)
    fields = json.loads((Path(src_root) / MANIFEST).read_text())
    gt = fields.get("groundtruth")
    write_manifest(dst, events=src.events_path.resolve(),
                   calibration=(Path(src_root) / fields["calibration"]).resolve(),
                   groundtruth=(Path(src_root) / gt).resolve() if gt else None)
    return dst


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
