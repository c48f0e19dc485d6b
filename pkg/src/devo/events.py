"""Event streams, time-surface maps and the potential field the tracker samples."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np

from .errors import InputOrderError, ParameterError, ParseError

NEVER = np.iinfo(np.int64).min
SCALE = 255.0
DEFAULT_TAU_US = 30_000.0
DEFAULT_DELTA = 25.0


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    b: int


class EventStream:
    """Time-sorted events held as parallel numpy arrays.

    Timestamps are integer microseconds, polarity is +1/-1.  Input that is not
    sorted by time is sorted stably, so events sharing a timestamp keep their
    input order.
    """

    def __init__(self, t, x, y, p, sensor_size, validate=True):
        self.t = np.ascontiguousarray(t, dtype=np.int64)
        self.x = np.ascontiguousarray(x, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=np.int32)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.sensor_size = (int(sensor_size[0]), int(sensor_size[1]))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ParameterError("event arrays differ in length")
        if validate and n:
            w, h = self.sensor_size
            bad = (self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h)
            if bad.any():
                i = int(np.argmax(bad))
                raise ParseError(f"event {i} at ({self.x[i]}, {self.y[i]}) outside sensor {w}x{h}")
            if np.any(np.diff(self.t) < 0):
                order = np.argsort(self.t, kind="stable")
                self.t, self.x, self.y, self.p = (a[order] for a in (self.t, self.x, self.y, self.p))

    @classmethod
    def empty(cls, sensor_size):
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_size)

    @classmethod
    def from_events(cls, events: Iterable[Event], sensor_size):
        events = list(events)
        return cls([e.t for e in events], [e.x for e in events], [e.y for e in events],
                   [e.b for e in events], sensor_size)

    @classmethod
    def concatenate(cls, streams):
        streams = list(streams)
        if not streams:
            raise ParameterError("nothing to concatenate")
        return cls(np.concatenate([s.t for s in streams]), np.concatenate([s.x for s in streams]),
                   np.concatenate([s.y for s in streams]), np.concatenate([s.p for s in streams]),
                   streams[0].sensor_size)

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return EventStream(self.t[idx], self.x[idx], self.y[idx], self.p[idx],
                               self.sensor_size, validate=False)
        return Event(int(self.x[idx]), int(self.y[idx]), int(self.t[idx]), int(self.p[idx]))

    def time_slice(self, t0=None, t1=None) -> "EventStream":
        """Events with ``t0 <= t <= t1``."""
        i0 = 0 if t0 is None else int(np.searchsorted(self.t, t0, side="left"))
        i1 = len(self) if t1 is None else int(np.searchsorted(self.t, t1, side="right"))
        return self[i0:i1]

    def flipped(self) -> "EventStream":
        return EventStream(self.t, self.x, self.y, -self.p, self.sensor_size, validate=False)


@dataclass(frozen=True, eq=False)
class TimeSurfaceMap:
    values: np.ndarray
    t_query: int
    tau: float
    delta: float
    last_timestamp: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def sensor_size(self):
        h, w = self.values.shape
        return (w, h)

    def mask(self, delta=None) -> np.ndarray:
        d = self.delta if delta is None else delta
        return self.values > d


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"decay constant tau must be positive, got {tau}")


def last_timestamps(stream: EventStream, out=None) -> np.ndarray:
    """Per-pixel time of the most recent event (``NEVER`` where none fired)."""
    w, h = stream.sensor_size
    if out is None:
        out = np.full((h, w), NEVER, dtype=np.int64)
    if len(stream):
        lin = stream.y.astype(np.int64) * w + stream.x
        flat = out.reshape(-1)
        # events are time-sorted, so the last occurrence of a pixel is its newest
        rev_unique, rev_first = np.unique(lin[::-1], return_index=True)
        newest = stream.t[len(lin) - 1 - rev_first]
        flat[rev_unique] = np.maximum(flat[rev_unique], newest)
    return out


def tsm_from_last_timestamps(last, t_query, tau=DEFAULT_TAU_US, delta=DEFAULT_DELTA,
                             window_start=None) -> TimeSurfaceMap:
    _check_tau(tau)
    last = np.asarray(last, dtype=np.int64)
    fired = last != NEVER
    if window_start is not None:
        fired &= last >= window_start
    if np.any(last[fired] > t_query):
        raise InputOrderError(f"event newer than query time {t_query}")
    values = np.zeros(last.shape, dtype=np.float64)
    dt = (t_query - last[fired]).astype(np.float64)
    values[fired] = SCALE * np.exp(-dt / float(tau))
    last = last.copy()
    if window_start is not None:
        last[~fired] = NEVER
    values.flags.writeable = False
    last.flags.writeable = False
    return TimeSurfaceMap(values, int(t_query), float(tau), float(delta), last)


def build_tsm(stream: EventStream, t_query, tau=DEFAULT_TAU_US, delta=DEFAULT_DELTA) -> TimeSurfaceMap:
    """Exponential-decay time surface on the 0-255 scale; polarity is ignored."""
    _check_tau(tau)
    if len(stream) and stream.t[-1] > t_query:
        raise InputOrderError(f"event at t={int(stream.t[-1])} is after query time {t_query}")
    return tsm_from_last_timestamps(last_timestamps(stream), t_query, tau, delta)


def threshold_mask(tsm: TimeSurfaceMap, delta=None) -> np.ndarray:
    """Pixels strictly above ``delta`` as an (N, 2) array of ``(x, y)`` in raster order."""
    d = tsm.delta if delta is None else float(delta)
    if not 0.0 <= d <= SCALE:
        raise ParameterError(f"threshold {d} outside [0, 255]")
    ys, xs = np.nonzero(tsm.values > d)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def bilinear_sample(img, uv):
    """Sample an (H, W) or (H, W, C) image at sub-pixel ``uv``.

    Returns ``(samples, valid)``; locations outside ``[0, W-1] x [0, H-1]``
    are marked invalid and get zeros.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
    ax = u - x0
    ay = v - y0
    bx = 1.0 - ax
    by = 1.0 - ay
    i00 = y0 * w + x0
    if img.ndim == 2:
        flat = img.reshape(-1)
        out = ((flat.take(i00) * bx + flat.take(i00 + 1) * ax) * by
               + (flat.take(i00 + w) * bx + flat.take(i00 + w + 1) * ax) * ay)
        out[~valid] = 0.0
        return out, valid
    flat = img.reshape(h * w, -1)
    out = (flat[i00] * (bx * by)[:, None] + flat[i00 + 1] * (ax * by)[:, None]
           + flat[i00 + w] * (bx * ay)[:, None] + flat[i00 + w + 1] * (ax * ay)[:, None])
    out[~valid] = 0.0
    return out, valid


class PotentialField:
    """Negated, offset time surface: minima lie on recently active edges.

    Values are sampled bilinearly; the gradient comes from central differences
    on the grid, computed once and then sampled bilinearly as well.
    """

    def __init__(self, values, source_tsm: TimeSurfaceMap | None = None):
        values = np.asarray(values, dtype=np.float64)
        values.flags.writeable = False
        self.values = values
        self.source_tsm = source_tsm

    @property
    def shape(self):
        return self.values.shape

    @property
    def sensor_size(self):
        h, w = self.values.shape
        return (w, h)

    @cached_property
    def gradient(self):
        f = self.values
        gx = np.empty_like(f)
        gy = np.empty_like(f)
        gx[:, 1:-1] = 0.5 * (f[:, 2:] - f[:, :-2])
        gx[:, 0] = f[:, 1] - f[:, 0]
        gx[:, -1] = f[:, -1] - f[:, -2]
        gy[1:-1] = 0.5 * (f[2:] - f[:-2])
        gy[0] = f[1] - f[0]
        gy[-1] = f[-1] - f[-2]
        return gx, gy

    def sample(self, uv):
        return bilinear_sample(self.values, uv)

    def sample_with_gradient(self, uv):
        """Returns ``(values, gradients (N, 2), valid)``.

        Numerically identical to bilinearly sampling :attr:`gradient`, but the
        central differences are only formed at the cells actually touched.
        """
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        f = self.values
        h, w = f.shape
        u, v = uv[:, 0], uv[:, 1]
        valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        u = np.where(valid, u, 0.0)
        v = np.where(valid, v, 0.0)
        x0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
        y0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
        x1 = x0 + 1
        y1 = y0 + 1
        xm = np.maximum(x0 - 1, 0)
        xp = np.minimum(x0 + 2, w - 1)
        ym = np.maximum(y0 - 1, 0)
        yp = np.minimum(y0 + 2, h - 1)
        flat = f.reshape(-1)
        r0 = y0 * w
        r1 = r0 + w
        f00, f01 = flat.take(r0 + x0), flat.take(r0 + x1)
        f10, f11 = flat.take(r1 + x0), flat.take(r1 + x1)
        # central differences at the four cell corners (one-sided at borders)
        dxa = x1 - xm
        dxb = xp - x0
        gx00 = (f01 - flat.take(r0 + xm)) / dxa
        gx01 = (flat.take(r0 + xp) - f00) / dxb
        gx10 = (f11 - flat.take(r1 + xm)) / dxa
        gx11 = (flat.take(r1 + xp) - f10) / dxb
        dya = y1 - ym
        dyb = yp - y0
        gy00 = (f10 - flat.take(ym * w + x0)) / dya
        gy01 = (f11 - flat.take(ym * w + x1)) / dya
        gy10 = (flat.take(yp * w + x0) - f00) / dyb
        gy11 = (flat.take(yp * w + x1) - f01) / dyb
        ax = u - x0
        ay = v - y0
        bx = 1.0 - ax
        by = 1.0 - ay
        w00, w01, w10, w11 = bx * by, ax * by, bx * ay, ax * ay
        vals = f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11
        grad = np.empty((len(uv), 2))
        grad[:, 0] = gx00 * w00 + gx01 * w01 + gx10 * w10 + gx11 * w11
        grad[:, 1] = gy00 * w00 + gy01 * w01 + gy10 * w10 + gy11 * w11
        vals[~valid] = 0.0
        grad[~valid] = 0.0
        return vals, grad, valid


class AnalyticField:
    """Potential field given by smooth callables instead of a pixel grid.

    ``func(u, v)`` returns values and ``grad(u, v)`` returns ``(du, dv)``.
    Used for synthetic alignment problems where an exact derivative is needed.
    """

    def __init__(self, func, grad, sensor_size):
        self.func = func
        self.grad = grad
        self.sensor_size = (int(sensor_size[0]), int(sensor_size[1]))

    @property
    def shape(self):
        return (self.sensor_size[1], self.sensor_size[0])

    def _valid(self, uv):
        w, h = self.sensor_size
        return (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)

    def sample(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        valid = self._valid(uv)
        vals = np.where(valid, self.func(uv[:, 0], uv[:, 1]), 0.0)
        return vals, valid

    def sample_with_gradient(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        vals, valid = self.sample(uv)
        du, dv = self.grad(uv[:, 0], uv[:, 1])
        g = np.stack([np.broadcast_to(du, vals.shape), np.broadcast_to(dv, vals.shape)], axis=1)
        g = np.where(valid[:, None], g, 0.0)
        return vals, g, valid


def negate_tsm(tsm):
    """``255 - T``.  Applied to a field made from a TSM, returns that TSM."""
    if isinstance(tsm, PotentialField):
        if tsm.source_tsm is not None:
            return tsm.source_tsm
        return PotentialField(SCALE - tsm.values)
    return PotentialField(SCALE - tsm.values, source_tsm=tsm)


class TimeSurfaceBuilder:
    """Incrementally maintained per-pixel last-event times.

    Events must be fed in time order.  ``snapshot`` evaluates the map at a
    query time, optionally forgetting pixels whose last event predates
    ``window_start``.
    """

    def __init__(self, sensor_size, tau=DEFAULT_TAU_US, delta=DEFAULT_DELTA):
        _check_tau(tau)
        w, h = sensor_size
        self.sensor_size = (w, h)
        self.tau = float(tau)
        self.delta = float(delta)
        self.last = np.full((h, w), NEVER, dtype=np.int64)
        self.t_latest = NEVER

    def add(self, stream: EventStream):
        if not len(stream):
            return
        if stream.t[0] < self.t_latest:
            raise InputOrderError("events fed out of order")
        last_timestamps(stream, out=self.last)
        self.t_latest = int(stream.t[-1])

    def snapshot(self, t_query, window_start=None) -> TimeSurfaceMap:
        if self.t_latest > t_query:
            raise InputOrderError(f"builder holds events after query time {t_query}")
        return tsm_from_last_timestamps(self.last, t_query, self.tau, self.delta, window_start)


class EventCursor:
    """Walks a chunked, time-sorted event source up to successive query times.

    Keeps the timestamps of the most recent ``keep`` events so sliding windows
    defined by an event count can be evaluated.
    """

    def __init__(self, chunks, keep: int = 0):
        if isinstance(chunks, EventStream):
            chunks = [chunks]
        self._chunks = iter(chunks)
        self._pending: EventStream | None = None
        self.keep = int(keep)
        self._recent = np.zeros(0, dtype=np.int64)
        self.exhausted = False
        self.t_last_seen = None
        self.first_time = None

    def _next_chunk(self):
        for chunk in self._chunks:
            if len(chunk):
                if self.first_time is None:
                    self.first_time = int(chunk.t[0])
                return chunk
        return None

    def peek_first_time(self):
        if self.first_time is None and self._pending is None:
            self._pending = self._next_chunk()
            if self._pending is None:
                self.exhausted = True
        return self.first_time

    def advance(self, t) -> list:
        """Return the events with timestamp ``<= t`` not yet consumed."""
        out = []
        while True:
            if self._pending is None:
                self._pending = self._next_chunk()
                if self._pending is None:
                    self.exhausted = True
                    break
            chunk = self._pending
            i = int(np.searchsorted(chunk.t, t, side="right"))
            if i:
                out.append(chunk[:i])
            if i < len(chunk):
                self._pending = chunk[i:]
                break
            self._pending = None
        if self.keep and out:
            ts = np.concatenate([self._recent] + [c.t for c in out])
            self._recent = ts[-self.keep:]
        if out:
            self.t_last_seen = int(out[-1].t[-1])
        return out

    def nth_recent_time(self):
        """Timestamp of the ``keep``-th most recent consumed event, if that many exist."""
        if self.keep and len(self._recent) >= self.keep:
            return int(self._recent[0])
        return None
