"""Exponential-decay time surfaces.

A :class:`TimestampMap` keeps, for every channel plane and pixel, the time
of the most recent event. The surface of an event is the decayed map
``exp(-(t_event - t_cell) / tau)`` over the ``(2R+1) x (2R+1)`` window
centred on it, for every channel, flattened as ``(channel, dy, dx)``.
Cells that never fired or lie outside the sensor are 0.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np
from numba import njit

from .events import SENSOR, Event, EventStream

NEVER = -1


def surface_dim(channel_count: int, radius: int) -> int:
    return channel_count * (2 * radius + 1) ** 2


class TimestampMap:
    """Per-channel, per-pixel last activation times for one stream."""

    def __init__(self, width: int, height: int, channel_count: int,
                 semantics: str = SENSOR):
        self.width = width
        self.height = height
        self.channel_count = channel_count
        self.semantics = semantics
        self.last_t = np.full((channel_count, height, width), NEVER, dtype=np.int64)
        self.latest = NEVER

    @classmethod
    def for_stream(cls, stream: EventStream) -> "TimestampMap":
        return cls(stream.width, stream.height, stream.channel_count, stream.semantics)

    def plane(self, p: int) -> int:
        c = (p + 1) // 2 if self.semantics == SENSOR else p - 1
        if not 0 <= c < self.channel_count:
            raise ValueError(f"channel {p} out of range")
        return c

    def record(self, ev: Event) -> "TimestampMap":
        x, y, t, p = ev
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"event ({x}, {y}) outside {self.width}x{self.height}")
        if t < self.latest:
            raise ValueError(f"stream-order violation: t={t} after t={self.latest}")
        self.last_t[self.plane(p), y, x] = t
        self.latest = t
        return self

    def surface(self, ev: Event, radius: int, tau: float) -> np.ndarray:
        """Time surface around ``ev``; call :meth:`record` for ``ev`` first."""
        if tau <= 0 or radius < 1:
            raise ValueError("need tau > 0 and radius >= 1")
        out = np.empty((1, surface_dim(self.channel_count, radius)))
        _window(self.last_t, ev.x, ev.y, ev.t, radius, 1.0 / tau, out[0])
        return out[0]


@njit(cache=True)
def _window(last_t, x, y, t, radius, inv_tau, out):
    n_ch, height, width = last_t.shape
    k = 0
    for c in range(n_ch):
        for v in range(y - radius, y + radius + 1):
            for u in range(x - radius, x + radius + 1):
                if 0 <= v < height and 0 <= u < width and last_t[c, v, u] != -1:
                    out[k] = np.exp(-(t - last_t[c, v, u]) * inv_tau)
                else:
                    out[k] = 0.0
                k += 1


@njit(cache=True)
def _run(last_t, xs, ys, ts, cs, start, stop, radius, inv_tau, keep, out):
    n = 0
    for i in range(start, stop):
        last_t[cs[i], ys[i], xs[i]] = ts[i]
        if keep[i]:
            _window(last_t, xs[i], ys[i], ts[i], radius, inv_tau, out[n])
            n += 1
    return n


def iter_surfaces(stream: EventStream, radius: int, tau: float,
                  keep: np.ndarray | None = None,
                  chunk: int = 4096) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Replay ``stream`` through a fresh map, yielding ``(indices, surfaces)``.

    Every event is recorded; surfaces are produced only where ``keep`` is
    true (all events by default), in chunks of at most ``chunk`` rows.
    """
    if tau <= 0 or radius < 1:
        raise ValueError("need tau > 0 and radius >= 1")
    n = len(stream)
    if keep is None:
        keep = np.ones(n, dtype=np.bool_)
    keep = np.ascontiguousarray(keep, dtype=np.bool_)
    last_t = np.full((stream.channel_count, stream.height, stream.width),
                     NEVER, dtype=np.int64)
    cs = stream.channel_index()
    dim = surface_dim(stream.channel_count, radius)
    kept_idx = np.flatnonzero(keep)
    buf = np.empty((min(chunk, max(kept_idx.size, 1)), dim))
    done = 0
    start = 0
    while done < kept_idx.size:
        end = min(done + buf.shape[0], kept_idx.size)
        stop = int(kept_idx[end - 1]) + 1
        got = _run(last_t, stream.x, stream.y, stream.t, cs, start, stop,
                   radius, 1.0 / tau, keep, buf)
        yield kept_idx[done:end], buf[:got]
        done, start = end, stop


def stream_surfaces(stream: EventStream, radius: int, tau: float,
                    keep: np.ndarray | None = None) -> np.ndarray:
    """All requested surfaces of ``stream`` stacked into one array."""
    dim = surface_dim(stream.channel_count, radius)
    parts = [s.copy() for _, s in iter_surfaces(stream, radius, tau, keep)]
    return np.concatenate(parts) if parts else np.zeros((0, dim))
