"""Address-event streams: data model, text/binary file formats and a
synthetic change-detector scene generator.

Streams are stored column-wise (one numpy array per field) because layer
outputs grow to millions of events; single events are exposed as
:class:`Event` tuples only for convenience.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

SENSOR = "sensor"
LAYER = "layer"
_SEMANTICS = (SENSOR, LAYER)

TEXT_MAGIC = "# evs v1"
BINARY_MAGIC = b"EVS1"
_BIN_HEADER = struct.Struct("<4sHHHB")
_BIN_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "<i2")])
_HEADER_RE = re.compile(
    r"^# evs v1 w=(\d+) h=(\d+) c=(\d+) sem=(sensor|layer)$"
)
_INT64_MAX = np.iinfo(np.int64).max


class EventFormatError(ValueError):
    """Raised for malformed event files or streams violating their invariants."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _column(values, dtype) -> np.ndarray:
    raw = np.asarray(values)
    if raw.size and raw.dtype != dtype:
        info = np.iinfo(dtype)
        if raw.dtype.kind not in "iu" or raw.min() < info.min or raw.max() > info.max:
            raise EventFormatError(f"field values do not fit {np.dtype(dtype).name}")
    arr = np.ascontiguousarray(raw, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventStream:
    """An immutable, validated, time-ordered event stream.

    ``semantics`` is ``"sensor"`` (polarities -1/+1, two channels) or
    ``"layer"`` (feature channels ``1..channel_count``).
    """

    width: int
    height: int
    channel_count: int
    semantics: str = SENSOR
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))

    def __post_init__(self):
        for name in ("x", "y", "p"):
            object.__setattr__(self, name, _column(getattr(self, name), np.int32))
        object.__setattr__(self, "t", _column(self.t, np.int64))
        _validate(self)

    @classmethod
    def from_events(cls, events: Iterable[Sequence[int]], width: int, height: int,
                    channel_count: int, semantics: str = SENSOR) -> "EventStream":
        rows = np.asarray(list(events), dtype=np.int64).reshape(-1, 4)
        return cls(width, height, channel_count, semantics,
                   rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(),
                              self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.geometry == other.geometry
                and self.channel_count == other.channel_count
                and self.semantics == other.semantics
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in "xytp"))

    __hash__ = None

    def __repr__(self) -> str:
        return (f"EventStream({self.width}x{self.height}, c={self.channel_count}, "
                f"sem={self.semantics}, n={len(self)})")

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)

    def channel_index(self) -> np.ndarray:
        """Zero-based channel plane of every event (sensor: -1 -> 0, +1 -> 1)."""
        if self.semantics == SENSOR:
            return ((self.p + 1) // 2).astype(np.int32)
        return (self.p - 1).astype(np.int32)

    def with_channel_count(self, channel_count: int) -> "EventStream":
        return EventStream(self.width, self.height, channel_count, self.semantics,
                           self.x, self.y, self.t, self.p)


def _validate(s: EventStream) -> None:
    if s.semantics not in _SEMANTICS:
        raise EventFormatError(f"unknown semantics {s.semantics!r}")
    if s.width <= 0 or s.height <= 0 or s.channel_count <= 0:
        raise EventFormatError("geometry and channel count must be positive")
    if s.semantics == SENSOR and s.channel_count != 2:
        raise EventFormatError("sensor streams carry exactly 2 channels")
    n = s.t.shape[0]
    if not (s.x.shape[0] == s.y.shape[0] == s.p.shape[0] == n):
        raise EventFormatError("field arrays differ in length")
    if n == 0:
        return

    def first(mask, what):
        bad = np.flatnonzero(mask)
        if bad.size:
            raise EventFormatError(f"{what} at record {bad[0] + 1}")

    first(s.t < 0, "negative timestamp")
    first((s.x < 0) | (s.x >= s.width) | (s.y < 0) | (s.y >= s.height),
          "coordinate out of declared geometry")
    if s.semantics == SENSOR:
        first((s.p != 1) & (s.p != -1), "invalid channel")
    else:
        first((s.p < 1) | (s.p > s.channel_count), "invalid channel")
    regress = np.flatnonzero(np.diff(s.t) < 0)
    if regress.size:
        raise EventFormatError(f"timestamp regression at record {regress[0] + 2}")


# ---------------------------------------------------------------------------
# file formats

def write_events(stream: EventStream, fmt: str = "text") -> bytes:
    if fmt == "text":
        head = (f"{TEXT_MAGIC} w={stream.width} h={stream.height} "
                f"c={stream.channel_count} sem={stream.semantics}\n")
        cols = np.stack([stream.x, stream.y, stream.t, stream.p], axis=1)
        body = "".join(f"{a},{b},{c},{d}\n" for a, b, c, d in cols.tolist())
        return (head + body).encode("ascii")
    if fmt == "binary":
        head = _BIN_HEADER.pack(BINARY_MAGIC, stream.width, stream.height,
                                stream.channel_count,
                                _SEMANTICS.index(stream.semantics))
        rec = np.empty(len(stream), dtype=_BIN_RECORD)
        rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
        return head + rec.tobytes()
    raise ValueError(f"unknown event format {fmt!r}")


def parse_events(source: bytes, fmt: str | None = None) -> EventStream:
    """Parse ``source`` as text or binary; ``fmt=None`` sniffs the magic."""
    if fmt is None:
        fmt = "binary" if source[:4] == BINARY_MAGIC else "text"
    if fmt == "text":
        return _parse_text(source)
    if fmt == "binary":
        return _parse_binary(source)
    raise ValueError(f"unknown event format {fmt!r}")


def _parse_text(source: bytes) -> EventStream:
    try:
        text = source.decode("ascii")
    except UnicodeDecodeError as exc:
        raise EventFormatError(f"non-ascii byte at offset {exc.start}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EventFormatError("missing header line")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise EventFormatError(f"line 1: malformed header {lines[0]!r}")
    w, h, c = (int(g) for g in m.groups()[:3])
    records = lines[1:]
    rows = np.zeros((len(records), 4), dtype=np.int64)
    for i, line in enumerate(records):
        parts = line.split(",")
        if len(parts) != 4 or not all(_is_int(v) for v in parts):
            raise EventFormatError(f"line {i + 2}: malformed record {line!r}")
        vals = [int(v) for v in parts]
        if not 0 <= vals[2] <= _INT64_MAX or max(abs(vals[0]), abs(vals[1]), abs(vals[3])) > 2**31 - 1:
            raise EventFormatError(f"line {i + 2}: field value out of range")
        rows[i] = vals
    return EventStream(w, h, c, m.group(4), rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


def _is_int(v: str) -> bool:
    body = v[1:] if v.startswith("-") else v
    return body.isdigit() and body.isascii()


def _parse_binary(source: bytes) -> EventStream:
    if len(source) < _BIN_HEADER.size:
        raise EventFormatError(f"offset {len(source)}: truncated header")
    magic, w, h, c, sem = _BIN_HEADER.unpack_from(source)
    if magic != BINARY_MAGIC:
        raise EventFormatError("offset 0: bad magic")
    if sem >= len(_SEMANTICS):
        raise EventFormatError(f"offset {_BIN_HEADER.size - 1}: bad semantics flag {sem}")
    body = source[_BIN_HEADER.size:]
    extra = len(body) % _BIN_RECORD.itemsize
    if extra:
        raise EventFormatError(
            f"offset {len(source) - extra}: truncated record")
    rec = np.frombuffer(body, dtype=_BIN_RECORD)
    if rec.size and rec["t"].max() > _INT64_MAX:
        bad = int(np.flatnonzero(rec["t"] > _INT64_MAX)[0])
        raise EventFormatError(f"record {bad + 1}: timestamp out of range")
    return EventStream(w, h, c, _SEMANTICS[sem], rec["x"], rec["y"],
                       rec["t"].astype(np.int64), rec["p"])


def read_events(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_events(fh.read())


def save_events(stream: EventStream, path, fmt: str = "binary") -> None:
    with open(path, "wb") as fh:
        fh.write(write_events(stream, fmt))


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True, eq=False)
class SyntheticSceneSpec:
    """A binary pattern translated along a piecewise-linear trajectory.

    ``trajectory`` holds ``(t_us, x_offset, y_offset)`` waypoints; the mask's
    top-left corner sits at the rounded offset. The trajectory is sampled
    every ``1 / event_rate_per_edge_pixel`` microseconds, so each edge pixel
    crossing yields one event at the first sample after it happens.
    """

    pattern: np.ndarray
    trajectory: tuple
    event_rate_per_edge_pixel: float = 0.01
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=bool)
        if pattern.ndim != 2 or pattern.size == 0:
            raise ValueError("pattern must be a non-empty 2-D mask")
        object.__setattr__(self, "pattern", pattern)
        traj = tuple((int(t), float(dx), float(dy)) for t, dx, dy in self.trajectory)
        if not traj:
            raise ValueError("trajectory needs at least one waypoint")
        times = [w[0] for w in traj]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")
        if times[0] < 0:
            raise ValueError("trajectory times must be non-negative")
        object.__setattr__(self, "trajectory", traj)
        if self.event_rate_per_edge_pixel <= 0:
            raise ValueError("event_rate_per_edge_pixel must be positive")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be non-negative")


def _round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def generate_scene(spec: SyntheticSceneSpec, geometry: tuple[int, int]) -> EventStream:
    """Emulate a change detector watching ``spec.pattern`` move.

    Pixels entering the mask fire ON (+1), pixels leaving it fire OFF (-1);
    within one sample time OFF events precede ON events, each in raster
    order. Uniform noise events are Poisson-sampled at ``noise_rate``
    events per pixel per second.
    """
    width, height = geometry
    mh, mw = spec.pattern.shape
    traj = np.array(spec.trajectory, dtype=float)
    wt, wx, wy = traj[:, 0], traj[:, 1], traj[:, 2]
    ox_w, oy_w = _round_half_up(wx), _round_half_up(wy)
    if (ox_w.min() < 0 or oy_w.min() < 0 or ox_w.max() + mw > width
            or oy_w.max() + mh > height):
        raise ValueError("trajectory leaves geometry")

    t0, t1 = int(wt[0]), int(wt[-1])
    period = 1.0 / spec.event_rate_per_edge_pixel
    steps = int(np.floor((t1 - t0) / period))
    ts = np.unique(np.append(t0 + _round_half_up(np.arange(steps + 1) * period), t1))
    ox = _round_half_up(np.interp(ts, wt, wx))
    oy = _round_half_up(np.interp(ts, wt, wy))

    chunks = []
    moved = np.flatnonzero((np.diff(ox) != 0) | (np.diff(oy) != 0)) + 1
    for k in moved:
        before = _place(spec.pattern, ox[k - 1], oy[k - 1], width, height)
        after = _place(spec.pattern, ox[k], oy[k], width, height)
        for pol, mask in ((-1, before & ~after), (1, after & ~before)):
            yy, xx = np.nonzero(mask)
            chunks.append(np.stack([xx, yy, np.full(xx.size, ts[k]),
                                    np.full(xx.size, pol)], axis=1))

    rng = np.random.default_rng(spec.seed)
    n_noise = rng.poisson(spec.noise_rate * width * height * (t1 - t0) / 1e6)
    if n_noise:
        chunks.append(np.stack([
            rng.integers(0, width, n_noise),
            rng.integers(0, height, n_noise),
            rng.integers(t0, t1 + 1, n_noise),
            rng.choice(np.array([-1, 1]), n_noise),
        ], axis=1))

    rows = np.concatenate(chunks) if chunks else np.zeros((0, 4), np.int64)
    rows = rows[np.argsort(rows[:, 2], kind="stable")]
    return EventStream(width, height, 2, SENSOR,
                       rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


def _place(pattern, ox, oy, width, height):
    frame = np.zeros((height, width), dtype=bool)
    mh, mw = pattern.shape
    frame[oy:oy + mh, ox:ox + mw] = pattern
    return frame
