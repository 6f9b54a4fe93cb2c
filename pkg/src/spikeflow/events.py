"""Event streams: AER file I/O, spike-frame encoding and a DVS pixel simulator.

Binary layouts (all little-endian):

* event file: ``b"AER1"``, width u16, height u16, count u64, then ``count``
  14-byte records ``x u16, y u16, t u64 (microseconds), p i8 (+1/-1), pad u8``.
* flow file: ``b"FLO1"``, width u32, height u32, then H*W float32 pairs (u, v),
  row-major.
* grayscale images: binary PGM (P5, maxval 255). The frame timestamp is kept in
  a ``# t_us=<int>`` header comment.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ContractError, DataError, FormatError, ShapeError
from .functional import bilinear_sample_array
from .tensor import Tensor

EVENT_MAGIC = b"AER1"
FLOW_MAGIC = b"FLO1"
LOG_FLOOR = 1e-4

_EVENT_HEADER = struct.Struct("<4sHHQ")
EVENT_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1"), ("pad", "u1")])
_FLOW_HEADER = struct.Struct("<4sII")


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(eq=False)
class EventStream:
    """Time-sorted events from a ``width`` x ``height`` sensor, stored column-wise."""

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ContractError("sensor dimensions must be positive")
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ContractError("event columns differ in length")
        if n:
            if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
                raise DataError("event address outside the sensor array")
            if self.t.min() < 0:
                raise DataError("negative event timestamp")
            if not np.all(np.isin(self.p, (-1, 1))):
                raise DataError("polarity must be +1 or -1")
            bad = np.flatnonzero(np.diff(self.t) < 0)
            if bad.size:
                raise DataError(f"timestamps decrease at event index {int(bad[0]) + 1}")

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        events = list(events)
        cols = np.array([[e[0], e[1], e[2], e[3]] for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height) == (other.width, other.height)
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xytp")
        )


def write_event_file(path, stream: EventStream) -> None:
    rec = np.zeros(len(stream), dtype=EVENT_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as fh:
        fh.write(_EVENT_HEADER.pack(EVENT_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def parse_event_file(path) -> EventStream:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _EVENT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, width, height, count = _EVENT_HEADER.unpack_from(raw)
    if magic != EVENT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EVENT_MAGIC!r}")
    body = raw[_EVENT_HEADER.size:]
    if len(body) != count * EVENT_RECORD.itemsize:
        raise FormatError(f"{path}: header declares {count} records but body holds {len(body)} bytes")
    if width == 0 or height == 0:
        raise FormatError(f"{path}: zero sensor dimension")
    rec = np.frombuffer(body, dtype=EVENT_RECORD)
    bad = np.flatnonzero(np.diff(rec["t"].astype(np.int64)) < 0)
    if bad.size:
        raise DataError(f"{path}: non-monotone timestamp at record index {int(bad[0]) + 1}")
    if rec.size and not np.all(np.isin(rec["p"], (-1, 1))):
        idx = int(np.flatnonzero(~np.isin(rec["p"], (-1, 1)))[0])
        raise DataError(f"{path}: invalid polarity at record index {idx}")
    return EventStream(width, height, rec["x"], rec["y"], rec["t"], rec["p"])


@dataclass
class SpikeInputSequence:
    """Binary event frames [N, 4, H, W]; channels are former-ON, former-OFF, latter-ON, latter-OFF."""

    frames: np.ndarray
    window: tuple[int, int]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def as_tensor(self) -> Tensor:
        return Tensor(self.frames)


def encode_spike_input(stream: EventStream, window: tuple[int, int], n_frames: int) -> SpikeInputSequence:
    """Split ``window`` into former/latter halves of ``n_frames`` sub-intervals each.

    A pixel is 1 in a frame/polarity channel iff at least one event of that
    polarity fell into the sub-interval. Boundary timestamps belong to the
    later sub-interval; ``t_end`` itself closes the last one. Events outside
    the window are ignored.
    """
    t0, t1 = int(window[0]), int(window[1])
    if t0 >= t1:
        raise ContractError(f"empty encoding window ({t0}, {t1})")
    if n_frames < 1:
        raise ContractError("n_frames must be >= 1")
    frames = np.zeros((n_frames, 4, stream.height, stream.width))
    sel = (stream.t >= t0) & (stream.t <= t1)
    if not sel.any():
        return SpikeInputSequence(frames, (t0, t1))
    t = stream.t[sel]
    slot = ((t - t0) * (2 * n_frames)) // (t1 - t0)
    slot = np.minimum(slot, 2 * n_frames - 1)
    latter = slot >= n_frames
    frame = np.where(latter, slot - n_frames, slot)
    channel = 2 * latter + (stream.p[sel] < 0)
    frames[frame, channel, stream.y[sel], stream.x[sel]] = 1.0
    return SpikeInputSequence(frames, (t0, t1))


@dataclass
class GrayImagePair:
    first: np.ndarray  # [H, W] in [0, 1]
    second: np.ndarray
    t_first: int = 0
    t_second: int = 0

    def __post_init__(self) -> None:
        self.first = np.asarray(self.first, dtype=np.float64)
        self.second = np.asarray(self.second, dtype=np.float64)
        if self.first.shape != self.second.shape or self.first.ndim != 2:
            raise ShapeError(f"image pair shapes differ: {self.first.shape} vs {self.second.shape}")
        for img in (self.first, self.second):
            if img.min() < 0 or img.max() > 1:
                raise DataError("grayscale intensities must lie in [0, 1]")


# -- image and flow files ---------------------------------------------------

def write_pgm(path, image: np.ndarray, t_us: int | None = None) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM image must be 2-D, got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    comment = f"# t_us={int(t_us)}\n" if t_us is not None else ""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{comment}{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _pgm_tokens(raw: bytes, path, count: int):
    tokens, comments, pos = [], [], 2
    while len(tokens) < count:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PNM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    return tokens, comments, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int | None]:
    """Return the image normalized to [0, 1] and its ``t_us`` comment, if any."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        (w, h, maxval), comments, start = _pgm_tokens(raw, path, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = raw[start:start + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    t_us = None
    for c in comments:
        if c.startswith("t_us="):
            t_us = int(c[5:])
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0, t_us


def write_ppm(path, rgb: np.ndarray) -> None:
    q = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def write_flow_file(path, flow: np.ndarray) -> None:
    """Write a [2, H, W] flow field (u, v) as float32 pairs."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be [2,H,W], got {flow.shape}")
    _, h, w = flow.shape
    pairs = np.ascontiguousarray(np.moveaxis(flow, 0, -1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, w, h))
        fh.write(pairs.tobytes())


def read_flow_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FLOW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h = _FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FLOW_MAGIC!r}")
    body = raw[_FLOW_HEADER.size:]
    if len(body) != 8 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} float pairs")
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    return np.moveaxis(pairs, -1, 0).astype(np.float64)


# -- simulation ---------------------------------------------------------------

def translate_image(texture: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Content shifted by (dx, dy) pixels, bilinear with border clamping."""
    h, w = texture.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = bilinear_sample_array(texture[None, None], (xs - dx)[None], (ys - dy)[None])
    return out[0, 0]


def synthesize_events(
    texture,
    flow: tuple[float, float],
    window: tuple[int, int],
    threshold: float,
    timesteps: int,
):
    """Translate ``texture`` by ``flow`` over the window and emit DVS events.

    Each pixel keeps a reference log intensity; whenever the current log
    intensity departs from it by at least ``threshold`` an event is emitted and
    the reference moves by one threshold step toward the signal, so any
    sub-threshold remainder carries into later sub-steps. Events crossing
    within a sub-step get linearly interpolated timestamps.

    Returns ``(stream, GrayImagePair, flow_field)`` with ``flow_field`` [2,H,W].
    """
    tex = texture.data[0, 0] if isinstance(texture, Tensor) else np.asarray(texture, dtype=np.float64)
    if tex.ndim == 4:
        tex = tex[0, 0]
    if tex.size == 0 or tex.ndim != 2:
        raise ContractError("texture must be a non-empty 2-D image")
    if threshold <= 0:
        raise ContractError("contrast threshold must be positive")
    if timesteps < 1:
        raise ContractError("timesteps must be >= 1")
    t0, t1 = int(window[0]), int(window[1])
    if t0 >= t1:
        raise ContractError(f"empty window ({t0}, {t1})")
    u, v = float(flow[0]), float(flow[1])
    h, w = tex.shape

    frames = [translate_image(tex, u * k / timesteps, v * k / timesteps) for k in range(timesteps + 1)]
    ref = np.log(np.maximum(frames[0], LOG_FLOOR))
    prev = ref.copy()
    chunks = []
    for k in range(1, timesteps + 1):
        cur = np.log(np.maximum(frames[k], LOG_FLOOR))
        ta = t0 + (t1 - t0) * (k - 1) / timesteps
        tb = t0 + (t1 - t0) * k / timesteps
        while True:
            diff = cur - ref
            fire = np.abs(diff) >= threshold
            if not fire.any():
                break
            ys, xs = np.nonzero(fire)
            pol = np.sign(diff[fire]).astype(np.int64)
            level = ref[fire] + pol * threshold
            span = cur[fire] - prev[fire]
            frac = np.where(span != 0, (level - prev[fire]) / np.where(span != 0, span, 1.0), 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts = np.floor(ta + frac * (tb - ta)).astype(np.int64)
            chunks.append(np.stack([xs, ys, np.minimum(ts, t1), pol], axis=1))
            ref[fire] = level
        prev = cur

    if chunks:
        ev = np.concatenate(chunks)
        order = np.lexsort((ev[:, 0], ev[:, 1], ev[:, 2]))
        ev = ev[order]
    else:
        ev = np.zeros((0, 4), np.int64)
    stream = EventStream(w, h, ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3])
    pair = GrayImagePair(np.clip(frames[0], 0, 1), np.clip(frames[-1], 0, 1), t0, t1)
    gt = np.stack([np.full((h, w), u), np.full((h, w), v)])
    return stream, pair, gt


def smooth_texture(size: int | tuple[int, int], rng: np.random.Generator, cell: int = 8,
                   low: float = 0.1, high: float = 0.9) -> np.ndarray:
    """Random smooth texture: coarse uniform noise bilinearly upsampled."""
    h, w = (size, size) if isinstance(size, int) else size
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    coarse = rng.uniform(low, high, size=(gh, gw))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = bilinear_sample_array(coarse[None, None], (xs / cell)[None], (ys / cell)[None])[0, 0]
    return img


def ramp_texture(size: int | tuple[int, int], low: float = 0.1, high: float = 0.9) -> np.ndarray:
    h, w = (size, size) if isinstance(size, int) else size
    row = np.linspace(low, high, w)
    return np.tile(row, (h, 1))


def load_texture(path) -> np.ndarray:
    img, _ = read_pgm(path)
    return img


def save_sample(out_dir, stream: EventStream, pair: GrayImagePair, flow: np.ndarray) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_event_file(os.path.join(out_dir, "events.aer"), stream)
    write_pgm(os.path.join(out_dir, "image0.pgm"), pair.first, pair.t_first)
    write_pgm(os.path.join(out_dir, "image1.pgm"), pair.second, pair.t_second)
    write_flow_file(os.path.join(out_dir, "flow.flo"), flow)
