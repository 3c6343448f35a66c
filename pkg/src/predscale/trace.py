"""Request traces and the windowed views the load generator works from.

A trace is a sorted list of arrival instants (seconds since the trace
epoch). Two on-disk forms are supported: a line-oriented text format
(one decimal timestamp per line, ``#`` comments) and raw fixed-width
binary records whose layout is supplied by the caller.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np


class TraceError(ValueError):
    """Base class for trace problems."""


class TraceParseError(TraceError):
    def __init__(self, line_no: int, line: str, reason: str = "not a decimal timestamp"):
        self.line_no = line_no
        self.line = line
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class TraceValidationError(TraceError):
    pass


class TraceTruncationError(TraceError):
    pass


@dataclass(frozen=True, order=True)
class TraceEvent:
    timestamp: float

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise TraceValidationError(f"negative or NaN timestamp: {self.timestamp}")


@dataclass(frozen=True)
class RateSeries:
    bucket_width: float
    counts: tuple[int, ...]
    origin: float = 0.0

    @property
    def rates(self) -> np.ndarray:
        """Requests per second in each bucket."""
        return np.asarray(self.counts, dtype=float) / self.bucket_width

    def bucket_starts(self) -> np.ndarray:
        return self.origin + self.bucket_width * np.arange(len(self.counts))


@dataclass(frozen=True)
class BinaryRecordLayout:
    record_size: int
    timestamp_offset: int = 0
    timestamp_width: int = 4
    endianness: str = "big"
    timestamp_unit: str = "seconds"

    def __post_init__(self):
        if self.record_size <= 0 or self.timestamp_width <= 0 or self.timestamp_offset < 0:
            raise TraceValidationError("record_size and timestamp_width must be positive")
        if self.timestamp_offset + self.timestamp_width > self.record_size:
            raise TraceValidationError(
                f"timestamp field [{self.timestamp_offset}, "
                f"{self.timestamp_offset + self.timestamp_width}) exceeds record_size {self.record_size}"
            )
        if self.endianness not in ("big", "little"):
            raise TraceValidationError(f"endianness must be 'big' or 'little', got {self.endianness!r}")
        if self.timestamp_unit not in ("seconds", "milliseconds"):
            raise TraceValidationError(f"unknown timestamp_unit {self.timestamp_unit!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryRecordLayout":
        known = {"record_size", "timestamp_offset", "timestamp_width", "endianness", "timestamp_unit"}
        extra = set(d) - known
        if extra:
            raise TraceValidationError(f"unknown layout keys: {sorted(extra)}")
        return cls(**d)


def _as_bytes(data) -> bytes:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return bytes(data)
    return data.read()


def parse_text_trace(data: bytes | BinaryIO) -> list[TraceEvent]:
    """Parse the canonical text format. Out-of-order lines are sorted."""
    text = _as_bytes(data).decode("utf-8")
    times = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            t = float(line)
        except ValueError:
            raise TraceParseError(line_no, raw) from None
        if not math.isfinite(t):
            raise TraceParseError(line_no, raw, "non-finite timestamp")
        if t < 0:
            raise TraceValidationError(f"line {line_no}: negative timestamp {t}")
        times.append(t)
    times.sort()
    return [TraceEvent(t) for t in times]


def format_text_trace(events: Iterable[TraceEvent], header: str | None = None) -> bytes:
    buf = io.StringIO()
    if header:
        for h in header.splitlines():
            buf.write(f"# {h}\n")
    for ev in events:
        # repr keeps the float exact so the file re-parses identically
        buf.write(f"{ev.timestamp!r}\n")
    return buf.getvalue().encode("utf-8")


def parse_binary_trace(data: bytes | BinaryIO, layout: BinaryRecordLayout,
                       rebase: bool = False) -> list[TraceEvent]:
    """Decode fixed-width records, one event per record."""
    raw = _as_bytes(data)
    if len(raw) % layout.record_size:
        raise TraceTruncationError(
            f"{len(raw)} bytes is not a multiple of record_size {layout.record_size} "
            f"({len(raw) % layout.record_size} trailing bytes)"
        )
    scale = 1e-3 if layout.timestamp_unit == "milliseconds" else 1.0
    start, stop = layout.timestamp_offset, layout.timestamp_offset + layout.timestamp_width
    times = []
    for off in range(0, len(raw), layout.record_size):
        field = raw[off + start: off + stop]
        value = int.from_bytes(field, layout.endianness, signed=False)
        t = value * scale
        if not math.isfinite(t) or t > 2.0 ** 53:
            raise TraceValidationError(f"record {off // layout.record_size}: timestamp {value} overflows")
        times.append(t)
    if rebase and times:
        t0 = min(times)
        times = [t - t0 for t in times]
    times.sort()
    return [TraceEvent(t) for t in times]


def pack_binary_trace(timestamps: Sequence[int], layout: BinaryRecordLayout, fill: int = 0) -> bytes:
    """Build records holding the given integer timestamps; other bytes are ``fill``."""
    out = bytearray()
    for ts in timestamps:
        rec = bytearray([fill]) * layout.record_size
        rec[layout.timestamp_offset: layout.timestamp_offset + layout.timestamp_width] = int(ts).to_bytes(
            layout.timestamp_width, layout.endianness, signed=False)
        out += rec
    return bytes(out)


def slice_window(events: Sequence[TraceEvent], start: float, duration: float) -> list[TraceEvent]:
    """Events with ``start <= t < start + duration``, rebased to the window start."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    end = start + duration
    return [TraceEvent(ev.timestamp - start) for ev in events if start <= ev.timestamp < end]


def to_rate_series(events: Sequence[TraceEvent], bucket_width: float, origin: float = 0.0) -> RateSeries:
    if not bucket_width > 0:
        raise ValueError(f"bucket_width must be positive, got {bucket_width}")
    if not events:
        return RateSeries(bucket_width, (), origin)
    t = np.fromiter((ev.timestamp for ev in events), dtype=float, count=len(events)) - origin
    if t.min() < 0:
        raise ValueError("events precede the series origin")
    idx = np.floor(t / bucket_width).astype(np.int64)
    counts = np.bincount(idx)
    return RateSeries(bucket_width, tuple(int(c) for c in counts), origin)


def load_trace(path, fmt: str = "text", layout: BinaryRecordLayout | None = None,
               rebase: bool = False) -> list[TraceEvent]:
    with open(path, "rb") as fh:
        if fmt == "text":
            events = parse_text_trace(fh)
            if rebase and events:
                t0 = events[0].timestamp
                events = [TraceEvent(ev.timestamp - t0) for ev in events]
            return events
        if fmt == "binary":
            if layout is None:
                raise TraceValidationError("binary traces need a record layout")
            return parse_binary_trace(fh, layout, rebase=rebase)
    raise TraceValidationError(f"unknown trace format {fmt!r}")


def synthetic_bursty_trace(duration: float = 1800.0, base_rate: float = 6.0,
                           bursts: Sequence[tuple[float, float, float]] | None = None,
                           seed: int = 1998) -> list[TraceEvent]:
    """Non-homogeneous Poisson arrivals: a flat base rate plus Gaussian bursts.

    ``bursts`` holds ``(centre_s, peak_extra_rate, width_s)`` triples. Arrivals
    are drawn by thinning and rounded to whole milliseconds.
    """
    if bursts is None:
        bursts = DEFAULT_BURSTS
    rng = np.random.default_rng(seed)
    centres = np.array([b[0] for b in bursts], dtype=float)
    peaks = np.array([b[1] for b in bursts], dtype=float)
    widths = np.array([b[2] for b in bursts], dtype=float)

    def rate(t):
        t = np.atleast_1d(t)[:, None]
        return base_rate + (peaks * np.exp(-0.5 * ((t - centres) / widths) ** 2)).sum(axis=1)

    lam_max = base_rate + peaks.sum()
    n = rng.poisson(lam_max * duration)
    cand = np.sort(rng.uniform(0.0, duration, n))
    keep = rng.uniform(0.0, lam_max, n) < rate(cand)
    times = np.round(cand[keep], 3)
    times = times[times < duration]
    return [TraceEvent(float(t)) for t in times]


# (centre, extra req/s at peak, width) -- sharp surges separated by quiet spells
DEFAULT_BURSTS = (
    (150.0, 40.0, 25.0),
    (420.0, 80.0, 40.0),
    (700.0, 30.0, 15.0),
    (960.0, 100.0, 50.0),
    (1250.0, 60.0, 20.0),
    (1100.0, 200.0, 6.0),
    (1520.0, 90.0, 35.0),
)
