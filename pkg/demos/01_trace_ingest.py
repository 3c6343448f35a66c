"""
Reading and reshaping request traces
====================================

A trace is just a sorted list of arrival instants. This walk-through bins
the bundled half hour of bursty traffic into the 5 s batches the load
generator fires. At the end a small trace makes a round trip through a
fixed-width binary record layout like the one used by large web access logs.
"""

import numpy as np

from predscale.harness import builtin_path
from predscale.trace import (
    BinaryRecordLayout,
    load_trace,
    pack_binary_trace,
    parse_binary_trace,
    slice_window,
    to_rate_series,
)

# The bundled trace: ~49k arrivals over 1800 s.
events = load_trace(builtin_path("bursty_30min.txt"))
print(f"{len(events)} events, first {events[0].timestamp:.3f}s, last {events[-1].timestamp:.3f}s")

# Group into 5 s buckets. Each bucket becomes one concurrent batch later on.
series = to_rate_series(events, 5.0)
counts = np.array(series.counts)
print(f"{len(counts)} buckets, median {np.median(counts):.0f} requests, peak {counts.max()} "
      f"at t={series.bucket_starts()[counts.argmax()]:.0f}s")

# A crude text sparkline of the per-minute request rate.
per_minute = counts.reshape(-1, 12).sum(axis=1)
bars = " .:-=+*#%@"
scale = per_minute.max() / (len(bars) - 1)
print("per-minute load:", "".join(bars[int(v / scale)] for v in per_minute))

# Cut a ten-minute window out of the middle; timestamps are rebased to 0.
window = slice_window(events, 600.0, 600.0)
print(f"window [600, 1200): {len(window)} events, first at {window[0].timestamp:.3f}s")

# Binary traces: 20-byte records with a big-endian uint32 seconds field at
# offset 0. The remaining bytes are ignored when parsing.
layout = BinaryRecordLayout(record_size=20, timestamp_offset=0, timestamp_width=4,
                            endianness="big", timestamp_unit="seconds")
raw = pack_binary_trace([894_000_000 + s for s in (0, 0, 1, 4, 9)], layout)
print(f"{len(raw)} bytes ->", [e.timestamp for e in parse_binary_trace(raw, layout, rebase=True)])
