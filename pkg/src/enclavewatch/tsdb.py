"""Embedded time-series store with label-dimensional selection and aggregation.

Samples append into per-series chunks capped at 240 samples (20 minutes at
the 5 s scrape default); chunking is invisible to queries. Aggregation
follows pull-model instant semantics: at each grid timestamp T the value of
a series is its most recent sample in the lookback window (T - step, T];
series with no sample in the window contribute nothing. ``rate`` is
computed per series over all window samples with counter-reset adjustment
(every decrease adds the previous raw value before differencing), then
summed across the group.

An optional append-only snapshot log makes the store crash-recoverable:
magic ``EWT1`` followed by series-definition and sample records; recovery
replays the file, tolerating a truncated tail.
"""
from __future__ import annotations

import bisect
import math
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field

from .model import LabelSet, Sample, SeriesKey, canonicalize_labels, series_key

CHUNK_MAX_SAMPLES = 240
SNAPSHOT_MAGIC = b"EWT1"

_REC_SERIES = 1
_REC_SAMPLE = 2
_SAMPLE_STRUCT = struct.Struct("<Qqd")

AGG_FUNCTIONS = ("sum", "avg", "min", "max", "count", "rate", "quantile")


class OutOfOrderSample(ValueError):
    pass


class NonFiniteValue(ValueError):
    pass


class BadRegex(ValueError):
    pass


class QuantileOutOfRange(ValueError):
    pass


@dataclass
class SeriesChunk:
    """A contiguous, strictly time-ordered block of one series' samples."""

    series: SeriesKey
    timestamps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    @property
    def start_ms(self) -> int:
        return self.timestamps[0]

    @property
    def end_ms(self) -> int:
        return self.timestamps[-1]

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class LabelMatcher:
    name: str
    op: str  # "==", "!=", "=~"
    value: str

    def __post_init__(self) -> None:
        if self.op not in ("==", "!=", "=~"):
            raise ValueError(f"unknown matcher op {self.op!r}")


MATCHER_SYNTAX = re.compile(r"(?s)([a-zA-Z_][a-zA-Z0-9_]*)(=~|!=|==)(.*)\Z")


def parse_matcher(text: str) -> LabelMatcher:
    """Parse ``name==value`` / ``name!=value`` / ``name=~regex``."""
    m = MATCHER_SYNTAX.match(text)
    if not m:
        raise ValueError(f"malformed matcher {text!r}")
    name, op, value = m.group(1), m.group(2), m.group(3)
    return LabelMatcher(name, op, value)


@dataclass(frozen=True)
class Selector:
    metric_name: str
    matchers: tuple[LabelMatcher, ...] = ()

    def __post_init__(self) -> None:
        if not self.metric_name:
            raise ValueError("metric name must be non-empty")


@dataclass(frozen=True)
class AggSpec:
    func: str
    q: float | None = None
    group_by: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.func not in AGG_FUNCTIONS:
            raise ValueError(f"unknown aggregation {self.func!r}")
        if self.func == "quantile":
            if self.q is None:
                raise QuantileOutOfRange("quantile requires a q parameter")
            if not 0.0 <= self.q <= 1.0:
                raise QuantileOutOfRange(f"q must be in [0, 1], got {self.q}")


@dataclass(frozen=True)
class QuerySpec:
    selector: Selector
    start_ms: int
    end_ms: int
    step_ms: int
    agg: AggSpec | None = None

    def __post_init__(self) -> None:
        if self.start_ms > self.end_ms:
            raise ValueError("start_ms must be <= end_ms")
        if self.step_ms <= 0:
            raise ValueError("step_ms must be positive")


def _compile_matchers(matchers: tuple[LabelMatcher, ...]):
    compiled = []
    for m in matchers:
        if m.op == "=~":
            try:
                compiled.append((m.name, m.op, re.compile(m.value)))
            except re.error as exc:
                raise BadRegex(f"bad regex {m.value!r}: {exc}") from None
        else:
            compiled.append((m.name, m.op, m.value))
    return compiled


def _matches(labels: LabelSet, compiled) -> bool:
    for name, op, value in compiled:
        got = labels.get(name, "")
        if op == "==":
            if got != value:
                return False
        elif op == "!=":
            if got == value:
                return False
        else:
            if not value.fullmatch(got):
                return False
    return True


def quantile_interpolated(sorted_values: list[float], q: float) -> float:
    """Linear interpolation at position (n - 1) * q over sorted values."""
    n = len(sorted_values)
    if n == 1:
        return sorted_values[0]
    pos = (n - 1) * q
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


def counter_rate(timestamps: list[int], values: list[float]) -> float | None:
    """Per-second increase over the window, reset-adjusted.

    Every decrease adds the previous raw value before differencing, so a
    counter restart does not produce a negative rate. Needs two samples
    spanning nonzero time.
    """
    if len(values) < 2 or timestamps[-1] == timestamps[0]:
        return None
    correction = 0.0
    for prev, cur in zip(values, values[1:]):
        if cur < prev:
            correction += prev
    delta = values[-1] + correction - values[0]
    return delta / ((timestamps[-1] - timestamps[0]) / 1000.0)


class _SeriesData:
    __slots__ = ("key", "chunks")

    def __init__(self, key: SeriesKey):
        self.key = key
        self.chunks: list[SeriesChunk] = []

    @property
    def last_ms(self) -> int | None:
        return self.chunks[-1].end_ms if self.chunks else None

    def append(self, ts: int, value: float) -> None:
        if not self.chunks or len(self.chunks[-1]) >= CHUNK_MAX_SAMPLES or ts < self.chunks[-1].start_ms:
            self.chunks.append(SeriesChunk(self.key))
        chunk = self.chunks[-1]
        chunk.timestamps.append(ts)
        chunk.values.append(value)

    def range(self, start_ms: int, end_ms: int) -> tuple[list[int], list[float]]:
        times: list[int] = []
        values: list[float] = []
        for chunk in self.chunks:
            if chunk.end_ms < start_ms or chunk.start_ms > end_ms:
                continue
            lo = bisect.bisect_left(chunk.timestamps, start_ms)
            hi = bisect.bisect_right(chunk.timestamps, end_ms)
            times.extend(chunk.timestamps[lo:hi])
            values.extend(chunk.values[lo:hi])
        return times, values


class _SnapshotLog:
    def __init__(self, path: str):
        self.path = path
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "ab")
        if fresh:
            self._fh.write(SNAPSHOT_MAGIC)
            self._fh.flush()

    def write_series(self, key: SeriesKey) -> None:
        name = key.metric_name.encode("utf-8")
        parts = [bytes([_REC_SERIES]), struct.pack("<QH", key.id, len(name)), name]
        parts.append(struct.pack("<H", len(key.labels)))
        for k, v in key.labels.pairs:
            kb, vb = k.encode("utf-8"), v.encode("utf-8")
            parts.append(struct.pack("<H", len(kb)))
            parts.append(kb)
            parts.append(struct.pack("<I", len(vb)))
            parts.append(vb)
        self._fh.write(b"".join(parts))

    def write_sample(self, series_id: int, ts: int, value: float) -> None:
        self._fh.write(bytes([_REC_SAMPLE]) + _SAMPLE_STRUCT.pack(series_id, ts, value))

    def flush(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        try:
            self.flush()
        finally:
            self._fh.close()


def _replay_snapshot(path: str):
    """Yield ('series', key) and ('sample', id, ts, value) records.

    Stops silently at a truncated tail so a crash mid-write loses at most
    the final record.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad snapshot magic")
    pos = 4
    n = len(data)
    while pos < n:
        rec = data[pos]
        pos += 1
        if rec == _REC_SERIES:
            if pos + 10 > n:
                return
            sid, name_len = struct.unpack_from("<QH", data, pos)
            pos += 10
            if pos + name_len + 2 > n:
                return
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (n_labels,) = struct.unpack_from("<H", data, pos)
            pos += 2
            pairs = []
            for _ in range(n_labels):
                if pos + 2 > n:
                    return
                (klen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                if pos + klen + 4 > n:
                    return
                k = data[pos : pos + klen].decode("utf-8")
                pos += klen
                (vlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + vlen > n:
                    return
                v = data[pos : pos + vlen].decode("utf-8")
                pos += vlen
                pairs.append((k, v))
            yield ("series", series_key(name, canonicalize_labels(pairs)))
        elif rec == _REC_SAMPLE:
            if pos + _SAMPLE_STRUCT.size > n:
                return
            sid, ts, value = _SAMPLE_STRUCT.unpack_from(data, pos)
            pos += _SAMPLE_STRUCT.size
            yield ("sample", sid, ts, value)
        else:
            return  # unknown record: treat as corruption, stop


class MetricStore:
    """The TSDB. Thread-safe: one internal lock guards all structures, so
    readers always observe a consistent prefix of each series."""

    def __init__(self, snapshot_path: str | None = None, now_fn=None):
        self._lock = threading.RLock()
        self._series: dict[int, _SeriesData] = {}
        self._keys: dict[int, SeriesKey] = {}
        self._now_fn = now_fn if now_fn is not None else lambda: int(time.time() * 1000)
        self._log: _SnapshotLog | None = None
        self._logged_ids: set[int] = set()
        if snapshot_path:
            if os.path.exists(snapshot_path) and os.path.getsize(snapshot_path) > 0:
                self._recover(snapshot_path)
            self._log = _SnapshotLog(snapshot_path)
            self._logged_ids = set(self._keys)

    def _recover(self, path: str) -> None:
        for record in _replay_snapshot(path):
            if record[0] == "series":
                key = record[1]
                self._keys[key.id] = key
                self._series.setdefault(key.id, _SeriesData(key))
            else:
                _, sid, ts, value = record
                data = self._series.get(sid)
                if data is None:
                    continue  # sample for unknown series: corrupt, skip
                last = data.last_ms
                if last is not None and ts <= last:
                    continue
                data.append(ts, value)

    # -- writes ---------------------------------------------------------

    def _validate(self, key: SeriesKey, sample: Sample) -> int:
        if sample.timestamp_ms is None:
            raise ValueError(f"sample for {key.metric_name} has no timestamp")
        if not math.isfinite(sample.value):
            raise NonFiniteValue(
                f"non-finite value {sample.value!r} for {key.metric_name}"
            )
        return sample.timestamp_ms

    def _append_locked(self, key: SeriesKey, ts: int, value: float) -> None:
        data = self._series.get(key.id)
        if data is None:
            data = _SeriesData(key)
            self._series[key.id] = data
            self._keys[key.id] = key
        last = data.last_ms
        if last is not None and ts <= last:
            raise OutOfOrderSample(
                f"{key.metric_name}: timestamp {ts} <= last stored {last}"
            )
        data.append(ts, value)
        if self._log is not None:
            if key.id not in self._logged_ids:
                self._log.write_series(key)
                self._logged_ids.add(key.id)
            self._log.write_sample(key.id, ts, value)

    def append(self, key: SeriesKey, sample: Sample) -> None:
        ts = self._validate(key, sample)
        with self._lock:
            self._append_locked(key, ts, sample.value)

    def append_many(self, items: list[tuple[SeriesKey, Sample]]) -> None:
        """Append a batch atomically: validates everything first, so either
        every sample lands or none do."""
        with self._lock:
            batch_last: dict[int, int] = {}
            for key, sample in items:
                ts = self._validate(key, sample)
                data = self._series.get(key.id)
                last = batch_last.get(key.id)
                if last is None and data is not None:
                    last = data.last_ms
                if last is not None and ts <= last:
                    raise OutOfOrderSample(
                        f"{key.metric_name}: timestamp {ts} <= last stored {last}"
                    )
                batch_last[key.id] = ts
            for key, sample in items:
                self._append_locked(key, sample.timestamp_ms, sample.value)

    # -- reads ----------------------------------------------------------

    def metric_names(self) -> list[str]:
        with self._lock:
            return sorted({k.metric_name for k in self._keys.values()})

    def _match_series(self, selector: Selector) -> list[_SeriesData]:
        compiled = _compile_matchers(selector.matchers)
        with self._lock:
            found = [
                data
                for data in self._series.values()
                if data.key.metric_name == selector.metric_name
                and _matches(data.key.labels, compiled)
            ]
        found.sort(key=lambda d: d.key.sort_key)
        return found

    def select_range(self, query: QuerySpec) -> list[tuple[SeriesKey, list[Sample]]]:
        out = []
        for data in self._match_series(query.selector):
            with self._lock:
                times, values = data.range(query.start_ms, query.end_ms)
            out.append((data.key, [Sample(t, v) for t, v in zip(times, values)]))
        return out

    def evaluate(self, query: QuerySpec) -> list[tuple[LabelSet, list[tuple[int, float]]]]:
        """Aggregate on the step-aligned grid over [start_ms, end_ms].

        Returns one (group labels, [(grid_ms, value), ...]) entry per
        group-by projection, groups sorted by label set; grid points where
        no series contributes are omitted.
        """
        agg = query.agg
        if agg is None:
            raise ValueError("evaluate requires an aggregation; use select_range")
        matched = self._match_series(query.selector)
        grid = range(query.start_ms, query.end_ms + 1, query.step_ms)

        with self._lock:
            windows = []
            for data in matched:
                group = data.key.labels.project(agg.group_by)
                times, values = data.range(query.start_ms - query.step_ms, query.end_ms)
                windows.append((group, times, values))

        groups: dict[tuple, tuple[LabelSet, list[tuple[int, float]]]] = {}
        for t in grid:
            lo = t - query.step_ms
            per_group: dict[tuple, list[float]] = {}
            for group, times, values in windows:
                i = bisect.bisect_right(times, lo)
                j = bisect.bisect_right(times, t)
                if i >= j:
                    continue  # stale: nothing in (t - step, t]
                if agg.func == "rate":
                    rate = counter_rate(times[i:j], values[i:j])
                    if rate is None:
                        continue
                    contribution = rate
                else:
                    contribution = values[j - 1]
                per_group.setdefault(group.pairs, []).append(contribution)
            for pairs, contributions in per_group.items():
                value = _aggregate(agg, contributions)
                if pairs not in groups:
                    groups[pairs] = (LabelSet(pairs), [])
                groups[pairs][1].append((t, value))
        return [groups[pairs] for pairs in sorted(groups)]

    def gc(self, retention_ms: int, now_ms: int | None = None) -> int:
        """Drop chunks that ended before now - retention_ms; returns count."""
        if retention_ms <= 0:
            raise ValueError("retention_ms must be positive")
        cutoff = (now_ms if now_ms is not None else self._now_fn()) - retention_ms
        purged = 0
        with self._lock:
            dead = []
            for sid, data in self._series.items():
                keep = [c for c in data.chunks if c.end_ms >= cutoff]
                purged += len(data.chunks) - len(keep)
                data.chunks = keep
                if not keep:
                    dead.append(sid)
            for sid in dead:
                del self._series[sid]
                del self._keys[sid]
        return purged

    def flush(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.flush()

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None


def _aggregate(agg: AggSpec, contributions: list[float]) -> float:
    func = agg.func
    if func == "sum" or func == "rate":  # rate is per-series, grouped by sum
        return sum(contributions)
    if func == "avg":
        return sum(contributions) / len(contributions)
    if func == "min":
        return min(contributions)
    if func == "max":
        return max(contributions)
    if func == "count":
        return float(len(contributions))
    if func == "quantile":
        return quantile_interpolated(sorted(contributions), agg.q)
    raise AssertionError(func)
