"""Shared metric data model: label sets, samples, metric families, series identity.

Everything here is an immutable value; instances can be shared freely
between threads.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

NAME_PATTERN = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*\Z")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class MetricError(ValueError):
    """Base for metric model violations."""


class InvalidLabelName(MetricError):
    pass


class DuplicateLabel(MetricError):
    pass


class InvalidMetricName(MetricError):
    pass


class DuplicateSeries(MetricError):
    pass


class MetricKind(Enum):
    COUNTER = "counter"
    GAUGE = "gauge"


@dataclass(frozen=True)
class LabelSet:
    """An ordered, duplicate-free set of label name/value pairs.

    The canonical form is the pairs tuple sorted by name; two label sets
    compare equal iff their canonical forms are identical. Construct via
    :func:`canonicalize_labels` (or :meth:`LabelSet.of`), which sorts and
    validates.
    """

    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        last = None
        for name, _ in self.pairs:
            if not NAME_PATTERN.match(name):
                raise InvalidLabelName(f"invalid label name: {name!r}")
            if last is not None and name <= last:
                if name == last:
                    raise DuplicateLabel(f"duplicate label name: {name!r}")
                raise MetricError("label pairs must be sorted by name")
            last = name

    @classmethod
    def of(cls, **labels: str) -> "LabelSet":
        return canonicalize_labels(labels.items())

    def get(self, name: str, default: str = "") -> str:
        for k, v in self.pairs:
            if k == name:
                return v
        return default

    def merged_over(self, defaults: "LabelSet") -> "LabelSet":
        """Overlay these pairs onto ``defaults``; on conflict ours win."""
        merged = dict(defaults.pairs)
        merged.update(self.pairs)
        return canonicalize_labels(merged.items())

    def project(self, names: Iterable[str]) -> "LabelSet":
        """Keep only the named labels (absent names are dropped)."""
        wanted = set(names)
        return LabelSet(tuple(p for p in self.pairs if p[0] in wanted))

    def as_dict(self) -> dict[str, str]:
        return dict(self.pairs)

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __bool__(self) -> bool:
        return bool(self.pairs)


EMPTY_LABELS = LabelSet()


def canonicalize_labels(pairs: Iterable[tuple[str, str]]) -> LabelSet:
    """Sort label pairs into canonical order, rejecting duplicates.

    Raises:
        InvalidLabelName: a name does not match ``[a-zA-Z_][a-zA-Z0-9_]*``.
        DuplicateLabel: the same name appears twice.
    """
    items = sorted(pairs, key=lambda p: p[0])
    for (a, _), (b, _) in zip(items, items[1:]):
        if a == b:
            raise DuplicateLabel(f"duplicate label name: {a!r}")
    return LabelSet(tuple((str(k), str(v)) for k, v in items))


@dataclass(frozen=True)
class Sample:
    """One observation: integer milliseconds since the epoch plus a float value.

    ``timestamp_ms`` of ``None`` means "no timestamp"; the scraper stamps
    such samples with the scrape start time.
    """

    timestamp_ms: int | None
    value: float

    def __post_init__(self) -> None:
        if self.timestamp_ms is not None and self.timestamp_ms < 0:
            raise MetricError(f"negative timestamp: {self.timestamp_ms}")


@dataclass(frozen=True)
class MetricFamily:
    """A named metric with its kind, help text, and series.

    No two series in one family may share a label set.
    """

    name: str
    kind: MetricKind
    help: str = ""
    series: tuple[tuple[LabelSet, Sample], ...] = ()

    def __post_init__(self) -> None:
        if not NAME_PATTERN.match(self.name):
            raise InvalidMetricName(f"invalid metric name: {self.name!r}")
        seen = set()
        for labels, _ in self.series:
            if labels.pairs in seen:
                raise DuplicateSeries(
                    f"family {self.name!r} has two series with labels {labels.pairs!r}"
                )
            seen.add(labels.pairs)


@dataclass(frozen=True)
class SeriesKey:
    """Identity of one time series: metric name, labels, and a stable 64-bit id.

    The id is FNV-1a over the canonical byte encoding
    ``name \\x00 l1 \\x01 v1 \\x00 l2 \\x01 v2 \\x00 ...`` and is a pure
    function of (name, canonical labels).
    """

    metric_name: str
    labels: LabelSet
    id: int = field(compare=False)

    @property
    def sort_key(self) -> tuple[str, tuple[tuple[str, str], ...]]:
        return (self.metric_name, self.labels.pairs)


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _U64_MASK
    return h


def _canonical_encoding(name: str, labels: LabelSet) -> bytes:
    parts = [name.encode("utf-8"), b"\x00"]
    for k, v in labels.pairs:
        parts.append(k.encode("utf-8"))
        parts.append(b"\x01")
        parts.append(v.encode("utf-8"))
        parts.append(b"\x00")
    return b"".join(parts)


def series_key(name: str, labels: LabelSet | Mapping[str, str] = EMPTY_LABELS) -> SeriesKey:
    """Build the :class:`SeriesKey` for a metric name and label set.

    Raises:
        InvalidMetricName: the name does not match the identifier grammar.
    """
    if not NAME_PATTERN.match(name):
        raise InvalidMetricName(f"invalid metric name: {name!r}")
    if not isinstance(labels, LabelSet):
        labels = canonicalize_labels(labels.items())
    return SeriesKey(name, labels, fnv1a_64(_canonical_encoding(name, labels)))
