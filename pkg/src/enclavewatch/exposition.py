"""Text exposition codec for `/metrics` bodies.

The wire format, byte-exact:

    # HELP <name> <escaped-help>
    # TYPE <name> counter|gauge
    <name>[_total]{<label>="<escaped-value>",...} <value> [<timestamp-ms>]
    ...
    # EOF

Counters carry the ``_total`` suffix on sample lines only; the family name
stored in the model omits it. The label brace block is omitted for an empty
label set, and the timestamp column is omitted for samples without one.
Help text escapes ``\\`` and ``\\n``; label values additionally escape
``\\"``. Values are the shortest decimal that round-trips, with ``+Inf``,
``-Inf``, and ``NaN`` literals.

``decode`` accepts exactly the encoder's shape, except that the HELP line
may be missing. A document that does not end with ``# EOF`` is rejected.
Served with content type :data:`CONTENT_TYPE`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .model import (
    DuplicateSeries,
    LabelSet,
    MetricFamily,
    MetricKind,
    Sample,
    canonicalize_labels,
)

CONTENT_TYPE = "application/openmetrics-text; version=1.0.0; charset=utf-8"


class ExpositionError(ValueError):
    """Base for encode/decode failures."""


class MissingEof(ExpositionError):
    pass


class ExpositionSyntaxError(ExpositionError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class TypeLineMismatch(ExpositionError):
    """Sample line kind (``_total`` suffix) inconsistent with the TYPE line."""


@dataclass(frozen=True)
class ExpositionDocument:
    """An ordered set of metric families with unique names.

    Documents are always terminated: ``encode`` emits ``# EOF`` and
    ``decode`` rejects input without it.
    """

    families: tuple[MetricFamily, ...] = ()

    def __post_init__(self) -> None:
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise ExpositionError("duplicate family name in document")


def format_value(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "+Inf" if v > 0 else "-Inf"
    if v == int(v) and abs(v) < 1e17:
        return str(int(v))
    return repr(v)


def _parse_value(token: str, line_no: int) -> float:
    if token == "+Inf":
        return math.inf
    if token == "-Inf":
        return -math.inf
    if token == "NaN":
        return math.nan
    # reject forms float() tolerates but the grammar does not (inf/nan
    # spellings, underscores, leading +, dangling dot or exponent)
    if (
        not token
        or token[0] == "+"
        or token[-1] in ".eE"
        or any(c not in "0123456789.eE+-" for c in token)
    ):
        raise ExpositionSyntaxError(line_no, f"bad value: {token!r}")
    try:
        return float(token)
    except ValueError:
        raise ExpositionSyntaxError(line_no, f"bad value: {token!r}") from None


def _escape_help(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape_help(text: str, line_no: int) -> str:
    return _unescape(text, line_no, quote_ok=False)


def _escape_label_value(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _unescape(text: str, line_no: int, quote_ok: bool) -> str:
    if "\\" not in text:
        return text
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if i + 1 >= len(text):
            raise ExpositionSyntaxError(line_no, "dangling backslash")
        nxt = text[i + 1]
        if nxt == "\\":
            out.append("\\")
        elif nxt == "n":
            out.append("\n")
        elif nxt == '"' and quote_ok:
            out.append('"')
        else:
            raise ExpositionSyntaxError(line_no, f"invalid escape: \\{nxt}")
        i += 2
    return "".join(out)


def sample_line_name(family: MetricFamily) -> str:
    return family.name + "_total" if family.kind is MetricKind.COUNTER else family.name


def encode(doc: ExpositionDocument) -> bytes:
    out: list[str] = []
    for family in doc.families:
        out.append(f"# HELP {family.name} {_escape_help(family.help)}\n")
        out.append(f"# TYPE {family.name} {family.kind.value}\n")
        line_name = sample_line_name(family)
        for labels, sample in family.series:
            if labels:
                body = ",".join(
                    f'{k}="{_escape_label_value(v)}"' for k, v in labels.pairs
                )
                head = f"{line_name}{{{body}}}"
            else:
                head = line_name
            tail = f" {sample.timestamp_ms}" if sample.timestamp_ms is not None else ""
            out.append(f"{head} {format_value(sample.value)}{tail}\n")
    out.append("# EOF\n")
    return "".join(out).encode("utf-8")


class _FamilyBuilder:
    __slots__ = ("name", "kind", "help", "series", "seen")

    def __init__(self, name: str, help_text: str | None = None):
        self.name = name
        self.kind: MetricKind | None = None
        self.help = help_text
        self.series: list[tuple[LabelSet, Sample]] = []
        self.seen: set[tuple[tuple[str, str], ...]] = set()

    def build(self, line_no: int) -> MetricFamily:
        if self.kind is None:
            raise ExpositionSyntaxError(line_no, f"family {self.name!r} has no TYPE line")
        try:
            return MetricFamily(self.name, self.kind, self.help or "", tuple(self.series))
        except DuplicateSeries:
            raise
        except ValueError as exc:
            raise ExpositionSyntaxError(line_no, str(exc)) from None


def _parse_labels(line: str, pos: int, line_no: int) -> tuple[LabelSet, int]:
    """Parse ``{k="v",...}`` starting at the ``{``; returns (labels, index past ``}``)."""
    pairs: list[tuple[str, str]] = []
    i = pos + 1
    n = len(line)
    while True:
        if i >= n:
            raise ExpositionSyntaxError(line_no, "unterminated label block")
        if line[i] == "}":
            i += 1
            break
        eq = line.find("=", i)
        if eq < 0 or eq + 1 >= n or line[eq + 1] != '"':
            raise ExpositionSyntaxError(line_no, "malformed label pair")
        name = line[i:eq]
        j = eq + 2
        buf: list[str] = []
        while True:
            if j >= n:
                raise ExpositionSyntaxError(line_no, "unterminated label value")
            c = line[j]
            if c == "\\":
                if j + 1 >= n:
                    raise ExpositionSyntaxError(line_no, "dangling backslash")
                buf.append(line[j : j + 2])
                j += 2
                continue
            if c == '"':
                j += 1
                break
            buf.append(c)
            j += 1
        value = _unescape("".join(buf), line_no, quote_ok=True)
        pairs.append((name, value))
        if j < n and line[j] == ",":
            i = j + 1
        elif j < n and line[j] == "}":
            i = j
        else:
            raise ExpositionSyntaxError(line_no, "expected ',' or '}' after label pair")
    try:
        labels = canonicalize_labels(pairs)
    except ValueError as exc:
        raise ExpositionSyntaxError(line_no, str(exc)) from None
    return labels, i


def _parse_sample_line(line: str, line_no: int) -> tuple[str, LabelSet, Sample]:
    brace = line.find("{")
    space = line.find(" ")
    if space < 0:
        raise ExpositionSyntaxError(line_no, "sample line has no value")
    if 0 <= brace < space:
        name = line[:brace]
        labels, rest_at = _parse_labels(line, brace, line_no)
        if rest_at >= len(line) or line[rest_at] != " ":
            raise ExpositionSyntaxError(line_no, "expected space after label block")
        rest = line[rest_at + 1 :]
    else:
        name = line[:space]
        labels = LabelSet()
        rest = line[space + 1 :]
    fields = rest.split(" ")
    if len(fields) == 1:
        sample = Sample(None, _parse_value(fields[0], line_no))
    elif len(fields) == 2:
        value = _parse_value(fields[0], line_no)
        try:
            ts = int(fields[1])
        except ValueError:
            raise ExpositionSyntaxError(line_no, f"bad timestamp: {fields[1]!r}") from None
        if ts < 0:
            raise ExpositionSyntaxError(line_no, "negative timestamp")
        sample = Sample(ts, value)
    else:
        raise ExpositionSyntaxError(line_no, "too many fields on sample line")
    return name, labels, sample


def decode(data: bytes) -> ExpositionDocument:
    """Parse an exposition body.

    Raises:
        MissingEof: no terminating ``# EOF`` line.
        ExpositionSyntaxError: malformed line (with line number).
        TypeLineMismatch: sample suffix inconsistent with the declared TYPE.
        DuplicateSeries: repeated label set within one family.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ExpositionSyntaxError(0, f"invalid utf-8: {exc}") from None

    lines = text.split("\n")
    # a trailing newline leaves one empty artifact at the end
    if lines and lines[-1] == "":
        lines.pop()

    families: list[MetricFamily] = []
    names_done: set[str] = set()
    current: _FamilyBuilder | None = None
    pending_help: tuple[str, str] | None = None
    terminated = False

    def close_current(line_no: int) -> None:
        nonlocal current
        if current is not None:
            families.append(current.build(line_no))
            names_done.add(current.name)
            current = None

    for idx, line in enumerate(lines):
        line_no = idx + 1
        if terminated:
            raise ExpositionSyntaxError(line_no, "content after # EOF")
        if line == "# EOF":
            if pending_help is not None:
                raise ExpositionSyntaxError(line_no, f"HELP for {pending_help[0]!r} has no TYPE line")
            close_current(line_no)
            terminated = True
            continue
        if not line:
            raise ExpositionSyntaxError(line_no, "empty line")
        if line.startswith("# HELP "):
            if pending_help is not None:
                raise ExpositionSyntaxError(line_no, "consecutive HELP lines")
            close_current(line_no)
            body = line[len("# HELP ") :]
            name, _, help_text = body.partition(" ")
            if name in names_done:
                raise ExpositionSyntaxError(line_no, f"duplicate family {name!r}")
            pending_help = (name, _unescape_help(help_text, line_no))
            continue
        if line.startswith("# TYPE "):
            close_current(line_no)
            parts = line[len("# TYPE ") :].split(" ")
            if len(parts) != 2:
                raise ExpositionSyntaxError(line_no, "malformed TYPE line")
            name, kind_text = parts
            try:
                kind = MetricKind(kind_text)
            except ValueError:
                raise ExpositionSyntaxError(line_no, f"unsupported type {kind_text!r}") from None
            if name in names_done:
                raise ExpositionSyntaxError(line_no, f"duplicate family {name!r}")
            if pending_help is not None:
                help_name, help_text = pending_help
                pending_help = None
                if help_name != name:
                    raise ExpositionSyntaxError(line_no, "HELP/TYPE name mismatch")
                current = _FamilyBuilder(name, help_text)
            else:
                current = _FamilyBuilder(name)
            current.kind = kind
            continue
        if line.startswith("#"):
            raise ExpositionSyntaxError(line_no, "unsupported comment or metadata line")
        if pending_help is not None:
            raise ExpositionSyntaxError(line_no, f"HELP for {pending_help[0]!r} has no TYPE line")
        if current is None:
            raise ExpositionSyntaxError(line_no, "sample line before any TYPE line")
        name, labels, sample = _parse_sample_line(line, line_no)
        expected = current.name + "_total" if current.kind is MetricKind.COUNTER else current.name
        if name != expected:
            if name == current.name or name == current.name + "_total":
                raise TypeLineMismatch(
                    f"line {line_no}: sample {name!r} inconsistent with TYPE "
                    f"{current.kind.value} of {current.name!r}"
                )
            raise ExpositionSyntaxError(line_no, f"sample {name!r} for undeclared family")
        if labels.pairs in current.seen:
            raise DuplicateSeries(
                f"line {line_no}: duplicate series for {current.name!r}"
            )
        current.seen.add(labels.pairs)
        current.series.append((labels, sample))

    if not terminated:
        raise MissingEof("document does not end with # EOF")
    return ExpositionDocument(tuple(families))
