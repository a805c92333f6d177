"""Metric exporters: the TEE metrics exporter and the system metrics exporter.

Each exporter is an HTTP service answering ``GET /metrics`` with the text
exposition of its sources' families (plus ``GET /healthz``). A source is
anything with a ``name`` and a ``collect() -> list[MetricFamily]`` that
snapshots its backing state atomically; reading never mutates the metrics.

The TEE source reads the driver parameter files (or a simulator handle
directly); the system source accumulates kernel-level events into labeled
cumulative counters, with per-pid cardinality capped at
:data:`PID_CARDINALITY_LIMIT` distinct values (excess folds into
``pid="other"``).
"""
from __future__ import annotations

import logging
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Protocol, Sequence

from . import exposition
from .model import EMPTY_LABELS, LabelSet, MetricFamily, MetricKind, Sample
from .sgx_sim import PARAMETER_FILES, EventKind, SgxDriver, SystemEvent

log = logging.getLogger(__name__)

PID_CARDINALITY_LIMIT = 1024


class MissingParameterFile(FileNotFoundError):
    def __init__(self, name: str):
        super().__init__(f"driver parameter file missing: {name}")
        self.name = name


class UnparsableValue(ValueError):
    def __init__(self, name: str, raw: str):
        super().__init__(f"driver parameter {name} holds non-numeric value {raw!r}")
        self.name = name


class BindError(OSError):
    pass


class MetricSource(Protocol):
    name: str

    def collect(self) -> list[MetricFamily]: ...


# (family name, kind, help); family names equal the parameter file names.
TEE_FAMILIES: tuple[tuple[str, MetricKind, str], ...] = (
    ("sgx_nr_enclaves", MetricKind.GAUGE, "Active enclaves"),
    ("sgx_nr_free_pages", MetricKind.GAUGE, "Free EPC pages"),
    ("sgx_epc_total_pages", MetricKind.GAUGE, "Total EPC pages"),
    ("sgx_pages_marked_old", MetricKind.GAUGE, "EPC pages marked old (eviction candidates)"),
    ("sgx_enclaves_initialized", MetricKind.COUNTER, "Enclaves initialized since driver load"),
    ("sgx_enclaves_removed", MetricKind.COUNTER, "Enclaves removed since driver load"),
    ("sgx_nr_evicted", MetricKind.COUNTER, "EPC pages evicted to main memory"),
    ("sgx_pages_added", MetricKind.COUNTER, "EPC pages added to enclaves"),
    ("sgx_pages_reclaimed", MetricKind.COUNTER, "EPC pages reclaimed from main memory"),
)

_FILE_TO_STATE = dict(PARAMETER_FILES)


def _tee_families_from(values: dict[str, int]) -> list[MetricFamily]:
    return [
        MetricFamily(name, kind, help_text, ((EMPTY_LABELS, Sample(None, float(values[name]))),))
        for name, kind, help_text in TEE_FAMILIES
    ]


def tee_collect(parameters_dir: str | os.PathLike) -> list[MetricFamily]:
    """Read the nine driver hook files into metric families.

    Raises:
        MissingParameterFile: a hook file is absent.
        UnparsableValue: a hook file does not hold a decimal integer.
    """
    values: dict[str, int] = {}
    for name, _, _ in TEE_FAMILIES:
        path = os.path.join(parameters_dir, name)
        try:
            raw = open(path, "r", encoding="ascii").read()
        except FileNotFoundError:
            raise MissingParameterFile(name) from None
        try:
            values[name] = int(raw.strip())
        except ValueError:
            raise UnparsableValue(name, raw.strip()) from None
    return _tee_families_from(values)


class TeeParameterSource:
    """TEE metrics read from a driver parameter-file directory."""

    def __init__(self, parameters_dir: str | os.PathLike):
        self.name = "tee"
        self.parameters_dir = parameters_dir

    def collect(self) -> list[MetricFamily]:
        return tee_collect(self.parameters_dir)


class TeeSimulatorSource:
    """TEE metrics taken straight from a simulator driver snapshot."""

    def __init__(self, driver: SgxDriver):
        self.name = "tee"
        self.driver = driver

    def collect(self) -> list[MetricFamily]:
        snapshot = self.driver.state().as_dict()
        return _tee_families_from(
            {name: snapshot[_FILE_TO_STATE[name]] for name, _, _ in TEE_FAMILIES}
        )


class SystemMetricsSource:
    """Cumulative system-level counters fed from an event stream.

    ``filter_pids`` restricts the pid-labeled series (syscalls and per-pid
    context switches) to the given pids; host-scope and space-scope
    counters always see everything.
    """

    def __init__(self, filter_pids: Sequence[int] | None = None):
        self.name = "system"
        self._lock = threading.Lock()
        self._filter = set(filter_pids) if filter_pids else None
        self._syscalls: Counter[tuple[str, str]] = Counter()  # (syscall, pid label)
        self._cs_by_pid: Counter[str] = Counter()
        self._cs_host = 0
        self._faults = Counter({"user": 0, "kernel": 0})
        self._llc_misses = 0
        self._llc_refs = 0
        self._pids_seen: set[str] = set()

    def _pid_label(self, pid: int) -> str:
        label = str(pid)
        if label in self._pids_seen:
            return label
        if len(self._pids_seen) >= PID_CARDINALITY_LIMIT:
            return "other"
        self._pids_seen.add(label)
        return label

    def consume(self, events: Iterable[SystemEvent]) -> None:
        with self._lock:
            for event in events:
                kind = event.kind
                if kind is EventKind.SYSCALL:
                    if self._filter is None or event.pid in self._filter:
                        self._syscalls[(event.name, self._pid_label(event.pid))] += event.count
                elif kind is EventKind.CONTEXT_SWITCH:
                    self._cs_host += event.count
                    if self._filter is None or event.pid in self._filter:
                        self._cs_by_pid[self._pid_label(event.pid)] += event.count
                elif kind is EventKind.PAGE_FAULT:
                    self._faults[event.space] += event.count
                elif kind is EventKind.CACHE_MISS:
                    self._llc_misses += event.count
                elif kind is EventKind.CACHE_REF:
                    self._llc_refs += event.count

    def collect(self) -> list[MetricFamily]:
        with self._lock:
            syscall_series = tuple(
                (LabelSet.of(syscall=name, pid=pid), Sample(None, float(count)))
                for (name, pid), count in sorted(self._syscalls.items())
            )
            cs_series = [(LabelSet.of(scope="host"), Sample(None, float(self._cs_host)))]
            cs_series += [
                (LabelSet.of(scope="pid", pid=pid), Sample(None, float(count)))
                for pid, count in sorted(self._cs_by_pid.items())
            ]
            fault_series = tuple(
                (LabelSet.of(space=space), Sample(None, float(self._faults[space])))
                for space in ("user", "kernel")
            )
            misses = float(self._llc_misses)
            refs = float(self._llc_refs)
        return [
            MetricFamily("syscalls", MetricKind.COUNTER, "System calls observed", syscall_series),
            MetricFamily("context_switches", MetricKind.COUNTER, "Context switches observed", tuple(cs_series)),
            MetricFamily("page_faults", MetricKind.COUNTER, "Page faults by address space", fault_series),
            MetricFamily("llc_misses", MetricKind.COUNTER, "Last-level cache misses", ((EMPTY_LABELS, Sample(None, misses)),)),
            MetricFamily("llc_references", MetricKind.COUNTER, "Last-level cache references", ((EMPTY_LABELS, Sample(None, refs)),)),
        ]


def sme_collect(events: Iterable[SystemEvent], filter_pids: Sequence[int] | None = None) -> list[MetricFamily]:
    """One-shot system metrics over an event window."""
    source = SystemMetricsSource(filter_pids)
    source.consume(events)
    return source.collect()


class OsProcReaderSource:
    """Optional Linux adapter reading host counters from /proc.

    A stand-in for the kernel-probe path on real hosts; family names carry
    an ``os_`` prefix so simulator families stay distinct. Everything in
    the test suite runs against the simulator sources instead.
    """

    def __init__(self, proc_root: str = "/proc"):
        self.name = "os_proc"
        self.proc_root = proc_root

    def collect(self) -> list[MetricFamily]:
        families = []
        for line in open(os.path.join(self.proc_root, "stat"), encoding="ascii"):
            if line.startswith("ctxt "):
                families.append(
                    MetricFamily(
                        "os_context_switches",
                        MetricKind.COUNTER,
                        "Host context switches from /proc/stat",
                        ((EMPTY_LABELS, Sample(None, float(int(line.split()[1])))),),
                    )
                )
                break
        vmstat = os.path.join(self.proc_root, "vmstat")
        if os.path.exists(vmstat):
            for line in open(vmstat, encoding="ascii"):
                if line.startswith("pgfault "):
                    families.append(
                        MetricFamily(
                            "os_page_faults",
                            MetricKind.COUNTER,
                            "Host page faults from /proc/vmstat",
                            ((EMPTY_LABELS, Sample(None, float(int(line.split()[1])))),),
                        )
                    )
                    break
        return families


def merge_families(families: list[MetricFamily]) -> list[MetricFamily]:
    """Merge same-name families from different sources into one.

    Kinds must agree; duplicate series surface as DuplicateSeries when the
    merged family is built.
    """
    by_name: dict[str, MetricFamily] = {}
    order: list[str] = []
    for family in families:
        existing = by_name.get(family.name)
        if existing is None:
            by_name[family.name] = family
            order.append(family.name)
            continue
        if existing.kind is not family.kind:
            raise ValueError(
                f"family {family.name!r} collected with conflicting kinds"
            )
        by_name[family.name] = MetricFamily(
            existing.name,
            existing.kind,
            existing.help or family.help,
            existing.series + family.series,
        )
    return [by_name[name] for name in order]


@dataclass
class ExporterConfig:
    listen: str = "127.0.0.1:0"
    sources: list[MetricSource] = field(default_factory=list)
    static_labels: LabelSet = EMPTY_LABELS


def _apply_static_labels(families: list[MetricFamily], statics: LabelSet) -> list[MetricFamily]:
    if not statics:
        return families
    return [
        MetricFamily(
            f.name,
            f.kind,
            f.help,
            tuple((labels.merged_over(statics), sample) for labels, sample in f.series),
        )
        for f in families
    ]


def split_listen_address(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port:
        raise ValueError(f"listen address must be host:port, got {listen!r}")
    return host, int(port)


class _MetricsHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self):  # noqa: N802 (stdlib handler naming)
        if self.path == "/healthz":
            self._respond(200, b"ok\n", "text/plain")
            return
        if self.path != "/metrics":
            self._respond(404, b"not found\n", "text/plain")
            return
        try:
            families: list[MetricFamily] = []
            for source in self.server.exporter_sources:
                families.extend(source.collect())
            families = merge_families(families)
            families = _apply_static_labels(families, self.server.exporter_static_labels)
            body = exposition.encode(exposition.ExpositionDocument(tuple(families)))
        except Exception as exc:  # collect failures must not kill the server
            log.warning("metrics collection failed: %s", exc)
            self._respond(500, f"collection failed: {exc}\n".encode(), "text/plain")
            return
        self._respond(200, body, exposition.CONTENT_TYPE)

    def _respond(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("exporter http: " + fmt, *args)


class ExporterServer:
    """A running exporter; stop with :meth:`stop`."""

    def __init__(self, config: ExporterConfig):
        host, port = split_listen_address(config.listen)
        try:
            self._httpd = ThreadingHTTPServer((host, port), _MetricsHandler)
        except OSError as exc:
            raise BindError(f"cannot bind {config.listen}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._httpd.exporter_sources = list(config.sources)
        self._httpd.exporter_static_labels = config.static_labels
        self.host = host
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"exporter:{self.port}", daemon=True
        )
        self._thread.start()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/metrics"

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)


def serve_metrics(config: ExporterConfig) -> ExporterServer:
    """Start an exporter HTTP service; raises :class:`BindError` if the
    port is taken."""
    return ExporterServer(config)
