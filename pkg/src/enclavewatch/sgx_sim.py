"""Deterministic, seedable stand-in for the instrumented SGX driver.

Models the enclave page cache (EPC) as a fixed pool of 4 KiB pages with
global FIFO eviction: touching a page that is not resident consumes a free
page, displacing the oldest resident page system-wide when the pool is
exhausted. The driver exposes the same counters the kernel hooks would
(``sgx_nr_free_pages``, ``sgx_nr_evicted``, ...) and can write them to a
parameter-file directory byte-compatible with
``/sys/module/isgx/parameters`` so the TEE exporter reads simulator and
hardware identically.

On top of the driver, :func:`run_scenario` replays named workload profiles
(requests per second plus per-100-request event rates) using counter-based
schedules: by request ``k`` exactly ``floor(k * rate / 100)`` occurrences
of each event have been emitted, so long-run rates converge exactly and
replays are reproducible byte for byte.
"""
from __future__ import annotations

import os
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

PAGE_BYTES = 4096
# 94 MiB of usable EPC on common SGX parts, in 4 KiB pages.
DEFAULT_EPC_PAGES = 94 * 1024 * 1024 // PAGE_BYTES


class ZeroEpc(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class SgxDriverState:
    """Atomic snapshot of all driver counters."""

    epc_total_pages: int
    epc_free_pages: int
    pages_marked_old: int
    nr_enclaves_initialized: int
    nr_enclaves_active: int
    nr_enclaves_removed: int
    pages_evicted: int
    pages_added: int
    pages_reclaimed: int

    def as_dict(self) -> dict[str, int]:
        return {
            "epc_total_pages": self.epc_total_pages,
            "epc_free_pages": self.epc_free_pages,
            "pages_marked_old": self.pages_marked_old,
            "nr_enclaves_initialized": self.nr_enclaves_initialized,
            "nr_enclaves_active": self.nr_enclaves_active,
            "nr_enclaves_removed": self.nr_enclaves_removed,
            "pages_evicted": self.pages_evicted,
            "pages_added": self.pages_added,
            "pages_reclaimed": self.pages_reclaimed,
        }


# Parameter file names mirror the driver hooks; values are decimal + "\n".
PARAMETER_FILES: tuple[tuple[str, str], ...] = (
    ("sgx_nr_enclaves", "nr_enclaves_active"),
    ("sgx_nr_free_pages", "epc_free_pages"),
    ("sgx_epc_total_pages", "epc_total_pages"),
    ("sgx_pages_marked_old", "pages_marked_old"),
    ("sgx_enclaves_initialized", "nr_enclaves_initialized"),
    ("sgx_enclaves_removed", "nr_enclaves_removed"),
    ("sgx_nr_evicted", "pages_evicted"),
    ("sgx_pages_added", "pages_added"),
    ("sgx_pages_reclaimed", "pages_reclaimed"),
)

_NEVER, _RESIDENT, _SWAPPED = 0, 1, 2


@dataclass
class TouchReport:
    """Outcome of one touch_pages call.

    ``faults`` counts page-not-present touches (first-touch
    materializations plus reclaims); touching a resident page is free.
    """

    faults: int = 0
    evictions: int = 0
    reclaims: int = 0


class EnclaveHandle:
    """One simulated enclave: a fixed allocation of lazily materialized pages."""

    __slots__ = ("id", "total_pages", "resident_pages", "swapped_pages", "_page_state")

    def __init__(self, enclave_id: int, total_pages: int):
        self.id = enclave_id
        self.total_pages = total_pages
        self.resident_pages = 0
        self.swapped_pages = 0
        self._page_state = bytearray(total_pages)  # _NEVER until first touch

    def page_state(self, index: int) -> int:
        return self._page_state[index]


class SgxDriver:
    """The simulated driver. Single writer; readers snapshot via :meth:`state`."""

    def __init__(self, epc_total_pages: int = DEFAULT_EPC_PAGES, seed: int = 0):
        if epc_total_pages <= 0:
            raise ZeroEpc(f"epc_total_pages must be positive, got {epc_total_pages}")
        self.seed = seed
        self.epc_total_pages = epc_total_pages
        self.epc_free_pages = epc_total_pages
        self.nr_enclaves_initialized = 0
        self.nr_enclaves_removed = 0
        self.pages_evicted = 0
        self.pages_added = 0
        self.pages_reclaimed = 0
        self._enclaves: dict[int, EnclaveHandle] = {}
        self._next_id = 1
        # eviction candidates: every resident page, oldest first
        self._fifo: deque[tuple[int, int]] = deque()
        self._lock = threading.Lock()

    @property
    def nr_enclaves_active(self) -> int:
        return self.nr_enclaves_initialized - self.nr_enclaves_removed

    @property
    def pages_marked_old(self) -> int:
        return len(self._fifo)

    def state(self) -> SgxDriverState:
        with self._lock:
            return SgxDriverState(
                epc_total_pages=self.epc_total_pages,
                epc_free_pages=self.epc_free_pages,
                pages_marked_old=self.pages_marked_old,
                nr_enclaves_initialized=self.nr_enclaves_initialized,
                nr_enclaves_active=self.nr_enclaves_active,
                nr_enclaves_removed=self.nr_enclaves_removed,
                pages_evicted=self.pages_evicted,
                pages_added=self.pages_added,
                pages_reclaimed=self.pages_reclaimed,
            )

    def create_enclave(self, requested_pages: int) -> EnclaveHandle:
        if requested_pages <= 0:
            raise ValueError("requested_pages must be positive")
        with self._lock:
            enclave = EnclaveHandle(self._next_id, requested_pages)
            self._next_id += 1
            self._enclaves[enclave.id] = enclave
            self.nr_enclaves_initialized += 1
            return enclave

    def destroy_enclave(self, enclave: EnclaveHandle) -> None:
        with self._lock:
            if enclave.id not in self._enclaves:
                raise KeyError(f"enclave {enclave.id} not active")
            del self._enclaves[enclave.id]
            self.epc_free_pages += enclave.resident_pages
            if enclave.resident_pages:
                self._fifo = deque(e for e in self._fifo if e[0] != enclave.id)
            self.nr_enclaves_removed += 1

    def _evict_oldest(self) -> None:
        victim_id, victim_page = self._fifo.popleft()
        victim = self._enclaves[victim_id]
        victim._page_state[victim_page] = _SWAPPED
        victim.resident_pages -= 1
        victim.swapped_pages += 1
        self.pages_evicted += 1
        self.epc_free_pages += 1

    def _make_resident(self, enclave: EnclaveHandle, index: int) -> int:
        """Bring one page in, evicting if the pool is exhausted. Returns evictions."""
        evictions = 0
        if self.epc_free_pages == 0:
            self._evict_oldest()
            evictions = 1
        self.epc_free_pages -= 1
        enclave._page_state[index] = _RESIDENT
        enclave.resident_pages += 1
        self._fifo.append((enclave.id, index))
        return evictions

    def touch_pages(self, enclave: EnclaveHandle, page_indices: Sequence[int]) -> TouchReport:
        report = TouchReport()
        with self._lock:
            if enclave.id not in self._enclaves:
                raise KeyError(f"enclave {enclave.id} not active")
            for index in page_indices:
                if not 0 <= index < enclave.total_pages:
                    raise IndexOutOfRange(
                        f"page {index} outside enclave of {enclave.total_pages} pages"
                    )
            for index in page_indices:
                state = enclave._page_state[index]
                if state == _RESIDENT:
                    continue
                if state == _NEVER:
                    self.pages_added += 1
                else:
                    self.pages_reclaimed += 1
                    enclave.swapped_pages -= 1
                    report.reclaims += 1
                report.faults += 1
                report.evictions += self._make_resident(enclave, index)
        return report

    def export_parameters(self, directory: str | os.PathLike) -> None:
        """Write one decimal-plus-newline text file per counter into ``directory``."""
        snapshot = self.state().as_dict()
        for file_name, attr in PARAMETER_FILES:
            path = os.path.join(directory, file_name)
            tmp = path + ".tmp"
            with open(tmp, "w", encoding="ascii") as fh:
                fh.write(f"{snapshot[attr]}\n")
            os.replace(tmp, path)


def new_driver(epc_total_pages: int = DEFAULT_EPC_PAGES, seed: int = 0) -> SgxDriver:
    return SgxDriver(epc_total_pages, seed)


# --- workload scenarios -------------------------------------------------


class EventKind(Enum):
    SYSCALL = "syscall"
    CONTEXT_SWITCH = "context_switch"
    PAGE_FAULT = "page_fault"
    CACHE_REF = "cache_ref"
    CACHE_MISS = "cache_miss"


@dataclass(frozen=True)
class SystemEvent:
    """One batched kernel-level observation.

    ``count`` occurrences of the same event at the same millisecond are
    folded into a single record; consumers sum counts.
    """

    timestamp_ms: int
    kind: EventKind
    pid: int
    name: str = ""  # syscall name
    space: str = ""  # "user" | "kernel" for page faults
    count: int = 1


class SystemEventStream:
    """Time-ordered batched event sequence."""

    def __init__(self, events: Iterable[SystemEvent] = ()):
        self.events: list[SystemEvent] = []
        for event in events:
            self.append(event)

    def append(self, event: SystemEvent) -> None:
        if self.events and event.timestamp_ms < self.events[-1].timestamp_ms:
            raise ValueError("event timestamps must be non-decreasing")
        self.events.append(event)

    def __iter__(self) -> Iterator[SystemEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class PerHundredRequests:
    """Event and paging rates per 100 requests, the calibration contract."""

    evicted_pages: float = 0.0
    user_page_faults: float = 0.0
    total_page_faults: float = 0.0
    llc_misses: float = 0.0
    context_switches_pid: float = 0.0
    context_switches_host: float = 0.0
    syscall_mix: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in (
            ("evicted_pages", self.evicted_pages),
            ("user_page_faults", self.user_page_faults),
            ("total_page_faults", self.total_page_faults),
            ("llc_misses", self.llc_misses),
            ("context_switches_pid", self.context_switches_pid),
            ("context_switches_host", self.context_switches_host),
        ):
            if value < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.user_page_faults > self.total_page_faults:
            raise ValueError("user_page_faults cannot exceed total_page_faults")
        if self.context_switches_pid > self.context_switches_host:
            raise ValueError("context_switches_pid cannot exceed context_switches_host")
        if any(v < 0 for v in self.syscall_mix.values()):
            raise ValueError("syscall rates must be >= 0")


@dataclass(frozen=True)
class WorkloadScenario:
    name: str
    request_rate: float  # requests per second, desk scale
    per_100_requests: PerHundredRequests
    db_bytes: int  # working-set size
    enclave: bool | None = None  # None: inferred from paging rates

    def __post_init__(self) -> None:
        if self.request_rate <= 0:
            raise ValueError("request_rate must be positive")
        if self.db_bytes < 0:
            raise ValueError("db_bytes must be >= 0")

    @property
    def uses_enclave(self) -> bool:
        if self.enclave is not None:
            return self.enclave
        rates = self.per_100_requests
        return rates.evicted_pages > 0 or rates.user_page_faults > 0


# Rates measured on Redis GET benchmarks at 580 connections with a 105 MB
# database (exceeding the usable EPC), plus the native baseline. Request
# rates are scaled down for desk replay; only the per-100-request rates
# matter for calibration.
BUILTIN_SCENARIOS: dict[str, WorkloadScenario] = {
    scenario.name: scenario
    for scenario in (
        WorkloadScenario(
            name="scone-580C-105MB",
            request_rate=1000.0,
            db_bytes=105 * 1024 * 1024,
            per_100_requests=PerHundredRequests(
                evicted_pages=137.0,
                user_page_faults=0.064,
                total_page_faults=2200.0,
                llc_misses=103.0,
                context_switches_pid=48.0,
                context_switches_host=125.0,
                syscall_mix={
                    "clock_gettime": 138.0,
                    "futex": 60.0,
                    "read": 14.0,
                    "write": 14.0,
                    "epoll_wait": 10.0,
                },
            ),
        ),
        WorkloadScenario(
            name="graphene-580C-105MB",
            request_rate=100.0,
            db_bytes=105 * 1024 * 1024,
            per_100_requests=PerHundredRequests(
                evicted_pages=0.03,
                user_page_faults=0.03,
                total_page_faults=8996.0,
                llc_misses=161.0,
                context_switches_pid=90.0,
                context_switches_host=304.0,
                syscall_mix={
                    "futex": 120.0,
                    "read": 20.0,
                    "write": 20.0,
                    "clock_gettime": 30.0,
                },
            ),
        ),
        WorkloadScenario(
            name="sgx-lkl-580C-105MB",
            request_rate=500.0,
            db_bytes=105 * 1024 * 1024,
            per_100_requests=PerHundredRequests(
                evicted_pages=1.7,
                user_page_faults=0.03,
                total_page_faults=2200.0,
                llc_misses=100.0,
                context_switches_pid=60.0,
                context_switches_host=125.0,
                syscall_mix={
                    "futex": 80.0,
                    "read": 16.0,
                    "write": 16.0,
                    "clock_gettime": 45.0,
                },
            ),
        ),
        WorkloadScenario(
            name="native-redis",
            request_rate=2000.0,
            db_bytes=105 * 1024 * 1024,
            enclave=False,
            per_100_requests=PerHundredRequests(
                evicted_pages=0.0,
                user_page_faults=0.0,
                total_page_faults=150.0,
                llc_misses=23.0,
                context_switches_pid=5.0,
                context_switches_host=37.0,
                syscall_mix={
                    "read": 100.0,
                    "write": 100.0,
                    "epoll_wait": 30.0,
                    "clock_gettime": 1.0,
                },
            ),
        ),
    )
}

KERNEL_PID = 0


class _Schedule:
    """Emit floor(k * rate / 100) total occurrences by request k."""

    __slots__ = ("rate", "emitted")

    def __init__(self, rate: float):
        self.rate = rate
        self.emitted = 0

    def due(self, k: int) -> int:
        target = int(k * self.rate / 100.0)
        delta = target - self.emitted
        self.emitted = target
        return delta


class ScenarioEngine:
    """Incremental scenario executor; drives a driver and emits an event stream.

    ``advance_to_request(k)`` processes requests up to and including ``k``;
    ``advance_to_ms`` converts from scenario time. Both are idempotent for
    non-increasing arguments.
    """

    def __init__(
        self,
        scenario: WorkloadScenario,
        seed: int = 0,
        driver: SgxDriver | None = None,
        stream: SystemEventStream | None = None,
    ):
        self.scenario = scenario
        self.driver = driver if driver is not None else SgxDriver(seed=seed)
        self.stream = stream if stream is not None else SystemEventStream()
        # stable workload pid derived from the seed so SME labels reproduce
        self.app_pid = 1000 + (seed * 2654435761 + 12345) % 60000
        self.requests_done = 0

        rates = scenario.per_100_requests
        self._evictions = _Schedule(rates.evicted_pages)
        self._user_faults = _Schedule(rates.user_page_faults)
        self._kernel_faults = _Schedule(rates.total_page_faults - rates.user_page_faults)
        self._llc_misses = _Schedule(rates.llc_misses)
        self._cs_pid = _Schedule(rates.context_switches_pid)
        self._cs_other = _Schedule(rates.context_switches_host - rates.context_switches_pid)
        self._syscalls = [(name, _Schedule(rate)) for name, rate in sorted(rates.syscall_mix.items())]

        self._enclave: EnclaveHandle | None = None
        self._next_fresh = 0
        self._swapped_q: deque[int] = deque()
        if scenario.uses_enclave:
            db_pages = max(1, -(-scenario.db_bytes // PAGE_BYTES))
            if rates.evicted_pages > 0:
                # forced evictions need a working set larger than the pool
                db_pages = max(db_pages, self.driver.epc_total_pages + 1)
            self._enclave = self.driver.create_enclave(db_pages)
            if rates.evicted_pages > 0:
                # fill the EPC exactly; adds pages but evicts nothing
                fill = min(db_pages, self.driver.epc_total_pages)
                self.driver.touch_pages(self._enclave, range(fill))
                self._next_fresh = fill

    def _force_eviction(self) -> None:
        enclave = self._enclave
        assert enclave is not None
        victim = self.driver._fifo[0][1]
        if self._next_fresh < enclave.total_pages:
            target = self._next_fresh
            self._next_fresh += 1
        else:
            target = self._swapped_q.popleft()
        report = self.driver.touch_pages(enclave, [target])
        assert report.evictions == 1
        self._swapped_q.append(victim)

    def request_timestamp_ms(self, k: int) -> int:
        return int(k * 1000.0 / self.scenario.request_rate)

    def advance_to_request(self, k: int) -> None:
        emit = self.stream.append
        pid = self.app_pid
        for req in range(self.requests_done + 1, k + 1):
            t = self.request_timestamp_ms(req)
            for _ in range(self._evictions.due(req)):
                self._force_eviction()
            n = self._user_faults.due(req)
            if n:
                emit(SystemEvent(t, EventKind.PAGE_FAULT, pid, space="user", count=n))
            n = self._kernel_faults.due(req)
            if n:
                emit(SystemEvent(t, EventKind.PAGE_FAULT, KERNEL_PID, space="kernel", count=n))
            n = self._llc_misses.due(req)
            if n:
                emit(SystemEvent(t, EventKind.CACHE_REF, pid, count=n))
                emit(SystemEvent(t, EventKind.CACHE_MISS, pid, count=n))
            n = self._cs_pid.due(req)
            if n:
                emit(SystemEvent(t, EventKind.CONTEXT_SWITCH, pid, count=n))
            n = self._cs_other.due(req)
            if n:
                emit(SystemEvent(t, EventKind.CONTEXT_SWITCH, KERNEL_PID, count=n))
            for name, schedule in self._syscalls:
                n = schedule.due(req)
                if n:
                    emit(SystemEvent(t, EventKind.SYSCALL, pid, name=name, count=n))
        self.requests_done = max(self.requests_done, k)

    def advance_to_ms(self, t_ms: int) -> None:
        self.advance_to_request(int(t_ms / 1000.0 * self.scenario.request_rate))


@dataclass
class ScenarioRun:
    scenario: WorkloadScenario
    requests: int
    driver: SgxDriver
    trace: list[tuple[int, SgxDriverState]]
    events: SystemEventStream


def run_scenario(
    scenario: WorkloadScenario | str,
    duration_s: float,
    seed: int = 0,
    epc_total_pages: int = DEFAULT_EPC_PAGES,
) -> ScenarioRun:
    """Replay a scenario for ``duration_s`` of simulated time.

    The driver state is snapshot once per simulated second plus once at the
    end; identical (scenario, duration, seed) inputs give byte-identical
    traces and event streams.
    """
    if isinstance(scenario, str):
        scenario = BUILTIN_SCENARIOS[scenario]
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    engine = ScenarioEngine(scenario, seed, SgxDriver(epc_total_pages, seed))
    total_requests = int(duration_s * scenario.request_rate)
    trace: list[tuple[int, SgxDriverState]] = []
    per_second = max(1, int(scenario.request_rate))
    for k in range(per_second, total_requests + 1, per_second):
        engine.advance_to_request(k)
        trace.append((engine.request_timestamp_ms(k), engine.driver.state()))
    if engine.requests_done < total_requests:
        engine.advance_to_request(total_requests)
    final_t = engine.request_timestamp_ms(total_requests)
    if not trace or trace[-1][0] != final_t:
        trace.append((final_t, engine.driver.state()))
    return ScenarioRun(scenario, total_requests, engine.driver, trace, engine.stream)
