"""Pull-based collection: scrape exporter endpoints into the metric store.

One logical task per target scrapes every ``interval_ms`` with ±10% jitter
(seeded per target, so runs are reproducible on a manual clock). A scrape
GETs the endpoint, decodes the exposition body, stamps timestamp-less
samples with the scrape start time, attaches the target identity labels,
and ingests everything in one atomic batch together with the synthetic
``up`` gauge (1 on success, 0 on any failure). A target is marked down
after ``DOWN_AFTER_FAILURES`` consecutive failures and recovers to up on
the first success.

Targets come from explicit registration and/or a watched discovery file: a
JSON list of ``{"job": ..., "url": ..., "labels": {...}}`` objects with
optional ``interval_ms``/``timeout_ms`` overrides. A malformed edit keeps
the previous target set.
"""
from __future__ import annotations

import json
import logging
import os
import random
import socket
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from typing import Callable

from . import exposition
from .clockwork import SystemClock
from .model import EMPTY_LABELS, LabelSet, MetricFamily, Sample, series_key
from .tsdb import MetricStore

log = logging.getLogger(__name__)

DEFAULT_INTERVAL_MS = 5000
DEFAULT_TIMEOUT_MS = 2000
DOWN_AFTER_FAILURES = 2
JITTER = 0.10

HEALTH_UNKNOWN = "unknown"
HEALTH_UP = "up"
HEALTH_DOWN = "down"


class MalformedDiscoveryFile(ValueError):
    pass


@dataclass
class ScrapeTarget:
    job: str
    url: str
    interval_ms: int = DEFAULT_INTERVAL_MS
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    labels: LabelSet = EMPTY_LABELS
    health: str = HEALTH_UNKNOWN
    consecutive_failures: int = 0
    last_scrape_ms: int | None = None

    def __post_init__(self) -> None:
        if self.interval_ms <= 0:
            raise ValueError("interval_ms must be positive")
        if not 0 < self.timeout_ms < self.interval_ms:
            raise ValueError("timeout_ms must be positive and below interval_ms")
        parsed = urllib.parse.urlparse(self.url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"malformed target url {self.url!r}")
        self.instance = parsed.netloc

    @property
    def identity(self) -> tuple[str, str]:
        return (self.job, self.instance)


@dataclass
class ScrapeResult:
    target: ScrapeTarget
    ok: bool
    duration_ms: float
    families: list[MetricFamily] = field(default_factory=list)
    error: str | None = None  # timeout | connection_refused | decode_error | ...
    samples_ingested: int = 0
    scrape_time_ms: int = 0


def load_discovery_file(path: str | os.PathLike) -> list[ScrapeTarget]:
    """Parse the discovery file; raises MalformedDiscoveryFile on any defect."""
    try:
        raw = json.load(open(path, encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedDiscoveryFile(f"{path}: {exc}") from None
    if not isinstance(raw, list):
        raise MalformedDiscoveryFile(f"{path}: top level must be a list")
    targets = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "job" not in entry or "url" not in entry:
            raise MalformedDiscoveryFile(f"{path}: entry {i} needs job and url")
        labels = entry.get("labels", {})
        if not isinstance(labels, dict):
            raise MalformedDiscoveryFile(f"{path}: entry {i} labels must be an object")
        try:
            target = ScrapeTarget(
                job=str(entry["job"]),
                url=str(entry["url"]),
                interval_ms=int(entry.get("interval_ms", DEFAULT_INTERVAL_MS)),
                timeout_ms=int(entry.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
                labels=LabelSet.of(**{str(k): str(v) for k, v in labels.items()}),
            )
        except ValueError as exc:
            raise MalformedDiscoveryFile(f"{path}: entry {i}: {exc}") from None
        targets.append(target)
    return targets


class _TargetTask:
    def __init__(self, target: ScrapeTarget):
        self.target = target
        self.stop = threading.Event()
        self.thread: threading.Thread | None = None
        self.rng = random.Random(f"{target.job}\x00{target.instance}")


class Scraper:
    """Owns the scrape tasks and the discovery watcher.

    ``on_event(type, payload)`` receives ``sample_batch`` and
    ``target_health`` notifications for the live stream.
    """

    def __init__(
        self,
        store: MetricStore,
        clock=None,
        on_event: Callable[[str, dict], None] | None = None,
        discovery_path: str | os.PathLike | None = None,
        discovery_poll_ms: int = 1000,
    ):
        self.store = store
        self.clock = clock if clock is not None else SystemClock()
        self.on_event = on_event
        self.discovery_path = discovery_path
        self.discovery_poll_ms = discovery_poll_ms
        self._tasks: dict[tuple[str, str], _TargetTask] = {}
        self._lock = threading.Lock()
        self._started = False
        self._stop = threading.Event()
        self._watcher: threading.Thread | None = None
        self._discovery_mtime: float | None = None
        self._discovery_ids: set[tuple[str, str]] = set()

    # -- target registry --------------------------------------------------

    def add_target(self, target: ScrapeTarget) -> None:
        with self._lock:
            if target.identity in self._tasks:
                return
            task = _TargetTask(target)
            self._tasks[target.identity] = task
            if self._started:
                self._spawn(task)

    def remove_target(self, identity: tuple[str, str]) -> None:
        with self._lock:
            task = self._tasks.pop(identity, None)
        if task is not None:
            task.stop.set()
            self.clock.kick()

    def targets(self) -> list[ScrapeTarget]:
        with self._lock:
            return sorted((t.target for t in self._tasks.values()), key=lambda t: t.identity)

    # -- scraping ----------------------------------------------------------

    def scrape_once(self, target: ScrapeTarget) -> ScrapeResult:
        start_ms = self.clock.now_ms()
        mono = time.monotonic()
        try:
            with urllib.request.urlopen(target.url, timeout=target.timeout_ms / 1000.0) as resp:
                body = resp.read()
            doc = exposition.decode(body)
        except (socket.timeout, TimeoutError) as exc:
            return self._failed(target, start_ms, mono, "timeout", exc)
        except urllib.error.HTTPError as exc:
            return self._failed(target, start_ms, mono, "http_status", exc)
        except urllib.error.URLError as exc:
            reason = getattr(exc, "reason", exc)
            if isinstance(reason, (socket.timeout, TimeoutError)):
                return self._failed(target, start_ms, mono, "timeout", exc)
            if isinstance(reason, ConnectionRefusedError):
                return self._failed(target, start_ms, mono, "connection_refused", exc)
            return self._failed(target, start_ms, mono, "connection_error", exc)
        except ConnectionError as exc:
            return self._failed(target, start_ms, mono, "connection_refused", exc)
        except ValueError as exc:  # exposition + model errors
            return self._failed(target, start_ms, mono, "decode_error", exc)

        identity = LabelSet.of(job=target.job, instance=target.instance)
        statics = identity.merged_over(target.labels)
        batch = []
        for family in doc.families:
            for labels, sample in family.series:
                ts = sample.timestamp_ms if sample.timestamp_ms is not None else start_ms
                batch.append(
                    (
                        series_key(family.name, statics.merged_over(labels)),
                        Sample(ts, sample.value),
                    )
                )
        batch.append((series_key("up", identity), Sample(start_ms, 1.0)))
        try:
            self.store.append_many(batch)
        except ValueError as exc:
            return self._failed(target, start_ms, mono, "ingest_error", exc)

        duration = (time.monotonic() - mono) * 1000.0
        target.consecutive_failures = 0
        target.last_scrape_ms = start_ms
        self._set_health(target, HEALTH_UP)
        self._emit(
            "sample_batch",
            {
                "job": target.job,
                "instance": target.instance,
                "timestamp_ms": start_ms,
                "samples": len(batch),
                "families": [f.name for f in doc.families],
            },
        )
        return ScrapeResult(
            target,
            ok=True,
            duration_ms=duration,
            families=list(doc.families),
            samples_ingested=len(batch),
            scrape_time_ms=start_ms,
        )

    def _failed(self, target, start_ms, mono, kind, exc) -> ScrapeResult:
        log.debug("scrape %s/%s failed: %s: %s", target.job, target.instance, kind, exc)
        target.consecutive_failures += 1
        target.last_scrape_ms = start_ms
        if target.consecutive_failures >= DOWN_AFTER_FAILURES:
            self._set_health(target, HEALTH_DOWN)
        key = series_key("up", LabelSet.of(job=target.job, instance=target.instance))
        try:
            self.store.append(key, Sample(start_ms, 0.0))
        except ValueError:
            pass  # duplicate failure timestamp; nothing to record
        return ScrapeResult(
            target,
            ok=False,
            duration_ms=(time.monotonic() - mono) * 1000.0,
            error=kind,
            scrape_time_ms=start_ms,
        )

    def _set_health(self, target: ScrapeTarget, health: str) -> None:
        if target.health != health:
            target.health = health
            self._emit(
                "target_health",
                {"job": target.job, "instance": target.instance, "health": health},
            )

    def _emit(self, event_type: str, payload: dict) -> None:
        if self.on_event is not None:
            try:
                self.on_event(event_type, payload)
            except Exception:
                log.exception("event sink failed")

    # -- the loop ----------------------------------------------------------

    def _target_loop(self, task: _TargetTask) -> None:
        # task_started was called by the spawner so a manual clock can
        # never advance past a freshly added target
        try:
            target = task.target
            while not task.stop.is_set() and not self._stop.is_set():
                self.scrape_once(target)
                jittered = target.interval_ms * (1.0 + task.rng.uniform(-JITTER, JITTER))
                deadline = self.clock.now_ms() + int(jittered)
                self.clock.wait_until(deadline, task.stop)
        finally:
            self.clock.task_finished()

    def _spawn(self, task: _TargetTask) -> None:
        name = f"scrape:{task.target.job}/{task.target.instance}"
        self.clock.task_started()
        task.thread = threading.Thread(target=self._target_loop, args=(task,), name=name, daemon=True)
        task.thread.start()

    def _watch_loop(self) -> None:
        try:
            while not self._stop.is_set():
                self._reconcile_discovery()
                self.clock.wait_until(self.clock.now_ms() + self.discovery_poll_ms, self._stop)
        finally:
            self.clock.task_finished()

    def _reconcile_discovery(self) -> None:
        path = self.discovery_path
        if path is None:
            return
        try:
            mtime = os.stat(path).st_mtime_ns
        except OSError:
            return
        if mtime == self._discovery_mtime:
            return
        self._discovery_mtime = mtime
        try:
            targets = load_discovery_file(path)
        except MalformedDiscoveryFile as exc:
            log.warning("discovery reload skipped: %s", exc)
            return
        wanted = {t.identity: t for t in targets}
        for identity in self._discovery_ids - set(wanted):
            self.remove_target(identity)
        for identity, target in wanted.items():
            self.add_target(target)
        self._discovery_ids = set(wanted)

    def start(self) -> None:
        with self._lock:
            if self._started:
                return
            self._started = True
            for task in self._tasks.values():
                self._spawn(task)
        if self.discovery_path is not None:
            self._reconcile_discovery()
            self.clock.task_started()
            self._watcher = threading.Thread(target=self._watch_loop, name="discovery", daemon=True)
            self._watcher.start()

    def stop(self) -> None:
        """Stop all tasks, draining in-flight scrapes."""
        self._stop.set()
        with self._lock:
            tasks = list(self._tasks.values())
        for task in tasks:
            task.stop.set()
        self.clock.kick()
        for task in tasks:
            if task.thread is not None:
                task.thread.join(timeout=10)
        if self._watcher is not None:
            self._watcher.join(timeout=10)
        self._started = False
