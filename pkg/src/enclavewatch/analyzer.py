"""Sliding-window threshold analysis over the metric store.

Every ``stride_ms`` (default one minute) each rule's query runs over the
trailing ``window_ms`` (default five minutes). A rule fires for a result
group when at least ``min_violation_points`` grid points violate the
comparator; it resolves when a previously firing group has a clean window.
Alerts are deduplicated by (rule id, group labels): only state transitions
are dispatched to the sinks, while the registry always holds the current
alert (with the observed value refreshed each evaluation).

Also provides five-number box-plot summaries (quartiles by linear
interpolation at positions (n-1)*q) over all sample values in a window,
computed each stride for the configured selectors.
"""
from __future__ import annotations

import logging
import operator
import threading
from dataclasses import dataclass, replace
from typing import Callable

from .clockwork import SystemClock
from .model import LabelSet
from .tsdb import MetricStore, QuerySpec, Selector, quantile_interpolated

log = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 300_000
DEFAULT_STRIDE_MS = 60_000

COMPARATORS: dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    "<": operator.lt,
    ">=": operator.ge,
    "<=": operator.le,
}

SEVERITIES = ("info", "warning", "critical")

FIRING = "firing"
RESOLVED = "resolved"


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdRule:
    id: str
    query: QuerySpec  # start/end are placeholders; the window supplies them
    comparator: str
    threshold: float
    window_ms: int = DEFAULT_WINDOW_MS
    stride_ms: int = DEFAULT_STRIDE_MS
    min_violation_points: int = 1
    severity: str = "warning"

    def __post_init__(self) -> None:
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if not (self.threshold == self.threshold and abs(self.threshold) != float("inf")):
            raise ValueError("threshold must be finite")
        if self.stride_ms <= 0 or self.window_ms <= 0:
            raise ValueError("window and stride must be positive")
        if self.stride_ms > self.window_ms:
            raise ValueError("stride_ms must be <= window_ms")
        if self.min_violation_points < 1:
            raise ValueError("min_violation_points must be >= 1")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.query.agg is None:
            raise ValueError("rule query needs an aggregation")


@dataclass(frozen=True)
class AnomalyAlert:
    rule_id: str
    window_start_ms: int
    window_end_ms: int
    observed: float
    threshold: float
    severity: str
    state: str  # firing | resolved
    labels: LabelSet

    def as_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "window_start_ms": self.window_start_ms,
            "window_end_ms": self.window_end_ms,
            "observed": self.observed,
            "threshold": self.threshold,
            "severity": self.severity,
            "state": self.state,
            "labels": self.labels.as_dict(),
        }


@dataclass(frozen=True)
class BoxPlotSummary:
    metric_name: str
    window_start_ms: int
    window_end_ms: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    count: int


def boxplot(selector: Selector, window_start_ms: int, window_end_ms: int, store: MetricStore) -> BoxPlotSummary:
    """Five-number summary over every sample value in the window.

    Raises :class:`EmptyWindow` when no matching samples exist.
    """
    query = QuerySpec(selector, window_start_ms, window_end_ms, max(1, window_end_ms - window_start_ms or 1))
    values: list[float] = []
    for _, samples in store.select_range(query):
        values.extend(s.value for s in samples)
    if not values:
        raise EmptyWindow(f"no samples for {selector.metric_name} in window")
    values.sort()
    return BoxPlotSummary(
        metric_name=selector.metric_name,
        window_start_ms=window_start_ms,
        window_end_ms=window_end_ms,
        min=values[0],
        q1=quantile_interpolated(values, 0.25),
        median=quantile_interpolated(values, 0.5),
        q3=quantile_interpolated(values, 0.75),
        max=values[-1],
        count=len(values),
    )


class AlertRegistry:
    """Current alert per (rule id, group labels), readable concurrently."""

    def __init__(self):
        self._lock = threading.Lock()
        self._alerts: dict[tuple[str, tuple], AnomalyAlert] = {}

    def update(self, alert: AnomalyAlert) -> bool:
        """Store the alert; returns True when the state transitioned."""
        key = (alert.rule_id, alert.labels.pairs)
        with self._lock:
            previous = self._alerts.get(key)
            self._alerts[key] = alert
            return previous is None or previous.state != alert.state

    def current_state(self, rule_id: str, labels: LabelSet) -> str | None:
        with self._lock:
            alert = self._alerts.get((rule_id, labels.pairs))
            return alert.state if alert else None

    def group_labels(self, rule_id: str) -> list[LabelSet]:
        with self._lock:
            return [LabelSet(pairs) for rid, pairs in self._alerts if rid == rule_id]

    def alerts(self, state: str | None = None) -> list[AnomalyAlert]:
        with self._lock:
            found = list(self._alerts.values())
        if state is not None:
            found = [a for a in found if a.state == state]
        return sorted(found, key=lambda a: (a.rule_id, a.labels.pairs))


def log_sink(alert: AnomalyAlert) -> None:
    """Structured single-line key=value record per alert transition."""
    labels = ",".join(f"{k}={v}" for k, v in alert.labels.pairs)
    log.warning(
        "alert state=%s rule=%s severity=%s observed=%g threshold=%g "
        "window_start_ms=%d window_end_ms=%d labels=%s",
        alert.state,
        alert.rule_id,
        alert.severity,
        alert.observed,
        alert.threshold,
        alert.window_start_ms,
        alert.window_end_ms,
        labels,
    )


class Analyzer:
    """The evaluation loop: rules each stride, dispatching transitions to sinks."""

    def __init__(
        self,
        rules: list[ThresholdRule],
        store: MetricStore,
        clock=None,
        sinks: list[Callable[[AnomalyAlert], None]] | None = None,
        boxplot_selectors: list[Selector] | None = None,
        boxplot_window_ms: int = DEFAULT_WINDOW_MS,
    ):
        self.rules = list(rules)
        self.store = store
        self.clock = clock if clock is not None else SystemClock()
        self.sinks = list(sinks) if sinks is not None else [log_sink]
        self.registry = AlertRegistry()
        self.boxplot_selectors = boxplot_selectors
        self.boxplot_window_ms = boxplot_window_ms
        self.latest_boxplots: dict[str, BoxPlotSummary] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def evaluate_window(self, rule: ThresholdRule, now_ms: int) -> list[AnomalyAlert]:
        """Evaluate one rule over [now - window, now]; returns transitions."""
        window_start = now_ms - rule.window_ms
        query = replace(rule.query, start_ms=max(0, window_start), end_ms=now_ms)
        compare = COMPARATORS[rule.comparator]
        worst = max if rule.comparator in (">", ">=") else min

        results = self.store.evaluate(query)
        transitions: list[AnomalyAlert] = []
        violating_groups: set[tuple] = set()

        for labels, points in results:
            violations = [v for _, v in points if compare(v, rule.threshold)]
            if len(violations) >= rule.min_violation_points:
                violating_groups.add(labels.pairs)
                alert = AnomalyAlert(
                    rule_id=rule.id,
                    window_start_ms=window_start,
                    window_end_ms=now_ms,
                    observed=worst(violations),
                    threshold=rule.threshold,
                    severity=rule.severity,
                    state=FIRING,
                    labels=labels,
                )
                if self.registry.update(alert):
                    transitions.append(alert)

        for labels in self.registry.group_labels(rule.id):
            if labels.pairs in violating_groups:
                continue
            if self.registry.current_state(rule.id, labels) != FIRING:
                continue
            resolved = AnomalyAlert(
                rule_id=rule.id,
                window_start_ms=window_start,
                window_end_ms=now_ms,
                observed=rule.threshold,
                threshold=rule.threshold,
                severity=rule.severity,
                state=RESOLVED,
                labels=labels,
            )
            if self.registry.update(resolved):
                transitions.append(resolved)
        return transitions

    def evaluate_all(self, now_ms: int) -> list[AnomalyAlert]:
        """One stride over every rule, isolated failures, sinks on transitions."""
        dispatched: list[AnomalyAlert] = []
        for rule in self.rules:
            try:
                dispatched.extend(self.evaluate_window(rule, now_ms))
            except Exception as exc:
                log.warning("rule %s skipped this stride: %s", rule.id, exc)
        self._dispatch(dispatched)
        self._refresh_boxplots(now_ms)
        return dispatched

    def _refresh_boxplots(self, now_ms: int) -> None:
        selectors = self.boxplot_selectors
        if selectors is None:
            # default: every sgx_* family currently stored
            selectors = [
                Selector(name) for name in self.store.metric_names() if name.startswith("sgx_")
            ]
        for selector in selectors:
            try:
                summary = boxplot(
                    selector, max(0, now_ms - self.boxplot_window_ms), now_ms, self.store
                )
            except EmptyWindow:
                continue
            self.latest_boxplots[selector.metric_name] = summary
            log.info(
                "boxplot metric=%s min=%g q1=%g median=%g q3=%g max=%g count=%d",
                summary.metric_name,
                summary.min,
                summary.q1,
                summary.median,
                summary.q3,
                summary.max,
                summary.count,
            )

    def _dispatch(self, transitions: list[AnomalyAlert]) -> None:
        for alert in transitions:
            for sink in self.sinks:
                try:
                    sink(alert)
                except Exception:
                    log.exception("alert sink failed")

    def _loop(self) -> None:
        try:
            start = self.clock.now_ms()
            due = [start + rule.stride_ms for rule in self.rules]
            boxplots_at = start + DEFAULT_STRIDE_MS
            while not self._stop.is_set():
                next_at = min(due + [boxplots_at])
                self.clock.wait_until(next_at, self._stop)
                if self._stop.is_set():
                    return
                now = self.clock.now_ms()
                for i, rule in enumerate(self.rules):
                    if due[i] > now:
                        continue
                    try:
                        self._dispatch(self.evaluate_window(rule, now))
                    except Exception as exc:
                        log.warning("rule %s skipped this stride: %s", rule.id, exc)
                    due[i] += rule.stride_ms
                if boxplots_at <= now:
                    self._refresh_boxplots(now)
                    boxplots_at += DEFAULT_STRIDE_MS
        finally:
            self.clock.task_finished()

    def start(self) -> None:
        if self._thread is not None:
            return
        self.clock.task_started()
        self._thread = threading.Thread(target=self._loop, name="analyzer", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self.clock.kick()
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None
