"""Stack configuration: one TOML file wiring every component.

Key tree (all optional unless noted, durations accept integers in
milliseconds or strings with an ms/s/m/h suffix):

    listen = "127.0.0.1:9780"          # API server

    [tsdb]
    retention = "24h"
    snapshot_path = "data/metrics.ewt"

    [scrape]
    interval = "5s"
    timeout = "2s"
    discovery_path = "targets.json"    # must exist when set

    [exporter]
    tee_listen = "127.0.0.1:9710"
    system_listen = "127.0.0.1:9711"
    static_labels = { node = "desk" }
    filter_pids = [1234]

    [simulator]
    scenario = "native-redis"          # builtin or defined below
    epc_total_pages = 24064
    seed = 42

    [[scenarios]]                      # optional custom workloads
    name = "my-workload"
    request_rate = 100.0
    db_bytes = 1048576
    [scenarios.per_100_requests]
    evicted_pages = 1.0
    # ... remaining rate fields, plus syscall_mix = { read = 5.0 }

    [[rules]]
    id = "epc-eviction-rate"
    metric = "sgx_nr_evicted"
    matchers = ["job==tee"]
    agg = "rate"                       # sum|avg|min|max|count|rate|quantile(q)
    step = "60s"
    group_by = ["job", "instance"]
    comparator = ">"
    threshold = 1.0
    window = "5m"
    stride = "1m"
    min_violation_points = 1
    severity = "critical"

    [dashboard]
    assets = "frontend/dist"           # must exist when set

    [stream]
    heartbeat = "15s"

The path referenced by ``scrape.discovery_path`` and ``dashboard.assets``
must exist at startup; a missing path is a named startup error. The
``EW_CONFIG`` environment variable supplies the config path when the CLI
flag is absent.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .analyzer import DEFAULT_STRIDE_MS, DEFAULT_WINDOW_MS, ThresholdRule
from .model import EMPTY_LABELS, LabelSet
from .scraper import DEFAULT_INTERVAL_MS, DEFAULT_TIMEOUT_MS
from .sgx_sim import (
    BUILTIN_SCENARIOS,
    DEFAULT_EPC_PAGES,
    PerHundredRequests,
    WorkloadScenario,
)
from .tsdb import AggSpec, QuerySpec, Selector, parse_matcher

ENV_CONFIG = "EW_CONFIG"

_DURATION = re.compile(r"(\d+(?:\.\d+)?)\s*(ms|s|m|h)\Z")
_UNIT_MS = {"ms": 1, "s": 1000, "m": 60_000, "h": 3_600_000}
_QUANTILE = re.compile(r"quantile\((.+)\)\Z")


class ConfigError(ValueError):
    pass


def parse_duration_ms(value, key: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a duration, got a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        m = _DURATION.match(value.strip())
        if m:
            return int(float(m.group(1)) * _UNIT_MS[m.group(2)])
    raise ConfigError(f"{key}: expected milliseconds or '<n>ms|s|m|h', got {value!r}")


def parse_agg(text: str, group_by: tuple[str, ...], key: str) -> AggSpec:
    m = _QUANTILE.match(text.strip())
    if m:
        try:
            q = float(m.group(1))
        except ValueError:
            raise ConfigError(f"{key}: bad quantile parameter {m.group(1)!r}") from None
        return AggSpec("quantile", q=q, group_by=group_by)
    try:
        return AggSpec(text.strip(), group_by=group_by)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


@dataclass
class TsdbSettings:
    retention_ms: int = 24 * 3_600_000
    snapshot_path: str | None = None


@dataclass
class ScrapeSettings:
    interval_ms: int = DEFAULT_INTERVAL_MS
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    discovery_path: str | None = None


@dataclass
class ExporterSettings:
    tee_listen: str = "127.0.0.1:0"
    system_listen: str = "127.0.0.1:0"
    static_labels: LabelSet = EMPTY_LABELS
    filter_pids: list[int] = field(default_factory=list)
    os_proc_reader: bool = False  # Linux-only /proc adapter on the system exporter


@dataclass
class SimulatorSettings:
    scenario: str = "native-redis"
    epc_total_pages: int = DEFAULT_EPC_PAGES
    seed: int = 42


@dataclass
class StackConfig:
    listen: str = "127.0.0.1:9780"
    tsdb: TsdbSettings = field(default_factory=TsdbSettings)
    scrape: ScrapeSettings = field(default_factory=ScrapeSettings)
    exporter: ExporterSettings = field(default_factory=ExporterSettings)
    simulator: SimulatorSettings = field(default_factory=SimulatorSettings)
    rules: list[ThresholdRule] = field(default_factory=list)
    scenarios: dict[str, WorkloadScenario] = field(default_factory=dict)
    dashboard_assets: str | None = None
    stream_heartbeat_ms: int = 15_000

    def scenario_catalog(self) -> dict[str, WorkloadScenario]:
        catalog = dict(BUILTIN_SCENARIOS)
        catalog.update(self.scenarios)
        return catalog


def _parse_rule(entry: dict, index: int, default_interval_ms: int) -> ThresholdRule:
    key = f"rules[{index}]"
    for required in ("id", "metric", "agg", "comparator", "threshold"):
        if required not in entry:
            raise ConfigError(f"{key}: missing {required!r}")
    try:
        matchers = tuple(parse_matcher(m) for m in entry.get("matchers", []))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    group_by = tuple(str(g) for g in entry.get("group_by", []))
    agg = parse_agg(str(entry["agg"]), group_by, key)
    step_ms = parse_duration_ms(entry.get("step", default_interval_ms * 2), f"{key}.step")
    try:
        query = QuerySpec(Selector(str(entry["metric"]), matchers), 0, 0, step_ms, agg)
        return ThresholdRule(
            id=str(entry["id"]),
            query=query,
            comparator=str(entry["comparator"]),
            threshold=float(entry["threshold"]),
            window_ms=parse_duration_ms(entry.get("window", DEFAULT_WINDOW_MS), f"{key}.window"),
            stride_ms=parse_duration_ms(entry.get("stride", DEFAULT_STRIDE_MS), f"{key}.stride"),
            min_violation_points=int(entry.get("min_violation_points", 1)),
            severity=str(entry.get("severity", "warning")),
        )
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _parse_scenario(entry: dict, index: int) -> WorkloadScenario:
    key = f"scenarios[{index}]"
    for required in ("name", "request_rate", "db_bytes"):
        if required not in entry:
            raise ConfigError(f"{key}: missing {required!r}")
    rates_raw = dict(entry.get("per_100_requests", {}))
    syscall_mix = {str(k): float(v) for k, v in rates_raw.pop("syscall_mix", {}).items()}
    try:
        rates = PerHundredRequests(
            **{k: float(v) for k, v in rates_raw.items()}, syscall_mix=syscall_mix
        )
        return WorkloadScenario(
            name=str(entry["name"]),
            request_rate=float(entry["request_rate"]),
            db_bytes=int(entry["db_bytes"]),
            enclave=entry.get("enclave"),
            per_100_requests=rates,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config(data: dict, base_dir: str = ".") -> StackConfig:
    config = StackConfig()
    config.listen = str(data.get("listen", config.listen))

    tsdb = data.get("tsdb", {})
    config.tsdb.retention_ms = parse_duration_ms(
        tsdb.get("retention", config.tsdb.retention_ms), "tsdb.retention"
    )
    if config.tsdb.retention_ms <= 0:
        raise ConfigError("tsdb.retention must be positive")
    if "snapshot_path" in tsdb:
        config.tsdb.snapshot_path = os.path.join(base_dir, str(tsdb["snapshot_path"]))

    scrape = data.get("scrape", {})
    config.scrape.interval_ms = parse_duration_ms(
        scrape.get("interval", config.scrape.interval_ms), "scrape.interval"
    )
    config.scrape.timeout_ms = parse_duration_ms(
        scrape.get("timeout", config.scrape.timeout_ms), "scrape.timeout"
    )
    if not 0 < config.scrape.timeout_ms < config.scrape.interval_ms:
        raise ConfigError("scrape.timeout must be positive and below scrape.interval")
    if "discovery_path" in scrape:
        path = os.path.join(base_dir, str(scrape["discovery_path"]))
        if not os.path.exists(path):
            raise ConfigError(f"scrape.discovery_path does not exist: {path}")
        config.scrape.discovery_path = path

    exporter = data.get("exporter", {})
    config.exporter.tee_listen = str(exporter.get("tee_listen", config.exporter.tee_listen))
    config.exporter.system_listen = str(
        exporter.get("system_listen", config.exporter.system_listen)
    )
    statics = exporter.get("static_labels", {})
    if not isinstance(statics, dict):
        raise ConfigError("exporter.static_labels must be a table")
    try:
        config.exporter.static_labels = LabelSet.of(
            **{str(k): str(v) for k, v in statics.items()}
        )
    except ValueError as exc:
        raise ConfigError(f"exporter.static_labels: {exc}") from None
    config.exporter.filter_pids = [int(p) for p in exporter.get("filter_pids", [])]
    config.exporter.os_proc_reader = bool(exporter.get("os_proc_reader", False))

    simulator = data.get("simulator", {})
    config.simulator.scenario = str(simulator.get("scenario", config.simulator.scenario))
    config.simulator.epc_total_pages = int(
        simulator.get("epc_total_pages", config.simulator.epc_total_pages)
    )
    config.simulator.seed = int(simulator.get("seed", config.simulator.seed))

    for i, entry in enumerate(data.get("scenarios", [])):
        scenario = _parse_scenario(entry, i)
        config.scenarios[scenario.name] = scenario
    if config.simulator.scenario not in config.scenario_catalog():
        raise ConfigError(f"simulator.scenario unknown: {config.simulator.scenario!r}")

    seen_rule_ids = set()
    for i, entry in enumerate(data.get("rules", [])):
        rule = _parse_rule(entry, i, config.scrape.interval_ms)
        if rule.id in seen_rule_ids:
            raise ConfigError(f"rules[{i}]: duplicate rule id {rule.id!r}")
        seen_rule_ids.add(rule.id)
        config.rules.append(rule)

    dashboard = data.get("dashboard", {})
    if "assets" in dashboard:
        path = os.path.join(base_dir, str(dashboard["assets"]))
        if not os.path.isdir(path):
            raise ConfigError(f"dashboard.assets does not exist: {path}")
        config.dashboard_assets = path

    stream = data.get("stream", {})
    config.stream_heartbeat_ms = parse_duration_ms(
        stream.get("heartbeat", config.stream_heartbeat_ms), "stream.heartbeat"
    )
    return config


def load_config(path: str) -> StackConfig:
    """Load and validate the stack config; raises :class:`ConfigError`."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
