"""Command-line entrypoint wiring the stack together.

Subcommands:
    all          exporters + scraper + tsdb + analyzer + api in one process
    exporter     a single exporter process (--kind tee|system)
    aggregator   scraper + tsdb + analyzer + api, targets from discovery
    replay       run a named scenario through the full pipeline on a
                 simulated clock, then exit
    check-config validate the config file and exit

Exit codes: 0 ok, 1 invalid configuration, 2 bind failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time

from . import __version__
from .analyzer import Analyzer, log_sink
from .api_server import ApiServer, EventBus
from .clockwork import ManualClock, SystemClock
from .config import ENV_CONFIG, ConfigError, StackConfig, load_config
from .exporters import (
    BindError,
    ExporterConfig,
    ExporterServer,
    OsProcReaderSource,
    SystemMetricsSource,
    TeeSimulatorSource,
    serve_metrics,
)
from .scraper import ScrapeTarget, Scraper
from .sgx_sim import ScenarioEngine, SgxDriver
from .tsdb import MetricStore, QuerySpec, Selector

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BIND = 2


class ScenarioPump:
    """Advances a scenario engine along a clock and feeds the SME source."""

    def __init__(self, engine: ScenarioEngine, sme: SystemMetricsSource | None):
        self.engine = engine
        self.sme = sme
        self._consumed = 0

    def advance_to_ms(self, elapsed_ms: int) -> None:
        self.engine.advance_to_ms(elapsed_ms)
        events = self.engine.stream.events
        if self.sme is not None and self._consumed < len(events):
            self.sme.consume(events[self._consumed :])
        # drop delivered events so long runs stay bounded
        del events[: len(events)]
        self._consumed = 0


class _RealTimePump(threading.Thread):
    def __init__(self, pump: ScenarioPump, tick_s: float = 0.5):
        super().__init__(name="scenario-pump", daemon=True)
        self.pump = pump
        self.tick_s = tick_s
        self.stop_event = threading.Event()

    def run(self) -> None:
        start = time.monotonic()
        while not self.stop_event.is_set():
            self.pump.advance_to_ms(int((time.monotonic() - start) * 1000))
            self.stop_event.wait(self.tick_s)

    def stop(self) -> None:
        self.stop_event.set()
        self.join(timeout=5)


class Stack:
    """All components of one process, with ordered graceful shutdown."""

    def __init__(self, config: StackConfig, clock=None, with_exporters=True, with_api=True):
        self.config = config
        self.clock = clock if clock is not None else SystemClock()
        self.store = MetricStore(snapshot_path=config.tsdb.snapshot_path)
        self.bus = EventBus()
        self.exporters: list[ExporterServer] = []
        self.pump: ScenarioPump | None = None
        self._realtime_pump: _RealTimePump | None = None

        self.scraper = Scraper(
            self.store,
            self.clock,
            on_event=self.bus.publish,
            discovery_path=config.scrape.discovery_path,
        )
        self.analyzer = Analyzer(
            config.rules,
            self.store,
            self.clock,
            sinks=[log_sink, self.bus.alert_sink],
        )
        self.api: ApiServer | None = None
        if with_api:
            self.api = ApiServer(
                config.listen,
                self.store,
                self.analyzer.registry,
                self.bus,
                scraper=self.scraper,
                assets_path=config.dashboard_assets,
                heartbeat_ms=config.stream_heartbeat_ms,
            )

        if with_exporters:
            scenario = config.scenario_catalog()[config.simulator.scenario]
            driver = SgxDriver(config.simulator.epc_total_pages, config.simulator.seed)
            engine = ScenarioEngine(scenario, config.simulator.seed, driver)
            sme = SystemMetricsSource(config.exporter.filter_pids or None)
            self.pump = ScenarioPump(engine, sme)
            statics = config.exporter.static_labels
            tee = serve_metrics(
                ExporterConfig(
                    listen=config.exporter.tee_listen,
                    sources=[TeeSimulatorSource(driver)],
                    static_labels=statics,
                )
            )
            system_sources: list = [sme]
            if config.exporter.os_proc_reader:
                system_sources.append(OsProcReaderSource())
            system = serve_metrics(
                ExporterConfig(
                    listen=config.exporter.system_listen,
                    sources=system_sources,
                    static_labels=statics,
                )
            )
            self.exporters = [tee, system]
            for job, server in (("tee", tee), ("system", system)):
                self.scraper.add_target(
                    ScrapeTarget(
                        job,
                        server.url,
                        interval_ms=config.scrape.interval_ms,
                        timeout_ms=config.scrape.timeout_ms,
                    )
                )

    def start(self, realtime_pump: bool = True) -> None:
        if self.pump is not None and realtime_pump:
            self._realtime_pump = _RealTimePump(self.pump)
            self._realtime_pump.start()
        self.scraper.start()
        self.analyzer.start()

    def stop(self) -> None:
        if self._realtime_pump is not None:
            self._realtime_pump.stop()
        self.analyzer.stop()
        self.scraper.stop()
        for server in self.exporters:
            server.stop()
        if self.api is not None:
            self.api.stop()
        self.bus.close()
        self.store.flush()
        self.store.close()


def _run_until_signal(stop_callback) -> int:
    done = threading.Event()

    def handler(signum, frame):
        log.info("signal %d: shutting down", signum)
        done.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    try:
        while not done.wait(0.5):
            pass
    finally:
        stop_callback()
    return EXIT_OK


def _load(args) -> StackConfig:
    path = args.config or os.environ.get(ENV_CONFIG)
    if path is None:
        return StackConfig()
    config = load_config(path)
    if args.listen:
        config.listen = args.listen
    return config


def cmd_check_config(args) -> int:
    path = args.config or os.environ.get(ENV_CONFIG)
    if path is None:
        print("error: check-config needs --config or EW_CONFIG", file=sys.stderr)
        return EXIT_CONFIG
    load_config(path)
    print("ok")
    return EXIT_OK


def cmd_all(args) -> int:
    config = _load(args)
    stack = Stack(config)
    stack.start()
    log.info("api listening on http://%s:%d", stack.api.host, stack.api.port)
    return _run_until_signal(stack.stop)


def cmd_aggregator(args) -> int:
    config = _load(args)
    stack = Stack(config, with_exporters=False)
    stack.start()
    return _run_until_signal(stack.stop)


def cmd_exporter(args) -> int:
    config = _load(args)
    scenario = config.scenario_catalog()[config.simulator.scenario]
    driver = SgxDriver(config.simulator.epc_total_pages, config.simulator.seed)
    engine = ScenarioEngine(scenario, config.simulator.seed, driver)
    if args.kind == "tee":
        sme = None
        sources: list = [TeeSimulatorSource(driver)]
        listen = args.listen or config.exporter.tee_listen
    else:
        sme = SystemMetricsSource(config.exporter.filter_pids or None)
        sources = [sme]
        if config.exporter.os_proc_reader:
            sources.append(OsProcReaderSource())
        listen = args.listen or config.exporter.system_listen
    pump = _RealTimePump(ScenarioPump(engine, sme))
    server = serve_metrics(
        ExporterConfig(listen=listen, sources=sources, static_labels=config.exporter.static_labels)
    )
    pump.start()
    log.info("%s exporter on %s", args.kind, server.url)

    def stop():
        pump.stop()
        server.stop()

    return _run_until_signal(stop)


def cmd_replay(args) -> int:
    config = _load(args)
    catalog = config.scenario_catalog()
    if args.scenario not in catalog:
        print(
            f"error: unknown scenario {args.scenario!r}; have {sorted(catalog)}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    config.simulator.scenario = args.scenario

    clock = ManualClock()
    stack = Stack(config, clock=clock, with_api=not args.no_api)
    stack.start(realtime_pump=False)
    duration_ms = int(args.duration * 1000)
    step_ms = config.scrape.interval_ms
    try:
        elapsed = 0
        while elapsed < duration_ms:
            step = min(step_ms, duration_ms - elapsed)
            elapsed += step
            stack.pump.advance_to_ms(elapsed)
            clock.advance(step)
    finally:
        stack.stop()

    up = stack.store.select_range(QuerySpec(Selector("up"), 0, duration_ms, 1))
    alerts = stack.analyzer.registry.alerts()
    summary = {
        "scenario": args.scenario,
        "duration_s": args.duration,
        "requests": stack.pump.engine.requests_done,
        "series": len(stack.store.metric_names()),
        "up_samples": sum(len(samples) for _, samples in up),
        "alerts": [a.as_dict() for a in alerts],
        "snapshot": config.tsdb.snapshot_path,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclavewatch",
        description="Desk-scale TEE performance monitoring stack",
    )
    parser.add_argument("--version", action="version", version=f"enclavewatch {__version__}")
    parser.add_argument("--config", help=f"config file (or ${ENV_CONFIG})")
    parser.add_argument("--listen", help="override the api listen address")
    parser.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("all", help="run the whole stack in one process")
    sub.add_parser("aggregator", help="scraper + tsdb + analyzer + api only")

    exporter = sub.add_parser("exporter", help="run one exporter")
    exporter.add_argument("--kind", choices=["tee", "system"], required=True)

    replay = sub.add_parser("replay", help="replay a scenario through the pipeline")
    replay.add_argument("--scenario", required=True)
    replay.add_argument("--duration", type=float, required=True, help="simulated seconds")
    replay.add_argument("--no-api", action="store_true", help="skip the api server")

    sub.add_parser("check-config", help="validate the config file")
    return parser


COMMANDS = {
    "all": cmd_all,
    "aggregator": cmd_aggregator,
    "exporter": cmd_exporter,
    "replay": cmd_replay,
    "check-config": cmd_check_config,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BIND


if __name__ == "__main__":
    sys.exit(main())
