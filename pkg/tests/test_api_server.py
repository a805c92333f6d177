import json
import subprocess
import sys
import threading
import urllib.error
import urllib.request

import pytest

from enclavewatch.analyzer import AlertRegistry, AnomalyAlert
from enclavewatch.api_server import ApiServer, EventBus
from enclavewatch.config import ConfigError, load_config, parse_duration_ms
from enclavewatch.model import LabelSet, Sample, series_key
from enclavewatch.tsdb import AggSpec, MetricStore, QuerySpec, Selector, parse_matcher

MINIMAL_CONFIG = """
listen = "127.0.0.1:0"

[tsdb]
retention = "24h"

[scrape]
interval = "5s"
timeout = "2s"

[[rules]]
id = "target-down"
metric = "up"
agg = "min"
group_by = ["job", "instance"]
comparator = "<"
threshold = 1.0
window = "5m"
stride = "1m"
severity = "critical"
"""


def get_json(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return resp.status, json.loads(resp.read())


def get_error(url):
    try:
        urllib.request.urlopen(url, timeout=5)
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())
    raise AssertionError("expected an http error")


@pytest.fixture
def served():
    store = MetricStore()
    registry = AlertRegistry()
    bus = EventBus()
    server = ApiServer("127.0.0.1:0", store, registry, bus, heartbeat_ms=300)
    yield server, store, registry, bus
    server.stop()


class TestQueryRange:
    def test_plain_selection(self, served):
        server, store, _, _ = served
        key = series_key("up", LabelSet.of(job="tee"))
        for t in (1000, 2000, 3000):
            store.append(key, Sample(t, 1.0))
        status, payload = get_json(
            f"{server.url}/api/v1/query_range?name=up&start=0&end=5000&step=1000"
        )
        assert status == 200
        assert payload == [
            {
                "labels": {"job": "tee", "__name__": "up"},
                "points": [[1000, 1.0], [2000, 1.0], [3000, 1.0]],
            }
        ]

    def test_aggregated_matches_direct_evaluate(self, served):
        server, store, _, _ = served
        key = series_key("c", LabelSet.of(job="tee"))
        store.append(key, Sample(5000, 0.0))
        store.append(key, Sample(10_000, 150.0))
        url = (
            f"{server.url}/api/v1/query_range?name=c&start=0&end=10000&step=10000"
            f"&agg=rate&matchers=job%3D%3Dtee"
        )
        status, payload = get_json(url)
        assert status == 200
        direct = store.evaluate(
            QuerySpec(
                Selector("c", (parse_matcher("job==tee"),)),
                0,
                10_000,
                10_000,
                AggSpec("rate"),
            )
        )
        assert payload[0]["points"] == [[t, v] for t, v in direct[0][1]]

    def test_quantile_agg(self, served):
        server, store, _, _ = served
        for i in range(4):
            store.append(series_key("g", LabelSet.of(i=f"i{i}")), Sample(1000, float(i + 1)))
        url = f"{server.url}/api/v1/query_range?name=g&start=1000&end=1000&step=1000&agg=quantile(0.5)"
        _, payload = get_json(url)
        assert payload[0]["points"] == [[1000, 2.5]]

    def test_bad_regex_is_400(self, served):
        server, _, _, _ = served
        status, payload = get_error(
            f"{server.url}/api/v1/query_range?name=up&start=0&end=1&step=1&matchers=a%3D~%5B"
        )
        assert status == 400
        assert payload["code"] == "bad_query"

    def test_quantile_out_of_range_is_422(self, served):
        server, _, _, _ = served
        status, payload = get_error(
            f"{server.url}/api/v1/query_range?name=up&start=0&end=1&step=1&agg=quantile(1.5)"
        )
        assert status == 422
        assert payload["code"] == "quantile_out_of_range"

    def test_missing_parameter_is_400(self, served):
        server, _, _, _ = served
        status, payload = get_error(f"{server.url}/api/v1/query_range?name=up")
        assert status == 400
        assert "start" in payload["message"]

    def test_oversized_grid_is_400(self, served):
        server, _, _, _ = served
        status, payload = get_error(
            f"{server.url}/api/v1/query_range?name=up&start=0&end=99999999999999&step=5000"
        )
        assert status == 400
        assert payload["code"] == "bad_query"
        assert "grid" in payload["message"]


class TestTargetsAndAlerts:
    def test_targets_empty_without_scraper(self, served):
        server, _, _, _ = served
        status, payload = get_json(f"{server.url}/api/v1/targets")
        assert (status, payload) == (200, [])

    def test_alerts_filter(self, served):
        server, _, registry, _ = served
        registry.update(
            AnomalyAlert("r1", 0, 300_000, 5.0, 1.0, "critical", "firing", LabelSet.of(job="tee"))
        )
        status, payload = get_json(f"{server.url}/api/v1/alerts")
        assert status == 200 and len(payload) == 1
        assert payload[0]["rule_id"] == "r1"

        _, resolved = get_json(f"{server.url}/api/v1/alerts?state=resolved")
        assert resolved == []

    def test_unknown_state_is_400(self, served):
        server, _, _, _ = served
        status, payload = get_error(f"{server.url}/api/v1/alerts?state=bogus")
        assert status == 400


class SseClient(threading.Thread):
    def __init__(self, url, max_lines=50):
        super().__init__(daemon=True)
        self.url = url
        self.lines = []
        self.max_lines = max_lines
        self.ready = threading.Event()

    def run(self):
        try:
            with urllib.request.urlopen(self.url, timeout=10) as resp:
                self.ready.set()
                for raw in resp:
                    self.lines.append(raw.decode().rstrip("\n"))
                    if len(self.lines) >= self.max_lines:
                        return
        except Exception:
            self.ready.set()

    def events(self):
        return [json.loads(l[len("data: ") :]) for l in self.lines if l.startswith("data: ")]


class TestEventStream:
    def test_fanout_to_two_subscribers(self, served):
        server, _, _, bus = served
        a = SseClient(f"{server.url}/api/v1/stream", max_lines=2)
        b = SseClient(f"{server.url}/api/v1/stream", max_lines=2)
        a.start()
        b.start()
        a.ready.wait(5)
        b.ready.wait(5)
        import time

        time.sleep(0.2)  # let both handlers finish subscribing
        bus.publish("alert", {"rule_id": "r1"})
        a.join(timeout=5)
        b.join(timeout=5)
        assert a.events() == b.events() == [{"type": "alert", "payload": {"rule_id": "r1"}}]

    def test_heartbeat_when_idle(self, served):
        server, _, _, _ = served
        client = SseClient(f"{server.url}/api/v1/stream", max_lines=2)
        client.start()
        client.join(timeout=5)  # heartbeat_ms=300 in fixture
        assert any(line.startswith(": heartbeat") for line in client.lines)


class TestConfig:
    def test_minimal_config(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text(MINIMAL_CONFIG)
        config = load_config(str(path))
        assert config.scrape.interval_ms == 5000
        assert config.tsdb.retention_ms == 24 * 3_600_000
        [rule] = config.rules
        assert rule.id == "target-down"
        assert rule.window_ms == 300_000
        assert rule.query.step_ms == 10_000  # default 2x scrape interval

    def test_durations(self):
        assert parse_duration_ms("5s", "k") == 5000
        assert parse_duration_ms("1.5m", "k") == 90_000
        assert parse_duration_ms(250, "k") == 250
        with pytest.raises(ConfigError):
            parse_duration_ms("5 parsecs", "k")

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/does/not/exist.toml")

    def test_missing_discovery_path_is_named_error(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text('[scrape]\ndiscovery_path = "nope.json"\n')
        with pytest.raises(ConfigError) as exc:
            load_config(str(path))
        assert "discovery_path" in str(exc.value)

    def test_duplicate_rule_id_rejected(self, tmp_path):
        path = tmp_path / "stack.toml"
        rule = (
            '[[rules]]\nid = "r"\nmetric = "up"\nagg = "min"\n'
            'comparator = "<"\nthreshold = 1.0\n'
        )
        path.write_text(rule + rule)
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_custom_scenario(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text(
            """
[simulator]
scenario = "tiny"

[[scenarios]]
name = "tiny"
request_rate = 10.0
db_bytes = 4096
[scenarios.per_100_requests]
context_switches_host = 2.0
syscall_mix = { read = 1.0 }
"""
        )
        config = load_config(str(path))
        assert "tiny" in config.scenario_catalog()
        assert config.scenario_catalog()["tiny"].per_100_requests.syscall_mix == {"read": 1.0}


class TestCli:
    def run_cli(self, *argv, env=None):
        import os

        merged = dict(os.environ)
        if env:
            merged.update(env)
        return subprocess.run(
            [sys.executable, "-m", "enclavewatch", *argv],
            capture_output=True,
            text=True,
            timeout=120,
            env=merged,
        )

    def test_check_config_ok(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text(MINIMAL_CONFIG)
        proc = self.run_cli("--config", str(path), "check-config")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "ok"

    def test_missing_config_exits_1(self):
        proc = self.run_cli("--config", "missing.toml", "check-config")
        assert proc.returncode == 1
        assert "missing.toml" in proc.stderr

    def test_env_var_fallback(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text(MINIMAL_CONFIG)
        proc = self.run_cli("check-config", env={"EW_CONFIG": str(path)})
        assert proc.returncode == 0

    def test_bind_failure_exits_2(self, tmp_path):
        import socket

        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        path = tmp_path / "stack.toml"
        path.write_text(f'listen = "127.0.0.1:{port}"\n')
        try:
            proc = self.run_cli("--config", str(path), "aggregator")
            assert proc.returncode == 2
        finally:
            sock.close()

    def test_replay_writes_snapshot(self, tmp_path):
        path = tmp_path / "stack.toml"
        path.write_text(
            'listen = "127.0.0.1:0"\n[tsdb]\nsnapshot_path = "replay.ewt"\n'
        )
        proc = self.run_cli(
            "--config", str(path), "replay", "--scenario", "native-redis",
            "--duration", "30", "--no-api",
        )
        assert proc.returncode == 0, proc.stderr
        summary = json.loads(proc.stdout)
        assert summary["requests"] == 60_000
        assert summary["up_samples"] >= 10
        snapshot = tmp_path / "replay.ewt"
        assert snapshot.exists()
        recovered = MetricStore(snapshot_path=str(snapshot))
        assert "up" in recovered.metric_names()
        assert "sgx_nr_evicted" in recovered.metric_names()
        recovered.close()

    def test_replay_unknown_scenario(self):
        proc = self.run_cli("replay", "--scenario", "nope", "--duration", "1", "--no-api")
        assert proc.returncode == 1

    def test_sigterm_shuts_down_cleanly_within_five_seconds(self, tmp_path):
        import signal
        import time

        path = tmp_path / "stack.toml"
        path.write_text(
            'listen = "127.0.0.1:0"\n'
            "[scrape]\ninterval = \"2s\"\ntimeout = \"1s\"\n"
            "[tsdb]\nsnapshot_path = \"term.ewt\"\n"
        )
        proc = subprocess.Popen(
            [sys.executable, "-m", "enclavewatch", "--config", str(path),
             "--log-level", "warning", "all"],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        try:
            time.sleep(5)  # let a scrape round land
            started = time.monotonic()
            proc.send_signal(signal.SIGTERM)
            code = proc.wait(timeout=10)
            elapsed = time.monotonic() - started
            assert code == 0
            assert elapsed < 5.0, f"shutdown took {elapsed:.1f}s"
        finally:
            if proc.poll() is None:
                proc.kill()
        snapshot = tmp_path / "term.ewt"
        assert snapshot.exists()
        store = MetricStore(snapshot_path=str(snapshot))
        assert "up" in store.metric_names()
        store.close()
