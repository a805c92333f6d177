"""HTTP control surface: query API, target/alert listings, live event stream.

Endpoints (JSON unless noted):

    GET /api/v1/query_range?name=&matchers=&start=&end=&step=&agg=&group_by=
        -> [{"labels": {...}, "points": [[t_ms, value], ...]}, ...]
    GET /api/v1/targets
        -> [{"job", "instance", "health", "last_scrape_ms", "consecutive_failures"}]
    GET /api/v1/alerts?state=firing|resolved
    GET /api/v1/stream          server-sent events, one JSON object per
                                ``data:`` line: {"type": sample_batch |
                                alert | target_health, "payload": ...};
                                heartbeat comment every 15 s
    GET /healthz
    GET /ui/...                 static dashboard assets when configured

Error responses always carry ``{"code", "message"}``. The ``matchers``
query parameter repeats (``matchers=job==tee&matchers=pid=~1.*``);
``agg`` accepts ``sum|avg|min|max|count|rate|quantile(q)``.
"""
from __future__ import annotations

import json
import logging
import mimetypes
import os
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .analyzer import FIRING, RESOLVED, AlertRegistry, AnomalyAlert
from .config import ConfigError, parse_agg
from .exporters import BindError, split_listen_address
from .scraper import Scraper
from .tsdb import (
    BadRegex,
    MetricStore,
    QuantileOutOfRange,
    QuerySpec,
    Selector,
    parse_matcher,
)

log = logging.getLogger(__name__)

STREAM_QUEUE_LIMIT = 256
MAX_GRID_POINTS = 20_000


class EventBus:
    """Fan-out to SSE subscribers over bounded queues.

    A subscriber that falls :data:`STREAM_QUEUE_LIMIT` events behind is
    dropped (its queue receives a ``None`` poison pill).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=STREAM_QUEUE_LIMIT)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def publish(self, event_type: str, payload) -> None:
        event = {"type": event_type, "payload": payload}
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait(event)
            except queue.Full:
                log.warning("dropping slow event stream subscriber")
                self.unsubscribe(q)
                try:
                    q.put_nowait(None)
                except queue.Full:
                    pass

    def close(self) -> None:
        with self._lock:
            subscribers = list(self._subscribers)
            self._subscribers.clear()
        for q in subscribers:
            try:
                q.put_nowait(None)
            except queue.Full:
                pass

    def alert_sink(self, alert: AnomalyAlert) -> None:
        self.publish("alert", alert.as_dict())


def _query_spec_from_params(params: dict[str, list[str]]) -> QuerySpec:
    def single(key, default=None):
        values = params.get(key)
        if not values:
            if default is None:
                raise ConfigError(f"missing query parameter {key!r}")
            return default
        return values[0]

    name = single("name")
    try:
        matchers = tuple(parse_matcher(m) for m in params.get("matchers", []))
        start = int(single("start"))
        end = int(single("end"))
        step = int(single("step"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    agg = None
    if "agg" in params:
        group_by = tuple(g for g in single("group_by", "").split(",") if g)
        agg = parse_agg(single("agg"), group_by, "agg")
    if step > 0 and (end - start) // step + 1 > MAX_GRID_POINTS:
        raise ConfigError(
            f"query grid exceeds {MAX_GRID_POINTS} points; use a larger step"
        )
    try:
        return QuerySpec(Selector(name, matchers), start, end, step, agg)
    except QuantileOutOfRange:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


class _ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # -- helpers ----------------------------------------------------------

    def _json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str) -> None:
        self._json(status, {"code": code, "message": message})

    # -- routes -----------------------------------------------------------

    def do_GET(self):  # noqa: N802
        parsed = urlparse(self.path)
        route = parsed.path
        try:
            if route == "/healthz":
                body = b"ok\n"
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
            elif route == "/api/v1/query_range":
                self._query_range(parse_qs(parsed.query))
            elif route == "/api/v1/targets":
                self._targets()
            elif route == "/api/v1/alerts":
                self._alerts(parse_qs(parsed.query))
            elif route == "/api/v1/stream":
                self._stream()
            elif route == "/" or route == "/ui":
                self.send_response(302)
                self.send_header("Location", "/ui/")
                self.send_header("Content-Length", "0")
                self.end_headers()
            elif route.startswith("/ui/"):
                self._static(route[len("/ui/") :] or "index.html")
            else:
                self._error(404, "not_found", f"no route {route}")
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away
        except Exception as exc:
            log.exception("request failed: %s", route)
            try:
                self._error(500, "internal", str(exc))
            except OSError:
                pass

    def _query_range(self, params) -> None:
        try:
            spec = _query_spec_from_params(params)
            if spec.agg is not None:
                results = self.server.store.evaluate(spec)
                payload = [
                    {"labels": labels.as_dict(), "points": [[t, v] for t, v in points]}
                    for labels, points in results
                ]
            else:
                results = self.server.store.select_range(spec)
                payload = [
                    {
                        "labels": {**key.labels.as_dict(), "__name__": key.metric_name},
                        "points": [[s.timestamp_ms, s.value] for s in samples],
                    }
                    for key, samples in results
                ]
        except QuantileOutOfRange as exc:
            self._error(422, "quantile_out_of_range", str(exc))
            return
        except (ConfigError, BadRegex, ValueError) as exc:
            self._error(400, "bad_query", str(exc))
            return
        self._json(200, payload)

    def _targets(self) -> None:
        scraper: Scraper | None = self.server.scraper
        targets = scraper.targets() if scraper is not None else []
        self._json(
            200,
            [
                {
                    "job": t.job,
                    "instance": t.instance,
                    "health": t.health,
                    "last_scrape_ms": t.last_scrape_ms,
                    "consecutive_failures": t.consecutive_failures,
                }
                for t in targets
            ],
        )

    def _alerts(self, params) -> None:
        state = params.get("state", [None])[0]
        if state is not None and state not in (FIRING, RESOLVED):
            self._error(400, "bad_state", f"unknown alert state {state!r}")
            return
        registry: AlertRegistry = self.server.registry
        self._json(200, [a.as_dict() for a in registry.alerts(state)])

    def _stream(self) -> None:
        bus: EventBus = self.server.bus
        subscription = bus.subscribe()
        heartbeat_s = self.server.heartbeat_ms / 1000.0
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        try:
            while not self.server.closing.is_set():
                try:
                    event = subscription.get(timeout=heartbeat_s)
                except queue.Empty:
                    self.wfile.write(b": heartbeat\n\n")
                    self.wfile.flush()
                    continue
                if event is None:
                    return  # dropped or shutting down
                data = json.dumps(event)
                self.wfile.write(f"data: {data}\n\n".encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            bus.unsubscribe(subscription)

    def _static(self, relative: str) -> None:
        root = self.server.assets_path
        if root is None:
            self._error(404, "no_dashboard", "dashboard assets not configured")
            return
        path = os.path.normpath(os.path.join(root, relative))
        if not path.startswith(os.path.abspath(root)):
            self._error(404, "not_found", "path escapes asset root")
            return
        if not os.path.isfile(path):
            self._error(404, "not_found", relative)
            return
        ctype = mimetypes.guess_type(path)[0] or "application/octet-stream"
        body = open(path, "rb").read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("api http: " + fmt, *args)


class ApiServer:
    """The API/UI HTTP service; stop with :meth:`stop`."""

    def __init__(
        self,
        listen: str,
        store: MetricStore,
        registry: AlertRegistry,
        bus: EventBus,
        scraper: Scraper | None = None,
        assets_path: str | None = None,
        heartbeat_ms: int = 15_000,
    ):
        host, port = split_listen_address(listen)
        try:
            self._httpd = ThreadingHTTPServer((host, port), _ApiHandler)
        except OSError as exc:
            raise BindError(f"cannot bind {listen}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._httpd.store = store
        self._httpd.registry = registry
        self._httpd.bus = bus
        self._httpd.scraper = scraper
        self._httpd.assets_path = os.path.abspath(assets_path) if assets_path else None
        self._httpd.heartbeat_ms = heartbeat_ms
        self._httpd.closing = threading.Event()
        self.host = host
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"api:{self.port}", daemon=True
        )
        self._thread.start()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        self._httpd.closing.set()
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
