/**
 * The only module allowed to talk to the network. Every request the
 * dashboard makes goes through ApiClient or SseClient, and both speak only
 * the documented endpoints:
 *
 *   GET /api/v1/query_range   GET /api/v1/targets
 *   GET /api/v1/alerts        GET /api/v1/stream (server-sent events)
 *   GET /healthz
 */

export interface QueryRangeParams {
  name: string;
  matchers?: string[];
  startMs: number;
  endMs: number;
  stepMs: number;
  agg?: string; // sum|avg|min|max|count|rate|quantile(q)
  groupBy?: string[];
}

export interface SeriesResult {
  labels: Record<string, string>;
  points: [number, number][];
}

export interface TargetInfo {
  job: string;
  instance: string;
  health: "unknown" | "up" | "down";
  last_scrape_ms: number | null;
  consecutive_failures: number;
}

export interface AlertInfo {
  rule_id: string;
  window_start_ms: number;
  window_end_ms: number;
  observed: number;
  threshold: number;
  severity: "info" | "warning" | "critical";
  state: "firing" | "resolved";
  labels: Record<string, string>;
}

export interface StreamEvent {
  type: "sample_batch" | "alert" | "target_health";
  payload: Record<string, unknown>;
}

export type FetchLike = (url: string) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}>;

export function queryRangeSearch(p: QueryRangeParams): URLSearchParams {
  const search = new URLSearchParams();
  search.set("name", p.name);
  for (const matcher of p.matchers ?? []) {
    search.append("matchers", matcher);
  }
  search.set("start", String(p.startMs));
  search.set("end", String(p.endMs));
  search.set("step", String(p.stepMs));
  if (p.agg) {
    search.set("agg", p.agg);
    if (p.groupBy && p.groupBy.length > 0) {
      search.set("group_by", p.groupBy.join(","));
    }
  }
  return search;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function getJson(fetchFn: FetchLike, url: string): Promise<unknown> {
  const resp = await fetchFn(url);
  if (!resp.ok) {
    let code = "http_error";
    let message = `status ${resp.status}`;
    try {
      const body = (await resp.json()) as { code?: string; message?: string };
      code = body.code ?? code;
      message = body.message ?? message;
    } catch {
      // error body was not json; keep the defaults
    }
    throw new ApiError(resp.status, code, message);
  }
  return resp.json();
}

export class ApiClient {
  constructor(
    readonly base: string = "",
    private readonly fetchFn: FetchLike = (url) => fetch(url),
  ) {}

  queryRangeUrl(p: QueryRangeParams): string {
    return `${this.base}/api/v1/query_range?${queryRangeSearch(p).toString()}`;
  }

  async queryRange(p: QueryRangeParams): Promise<SeriesResult[]> {
    return (await getJson(this.fetchFn, this.queryRangeUrl(p))) as SeriesResult[];
  }

  async targets(): Promise<TargetInfo[]> {
    return (await getJson(this.fetchFn, `${this.base}/api/v1/targets`)) as TargetInfo[];
  }

  async alerts(state?: "firing" | "resolved"): Promise<AlertInfo[]> {
    const suffix = state ? `?state=${state}` : "";
    return (await getJson(this.fetchFn, `${this.base}/api/v1/alerts${suffix}`)) as AlertInfo[];
  }

  async healthz(): Promise<boolean> {
    try {
      const resp = await this.fetchFn(`${this.base}/healthz`);
      return resp.ok;
    } catch {
      return false;
    }
  }

  streamUrl(): string {
    return `${this.base}/api/v1/stream`;
  }
}

/**
 * Incremental server-sent-events parser. Heartbeats arrive as SSE comment
 * lines (": heartbeat"), which EventSource hides, so the live connection
 * uses a streaming fetch and this parser instead; the stale-data badge
 * hangs off onHeartbeat going quiet.
 */
export class SseParser {
  private buffer = "";
  private dataLines: string[] = [];

  constructor(
    readonly onEvent: (event: StreamEvent) => void,
    readonly onHeartbeat: () => void,
  ) {}

  feed(chunk: string): void {
    this.buffer += chunk;
    let index: number;
    while ((index = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, index).replace(/\r$/, "");
      this.buffer = this.buffer.slice(index + 1);
      this.line(line);
    }
  }

  private line(line: string): void {
    if (line.startsWith(":")) {
      this.onHeartbeat();
      return;
    }
    if (line.startsWith("data:")) {
      this.dataLines.push(line.slice(5).replace(/^ /, ""));
      return;
    }
    if (line === "" && this.dataLines.length > 0) {
      const raw = this.dataLines.join("\n");
      this.dataLines = [];
      try {
        this.onEvent(JSON.parse(raw) as StreamEvent);
      } catch {
        // not json; ignore the frame
      }
    }
  }
}

export type StreamStatus = "connecting" | "live" | "stale" | "down";

export interface SseClientOptions {
  /** no event or heartbeat for this long marks the stream stale */
  staleAfterMs?: number;
  reconnectDelayMs?: number;
}

export class SseClient {
  status: StreamStatus = "connecting";
  private controller: AbortController | null = null;
  private staleTimer: ReturnType<typeof setTimeout> | null = null;
  private closed = false;

  constructor(
    private readonly url: string,
    private readonly onEvent: (event: StreamEvent) => void,
    private readonly onStatus: (status: StreamStatus) => void,
    private readonly options: SseClientOptions = {},
  ) {}

  start(): void {
    void this.connect();
  }

  private setStatus(status: StreamStatus): void {
    if (this.status !== status) {
      this.status = status;
      this.onStatus(status);
    }
  }

  private armStaleTimer(): void {
    if (this.staleTimer !== null) {
      clearTimeout(this.staleTimer);
    }
    this.staleTimer = setTimeout(() => {
      this.setStatus("stale");
    }, this.options.staleAfterMs ?? 45_000);
  }

  private async connect(): Promise<void> {
    while (!this.closed) {
      this.controller = new AbortController();
      const parser = new SseParser(
        (event) => {
          this.setStatus("live");
          this.armStaleTimer();
          this.onEvent(event);
        },
        () => {
          this.setStatus("live");
          this.armStaleTimer();
        },
      );
      try {
        const resp = await fetch(this.url, {
          signal: this.controller.signal,
          headers: { Accept: "text/event-stream" },
        });
        if (!resp.ok || resp.body === null) {
          throw new Error(`stream status ${resp.status}`);
        }
        this.setStatus("live");
        this.armStaleTimer();
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          parser.feed(decoder.decode(value, { stream: true }));
        }
      } catch {
        // fall through to reconnect
      }
      if (this.closed) return;
      this.setStatus("down");
      await new Promise((resolve) =>
        setTimeout(resolve, this.options.reconnectDelayMs ?? 3000),
      );
    }
  }

  close(): void {
    this.closed = true;
    if (this.staleTimer !== null) clearTimeout(this.staleTimer);
    this.controller?.abort();
  }
}
