/**
 * Dashboard application: owns the view state, refreshes panels via the
 * API, and keeps one live event-stream subscription shared by all panels.
 * When the stream drops, live panels fall back to interval polling until
 * it reconnects; historical (fixed-range) views always query directly.
 */
import {
  ApiClient,
  SseClient,
  type AlertInfo,
  type SeriesResult,
  type StreamEvent,
  type StreamStatus,
} from "./api.js";
import { alertClickView, splitFeed } from "./alerts.js";
import { renderSeries, toNamedSeries } from "./charts.js";
import { panelsFor, type PanelSpec } from "./panels.js";
import {
  matcherError,
  parseView,
  serializeView,
  type ViewState,
} from "./state.js";

const LIVE_REFRESH_MS = 5000;
const POLL_FALLBACK_MS = 5000;

export class DashboardApp {
  view: ViewState;
  private api: ApiClient;
  private stream: SseClient | null = null;
  private refreshTimer: ReturnType<typeof setInterval> | null = null;
  private refreshing = false;
  private pendingRefresh = false;
  private lastRefreshMs = 0;

  constructor(
    private readonly root: HTMLElement,
    apiBase = "",
  ) {
    this.api = new ApiClient(apiBase);
    this.view = parseView(location.hash);
    window.addEventListener("hashchange", () => {
      this.view = parseView(location.hash);
      this.renderSkeleton();
      void this.refresh();
    });
  }

  start(): void {
    this.renderSkeleton();
    this.connectStream();
    this.refreshTimer = setInterval(() => {
      const streamDown = this.stream === null || this.stream.status !== "live";
      if (this.view.range.kind === "live" && streamDown) {
        void this.refresh(); // polling fallback keeps live panels moving
      }
    }, POLL_FALLBACK_MS);
    void this.refresh();
  }

  stop(): void {
    this.stream?.close();
    if (this.refreshTimer !== null) clearInterval(this.refreshTimer);
  }

  setView(view: ViewState): void {
    this.view = view;
    const serialized = serializeView(view);
    if (location.hash !== serialized) {
      history.replaceState(null, "", serialized);
    }
    this.renderSkeleton();
    void this.refresh();
  }

  // -- live stream --------------------------------------------------------

  private connectStream(): void {
    this.stream = new SseClient(
      this.api.streamUrl(),
      (event) => this.onStreamEvent(event),
      (status) => this.onStreamStatus(status),
    );
    this.stream.start();
  }

  private onStreamEvent(event: StreamEvent): void {
    if (this.view.range.kind !== "live") return;
    if (event.type === "alert" || event.type === "target_health") {
      void this.refreshAlerts();
      void this.refreshTargets();
    }
    if (event.type === "sample_batch") {
      const now = Date.now();
      if (now - this.lastRefreshMs >= LIVE_REFRESH_MS / 2) {
        void this.refresh();
      }
    }
  }

  private onStreamStatus(status: StreamStatus): void {
    const badge = this.root.querySelector<HTMLElement>("#stream-badge");
    if (badge) {
      badge.dataset["status"] = status;
      badge.textContent =
        status === "live" ? "live" : status === "stale" ? "stale data" : "stream down";
    }
  }

  // -- rendering ----------------------------------------------------------

  private renderSkeleton(): void {
    this.root.replaceChildren();

    const header = document.createElement("header");
    const title = document.createElement("h1");
    title.textContent = "enclavewatch";
    const badge = document.createElement("span");
    badge.id = "stream-badge";
    badge.dataset["status"] = this.stream?.status ?? "connecting";
    badge.textContent = "connecting";

    const tabs = document.createElement("nav");
    for (const dashboard of ["sgx", "infrastructure"] as const) {
      const tab = document.createElement("button");
      tab.textContent = dashboard;
      tab.className = this.view.dashboard === dashboard ? "tab active" : "tab";
      tab.addEventListener("click", () => this.setView({ ...this.view, dashboard }));
      tabs.append(tab);
    }

    header.append(title, badge, tabs, this.renderRangePicker(), this.renderFilterBox());
    this.root.append(header);

    const banner = document.createElement("div");
    banner.id = "api-banner";
    banner.hidden = true;
    this.root.append(banner);

    const layout = document.createElement("div");
    layout.className = "layout";
    const grid = document.createElement("main");
    grid.id = "panel-grid";
    for (const panel of panelsFor(this.view)) {
      const card = document.createElement("section");
      card.className = "panel";
      card.id = `panel-${panel.id}`;
      const heading = document.createElement("h2");
      heading.textContent = panel.title;
      const body = document.createElement("div");
      body.className = "panel-body";
      card.append(heading, body);
      grid.append(card);
    }
    const aside = document.createElement("aside");
    aside.id = "alert-feed";
    layout.append(grid, aside);
    this.root.append(layout);
  }

  private renderRangePicker(): HTMLElement {
    const picker = document.createElement("span");
    picker.className = "range-picker";
    const ranges: [string, number][] = [
      ["15m", 15 * 60_000],
      ["1h", 3_600_000],
      ["6h", 6 * 3_600_000],
    ];
    for (const [label, windowMs] of ranges) {
      const btn = document.createElement("button");
      btn.textContent = label;
      const active =
        this.view.range.kind === "live" && this.view.range.windowMs === windowMs;
      btn.className = active ? "tab active" : "tab";
      btn.addEventListener("click", () =>
        this.setView({ ...this.view, range: { kind: "live", windowMs } }),
      );
      picker.append(btn);
    }
    if (this.view.range.kind === "fixed") {
      const span = document.createElement("span");
      span.className = "fixed-range";
      const from = new Date(this.view.range.startMs).toLocaleTimeString();
      const to = new Date(this.view.range.endMs).toLocaleTimeString();
      span.textContent = `${from} – ${to}`;
      const live = document.createElement("button");
      live.textContent = "back to live";
      live.className = "tab";
      live.addEventListener("click", () =>
        this.setView({ ...this.view, range: { kind: "live", windowMs: 15 * 60_000 } }),
      );
      picker.append(span, live);
    }
    return picker;
  }

  private renderFilterBox(): HTMLElement {
    const wrapper = document.createElement("span");
    wrapper.className = "filter-box";
    const input = document.createElement("input");
    input.placeholder = 'process filter, e.g. pid==1234';
    input.value = this.view.filter.join(" ");
    const error = document.createElement("span");
    error.className = "filter-error";
    input.addEventListener("change", () => {
      const parts = input.value.split(/\s+/).filter((p) => p.length > 0);
      const bad = parts.map((p) => matcherError(p)).find((e) => e !== null);
      if (bad) {
        error.textContent = bad; // keep the previous view on invalid input
        return;
      }
      error.textContent = "";
      this.setView({ ...this.view, filter: parts });
    });
    wrapper.append(input, error);
    return wrapper;
  }

  // -- data refresh -------------------------------------------------------

  async refresh(): Promise<void> {
    if (this.refreshing) {
      this.pendingRefresh = true;
      return;
    }
    this.refreshing = true;
    this.lastRefreshMs = Date.now();
    try {
      const healthy = await this.api.healthz();
      this.showBanner(!healthy);
      if (healthy) {
        await Promise.all([this.refreshPanels(), this.refreshAlerts(), this.refreshTargets()]);
      }
    } finally {
      this.refreshing = false;
      if (this.pendingRefresh) {
        this.pendingRefresh = false;
        void this.refresh();
      }
    }
  }

  private showBanner(show: boolean): void {
    const banner = this.root.querySelector<HTMLElement>("#api-banner");
    if (!banner) return;
    banner.hidden = !show;
    if (show) {
      banner.replaceChildren();
      banner.textContent = "API unreachable — ";
      const retry = document.createElement("button");
      retry.textContent = "retry";
      retry.addEventListener("click", () => void this.refresh());
      banner.append(retry);
    }
  }

  private async refreshPanels(): Promise<void> {
    const now = Date.now();
    await Promise.all(
      panelsFor(this.view).map((panel) => this.refreshPanel(panel, now)),
    );
  }

  private async refreshPanel(panel: PanelSpec, nowMs: number): Promise<void> {
    const body = this.root.querySelector<HTMLElement>(`#panel-${panel.id} .panel-body`);
    if (!body) return;
    try {
      const responses = await Promise.all(
        panel.queries(this.view, nowMs).map((q) => this.api.queryRange(q)),
      );
      const results: SeriesResult[] = responses.flat();
      renderSeries(body, panel.viz, toNamedSeries(results, panel.seriesName), panel.unit);
    } catch (exc) {
      body.replaceChildren();
      const err = document.createElement("div");
      err.className = "no-data";
      err.textContent = `query failed: ${(exc as Error).message}`;
      body.append(err);
    }
  }

  private async refreshAlerts(): Promise<void> {
    const aside = this.root.querySelector<HTMLElement>("#alert-feed");
    if (!aside) return;
    let alerts: AlertInfo[];
    try {
      alerts = await this.api.alerts();
    } catch {
      return;
    }
    const { firing, history } = splitFeed(alerts);
    aside.replaceChildren();
    const heading = document.createElement("h2");
    heading.textContent = `alerts (${firing.length} firing)`;
    aside.append(heading);
    if (firing.length === 0 && history.length === 0) {
      const empty = document.createElement("div");
      empty.className = "no-data";
      empty.textContent = "no alerts";
      aside.append(empty);
      return;
    }
    for (const alert of firing) {
      aside.append(this.alertCard(alert));
    }
    if (history.length > 0) {
      const historyHeading = document.createElement("h3");
      historyHeading.textContent = "history";
      aside.append(historyHeading);
      for (const alert of history) {
        aside.append(this.alertCard(alert));
      }
    }
  }

  private alertCard(alert: AlertInfo): HTMLElement {
    const card = document.createElement("button");
    card.className = `alert ${alert.severity} ${alert.state}`;
    const labels = Object.entries(alert.labels)
      .map(([k, v]) => `${k}=${v}`)
      .join(" ");
    card.textContent = `${alert.rule_id} ${labels} observed=${alert.observed.toPrecision(3)}`;
    card.addEventListener("click", () => this.setView(alertClickView(alert, this.view)));
    return card;
  }

  private async refreshTargets(): Promise<void> {
    try {
      const targets = await this.api.targets();
      const down = targets.filter((t) => t.health === "down").length;
      const badge = this.root.querySelector<HTMLElement>("#stream-badge");
      if (badge && down > 0) {
        badge.textContent = `${badge.textContent} · ${down} target(s) down`;
      }
    } catch {
      // banner already covers api failures
    }
  }
}
