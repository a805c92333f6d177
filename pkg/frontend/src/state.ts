/**
 * View state and its URL encoding. The whole view round-trips through the
 * location hash so any dashboard configuration is deep-linkable:
 *
 *   #/sgx?range=live&window=900000
 *   #/infrastructure?from=0&to=120000&filter=pid%3D%3Dother&filter=job%3D%3Dtee
 */

export type DashboardId = "sgx" | "infrastructure";

export type TimeRange =
  | { kind: "live"; windowMs: number }
  | { kind: "fixed"; startMs: number; endMs: number };

export interface ViewState {
  dashboard: DashboardId;
  range: TimeRange;
  /** matcher strings (name==value, name!=value, name=~regex) applied to all panels */
  filter: string[];
}

export const DEFAULT_LIVE_WINDOW_MS = 15 * 60_000;

export function defaultView(): ViewState {
  return {
    dashboard: "sgx",
    range: { kind: "live", windowMs: DEFAULT_LIVE_WINDOW_MS },
    filter: [],
  };
}

const MATCHER_SYNTAX = /^([a-zA-Z_][a-zA-Z0-9_]*)(=~|!=|==)([\s\S]*)$/;

/** Returns an error message, or null when the matcher is valid. */
export function matcherError(text: string): string | null {
  const m = MATCHER_SYNTAX.exec(text);
  if (!m) {
    return "expected name==value, name!=value or name=~regex";
  }
  if (m[2] === "=~") {
    try {
      new RegExp(m[3] ?? "");
    } catch (exc) {
      return `bad regex: ${(exc as Error).message}`;
    }
  }
  return null;
}

export function serializeView(view: ViewState): string {
  const search = new URLSearchParams();
  if (view.range.kind === "live") {
    search.set("range", "live");
    search.set("window", String(view.range.windowMs));
  } else {
    search.set("from", String(view.range.startMs));
    search.set("to", String(view.range.endMs));
  }
  for (const matcher of view.filter) {
    search.append("filter", matcher);
  }
  return `#/${view.dashboard}?${search.toString()}`;
}

export function parseView(hash: string): ViewState {
  const view = defaultView();
  const stripped = hash.replace(/^#\/?/, "");
  const q = stripped.indexOf("?");
  const path = q >= 0 ? stripped.slice(0, q) : stripped;
  const search = new URLSearchParams(q >= 0 ? stripped.slice(q + 1) : "");

  if (path === "sgx" || path === "infrastructure") {
    view.dashboard = path;
  }
  const from = search.get("from");
  const to = search.get("to");
  if (from !== null && to !== null) {
    const startMs = Number(from);
    const endMs = Number(to);
    if (Number.isFinite(startMs) && Number.isFinite(endMs) && startMs <= endMs) {
      view.range = { kind: "fixed", startMs, endMs };
    }
  } else {
    const windowMs = Number(search.get("window") ?? DEFAULT_LIVE_WINDOW_MS);
    view.range = {
      kind: "live",
      windowMs: Number.isFinite(windowMs) && windowMs > 0 ? windowMs : DEFAULT_LIVE_WINDOW_MS,
    };
  }
  view.filter = search.getAll("filter").filter((m) => matcherError(m) === null);
  return view;
}

/** The query window for a view at wall-clock time nowMs. */
export function resolveRange(view: ViewState, nowMs: number): { startMs: number; endMs: number } {
  if (view.range.kind === "fixed") {
    return { startMs: view.range.startMs, endMs: view.range.endMs };
  }
  return { startMs: Math.max(0, nowMs - view.range.windowMs), endMs: nowMs };
}
