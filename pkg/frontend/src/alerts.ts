/** Alert feed ordering and interactions. */
import type { AlertInfo } from "./api.js";
import type { ViewState } from "./state.js";

const SEVERITY_RANK: Record<string, number> = { critical: 0, warning: 1, info: 2 };

/** Firing alerts sorted by severity then recency (newest first). */
export function sortAlerts(alerts: AlertInfo[]): AlertInfo[] {
  return [...alerts].sort((a, b) => {
    const severity = (SEVERITY_RANK[a.severity] ?? 9) - (SEVERITY_RANK[b.severity] ?? 9);
    if (severity !== 0) return severity;
    return b.window_end_ms - a.window_end_ms;
  });
}

export function splitFeed(alerts: AlertInfo[]): { firing: AlertInfo[]; history: AlertInfo[] } {
  return {
    firing: sortAlerts(alerts.filter((a) => a.state === "firing")),
    history: sortAlerts(alerts.filter((a) => a.state === "resolved")),
  };
}

/**
 * Clicking an alert snaps the time range to its window and applies its
 * group labels as the process filter.
 */
export function alertClickView(alert: AlertInfo, view: ViewState): ViewState {
  return {
    ...view,
    range: { kind: "fixed", startMs: alert.window_start_ms, endMs: alert.window_end_ms },
    filter: Object.entries(alert.labels).map(([name, value]) => `${name}==${value}`),
  };
}
