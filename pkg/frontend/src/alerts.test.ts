import { describe, expect, it } from "vitest";

import { alertClickView, sortAlerts, splitFeed } from "./alerts.js";
import type { AlertInfo } from "./api.js";
import { defaultView } from "./state.js";

function alert(partial: Partial<AlertInfo>): AlertInfo {
  return {
    rule_id: "r",
    window_start_ms: 0,
    window_end_ms: 300_000,
    observed: 2.0,
    threshold: 1.0,
    severity: "warning",
    state: "firing",
    labels: {},
    ...partial,
  };
}

describe("alert feed ordering", () => {
  it("sorts by severity then recency", () => {
    const alerts = [
      alert({ rule_id: "old-critical", severity: "critical", window_end_ms: 100 }),
      alert({ rule_id: "new-warning", severity: "warning", window_end_ms: 900 }),
      alert({ rule_id: "new-critical", severity: "critical", window_end_ms: 500 }),
      alert({ rule_id: "info", severity: "info", window_end_ms: 999 }),
    ];
    expect(sortAlerts(alerts).map((a) => a.rule_id)).toEqual([
      "new-critical",
      "old-critical",
      "new-warning",
      "info",
    ]);
  });

  it("resolved alerts move to the history section", () => {
    const { firing, history } = splitFeed([
      alert({ rule_id: "a", state: "firing" }),
      alert({ rule_id: "b", state: "resolved" }),
    ]);
    expect(firing.map((a) => a.rule_id)).toEqual(["a"]);
    expect(history.map((a) => a.rule_id)).toEqual(["b"]);
  });
});

describe("alert click", () => {
  it("snaps the range to the alert window and applies its labels", () => {
    const clicked = alertClickView(
      alert({
        window_start_ms: 60_000,
        window_end_ms: 360_000,
        labels: { job: "tee", instance: "127.0.0.1:9710" },
      }),
      defaultView(),
    );
    expect(clicked.range).toEqual({ kind: "fixed", startMs: 60_000, endMs: 360_000 });
    expect(clicked.filter).toEqual(["job==tee", "instance==127.0.0.1:9710"]);
  });

  it("keeps the active dashboard", () => {
    const view = { ...defaultView(), dashboard: "infrastructure" as const };
    expect(alertClickView(alert({}), view).dashboard).toBe("infrastructure");
  });
});
