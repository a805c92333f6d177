/**
 * Panel catalog for the two built-in dashboards. A panel declares the
 * query_range requests it needs for a view; the process filter matcher
 * list is appended to every query, and steps are chosen so no panel asks
 * for more than MAX_POINTS_PER_PANEL samples per series.
 */
import type { QueryRangeParams, SeriesResult } from "./api.js";
import { resolveRange, type ViewState } from "./state.js";

export type Visualization = "line" | "area" | "single-stat" | "table" | "boxplot";

export interface PanelSpec {
  id: string;
  title: string;
  viz: Visualization;
  unit?: string;
  queries(view: ViewState, nowMs: number): QueryRangeParams[];
  /** label to display per series; defaults to joined label pairs */
  seriesName?(labels: Record<string, string>): string;
}

export const MAX_POINTS_PER_PANEL = 2000;
export const MIN_STEP_MS = 15_000;

export function stepFor(startMs: number, endMs: number): number {
  const span = Math.max(1, endMs - startMs);
  const raw = Math.ceil(span / MAX_POINTS_PER_PANEL);
  const rounded = Math.ceil(raw / 1000) * 1000;
  return Math.max(MIN_STEP_MS, rounded);
}

function windowed(
  view: ViewState,
  nowMs: number,
  build: (startMs: number, endMs: number, stepMs: number) => QueryRangeParams[],
): QueryRangeParams[] {
  const { startMs, endMs } = resolveRange(view, nowMs);
  return build(startMs, endMs, stepFor(startMs, endMs)).map((q) => ({
    ...q,
    matchers: [...(q.matchers ?? []), ...view.filter],
  }));
}

function gaugeAvg(name: string, startMs: number, endMs: number, stepMs: number): QueryRangeParams {
  return { name, startMs, endMs, stepMs, agg: "avg" };
}

function counterRate(
  name: string,
  startMs: number,
  endMs: number,
  stepMs: number,
  groupBy: string[] = ["job", "instance"],
): QueryRangeParams {
  return { name, startMs, endMs, stepMs, agg: "rate", groupBy };
}

export function sgxPanels(): PanelSpec[] {
  return [
    {
      id: "epc-utilization",
      title: "EPC utilization (pages)",
      viz: "area",
      unit: "pages",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          gaugeAvg("sgx_nr_free_pages", s, e, step),
          gaugeAvg("sgx_epc_total_pages", s, e, step),
        ]),
      seriesName: (labels) => labels["__name__"] ?? "epc",
    },
    {
      id: "eviction-rate",
      title: "EPC page evictions / reclaims / adds",
      viz: "line",
      unit: "pages/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          counterRate("sgx_nr_evicted", s, e, step),
          counterRate("sgx_pages_reclaimed", s, e, step),
          counterRate("sgx_pages_added", s, e, step),
        ]),
    },
    {
      id: "enclave-counts",
      title: "Enclaves",
      viz: "single-stat",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [gaugeAvg("sgx_nr_enclaves", s, e, step)]),
    },
    {
      id: "page-faults",
      title: "Page faults by space",
      viz: "line",
      unit: "faults/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "page_faults", startMs: s, endMs: e, stepMs: step, agg: "rate", groupBy: ["space"] },
        ]),
    },
    {
      id: "syscall-distribution",
      title: "System call distribution",
      viz: "table",
      unit: "calls/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "syscalls", startMs: s, endMs: e, stepMs: step, agg: "rate", groupBy: ["syscall"] },
        ]),
    },
    {
      id: "context-switches",
      title: "Context switches",
      viz: "line",
      unit: "switches/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "context_switches", startMs: s, endMs: e, stepMs: step, agg: "rate", groupBy: ["scope"] },
        ]),
    },
    {
      id: "epc-free-boxplot",
      title: "Free EPC pages (window distribution)",
      viz: "boxplot",
      unit: "pages",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "sgx_nr_free_pages", startMs: s, endMs: e, stepMs: step },
        ]),
    },
  ];
}

export function infrastructurePanels(): PanelSpec[] {
  return [
    {
      id: "target-up",
      title: "Scrape health (up)",
      viz: "table",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "up", startMs: s, endMs: e, stepMs: step, agg: "min", groupBy: ["job", "instance"] },
        ]),
    },
    {
      id: "llc",
      title: "Last-level cache",
      viz: "line",
      unit: "events/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          counterRate("llc_misses", s, e, step),
          counterRate("llc_references", s, e, step),
        ]),
    },
    {
      id: "host-context-switches",
      title: "Host context switches",
      viz: "line",
      unit: "switches/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          {
            name: "context_switches",
            startMs: s,
            endMs: e,
            stepMs: step,
            agg: "rate",
            groupBy: ["scope"],
            matchers: ["scope==host"],
          },
        ]),
    },
    {
      id: "page-fault-rate",
      title: "Page faults",
      viz: "line",
      unit: "faults/s",
      queries: (view, now) =>
        windowed(view, now, (s, e, step) => [
          { name: "page_faults", startMs: s, endMs: e, stepMs: step, agg: "rate", groupBy: ["space"] },
        ]),
    },
  ];
}

export function panelsFor(view: ViewState): PanelSpec[] {
  return view.dashboard === "sgx" ? sgxPanels() : infrastructurePanels();
}

export interface FiveNumberSummary {
  min: number;
  q1: number;
  median: number;
  q3: number;
  max: number;
  count: number;
}

/** Same linear interpolation at (n-1)*q as the analyzer's box plots. */
export function fiveNumberSummary(values: number[]): FiveNumberSummary | null {
  if (values.length === 0) return null;
  const sorted = [...values].sort((a, b) => a - b);
  const n = sorted.length;
  const at = (q: number): number => {
    if (n === 1) return sorted[0]!;
    const pos = (n - 1) * q;
    const lo = Math.floor(pos);
    const hi = Math.min(lo + 1, n - 1);
    return sorted[lo]! + (sorted[hi]! - sorted[lo]!) * (pos - lo);
  };
  return {
    min: sorted[0]!,
    q1: at(0.25),
    median: at(0.5),
    q3: at(0.75),
    max: sorted[n - 1]!,
    count: n,
  };
}

/** True when any series of any result carries a nonzero point. */
export function hasNonzeroPoint(results: SeriesResult[]): boolean {
  return results.some((series) => series.points.some(([, value]) => value !== 0));
}
